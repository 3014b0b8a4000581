use serde::{Deserialize, Serialize};

use super::schema::{BasinDataset, FeatureGroup, FILL_VALUE};
use super::split::RowSet;
use super::synth::{is_minmax_target, MINMAX_STATICS};
use crate::error::{Error, Result};

/// Added to `max(0, −min)` before taking logs.
pub const LOG_OFFSET_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMethod {
    MinMax,
    LogMinMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub method: NormMethod,
    /// Minimum and maximum of the (possibly log-transformed) training
    /// values.
    pub min: f64,
    pub max: f64,
    pub offset: f64,
}

impl ColumnStats {
    pub fn fit(name: &str, method: NormMethod, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let raw: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
        if raw.is_empty() {
            return Err(Error::Normalization {
                column: name.to_string(),
                detail: "no finite training values".into(),
            });
        }
        let raw_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let offset = match method {
            NormMethod::MinMax => 0.0,
            NormMethod::LogMinMax => (-raw_min).max(0.0) + LOG_OFFSET_EPS,
        };
        let mut stats = ColumnStats {
            name: name.to_string(),
            method,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            offset,
        };
        for v in raw {
            let t = stats.forward(v);
            stats.min = stats.min.min(t);
            stats.max = stats.max.max(t);
        }
        if !(stats.max > stats.min) {
            return Err(Error::Normalization {
                column: name.to_string(),
                detail: "column is constant over the training rows".into(),
            });
        }
        Ok(stats)
    }

    fn forward(&self, x: f64) -> f64 {
        match self.method {
            NormMethod::MinMax => x,
            NormMethod::LogMinMax => (x + self.offset).max(f64::MIN_POSITIVE).ln(),
        }
    }

    /// Normalizes one value; NaN stays NaN.
    pub fn apply(&self, x: f64) -> f64 {
        (self.forward(x) - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, y: f64) -> f64 {
        let t = y * (self.max - self.min) + self.min;
        match self.method {
            NormMethod::MinMax => t,
            NormMethod::LogMinMax => t.exp() - self.offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub dynamic: Vec<ColumnStats>,
    pub statics: Vec<ColumnStats>,
    /// Longitude then latitude.
    pub coords: Vec<ColumnStats>,
    pub targets: Vec<ColumnStats>,
}

/// Inputs and targets of every basin in normalized space.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedData {
    /// Per basin, `T × F_d` row-major, missing values replaced by the fill.
    pub dynamics: Vec<Vec<f64>>,
    pub statics: Vec<Vec<f64>>,
    pub coords: Vec<[f64; 2]>,
    /// Per basin, `T × n_targets`, NaN where unobserved.
    pub targets: Vec<Vec<f64>>,
}

pub fn dynamic_method(group: FeatureGroup) -> NormMethod {
    match group {
        FeatureGroup::V | FeatureGroup::Time => NormMethod::MinMax,
        FeatureGroup::M | FeatureGroup::Q | FeatureGroup::RC => NormMethod::LogMinMax,
    }
}

pub fn static_method(name: &str) -> NormMethod {
    if MINMAX_STATICS.contains(&name) {
        NormMethod::MinMax
    } else {
        NormMethod::LogMinMax
    }
}

pub fn target_method(name: &str) -> NormMethod {
    if is_minmax_target(name) {
        NormMethod::MinMax
    } else {
        NormMethod::LogMinMax
    }
}

/// Fits every column on the training rows only.
pub fn fit_normalizer(ds: &BasinDataset, train: &RowSet) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Config("no training rows".into()));
    }
    let f = ds.n_dynamic();
    let v = ds.n_targets();
    let days: Vec<usize> = train.days().collect();
    let basins = &train.basins;
    let dynamic = ds
        .features
        .iter()
        .enumerate()
        .map(|(j, feat)| {
            let values = basins
                .iter()
                .flat_map(|&b| days.iter().map(move |&t| ds.basins[b].dynamics[t * f + j]));
            ColumnStats::fit(&feat.header(), dynamic_method(feat.group), values)
        })
        .collect::<Result<Vec<_>>>()?;
    let statics = ds
        .static_names
        .iter()
        .enumerate()
        .map(|(j, name)| ColumnStats::fit(name, static_method(name), basins.iter().map(|&b| ds.basins[b].statics[j])))
        .collect::<Result<Vec<_>>>()?;
    let coords = ["lon", "lat"]
        .iter()
        .enumerate()
        .map(|(j, name)| ColumnStats::fit(name, NormMethod::MinMax, basins.iter().map(|&b| ds.basins[b].coords[j])))
        .collect::<Result<Vec<_>>>()?;
    let targets = ds
        .target_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let values = basins.iter().flat_map(|&b| {
                let rec = &ds.basins[b];
                days.iter()
                    .filter(move |&&t| rec.mask[t * v + j])
                    .map(move |&t| rec.targets[t * v + j])
            });
            ColumnStats::fit(name, target_method(name), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NormStats {
        dynamic,
        statics,
        coords,
        targets,
    })
}

fn fill(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        FILL_VALUE
    }
}

impl NormStats {
    pub fn apply(&self, ds: &BasinDataset) -> NormalizedData {
        let f = ds.n_dynamic();
        let v = ds.n_targets();
        let mut out = NormalizedData {
            dynamics: Vec::with_capacity(ds.basins.len()),
            statics: Vec::with_capacity(ds.basins.len()),
            coords: Vec::with_capacity(ds.basins.len()),
            targets: Vec::with_capacity(ds.basins.len()),
        };
        for rec in &ds.basins {
            out.dynamics.push(
                rec.dynamics
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| fill(self.dynamic[i % f].apply(x)))
                    .collect(),
            );
            out.statics.push(rec.statics.iter().zip(&self.statics).map(|(&x, s)| fill(s.apply(x))).collect());
            out.coords.push([fill(self.coords[0].apply(rec.coords[0])), fill(self.coords[1].apply(rec.coords[1]))]);
            out.targets.push(
                rec.targets
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| if rec.mask[i] { self.targets[i % v].apply(x) } else { f64::NAN })
                    .collect(),
            );
        }
        out
    }

    /// Maps a normalized prediction for target `j` back to original units.
    pub fn invert_target(&self, j: usize, y: f64) -> f64 {
        self.targets[j].invert(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_definition() {
        let s = ColumnStats::fit("x", NormMethod::MinMax, [0.0, 5.0, 10.0]).unwrap();
        let y: Vec<f64> = [0.0, 5.0, 10.0].iter().map(|&x| s.apply(x)).collect();
        assert_eq!(y, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn log_minmax_uniform_on_decades() {
        let s = ColumnStats::fit("x", NormMethod::LogMinMax, [1.0, 10.0, 100.0]).unwrap();
        // brute force: ln spacing of 1, 10, 100 shifted by the offset
        let l = |x: f64| (x + 1e-6f64).ln();
        let expected = (l(10.0) - l(1.0)) / (l(100.0) - l(1.0));
        assert!((s.apply(10.0) - expected).abs() < 1e-15);
        assert!((s.apply(10.0) - 0.5).abs() < 1e-6);
        assert_eq!(s.apply(1.0), 0.0);
        assert_eq!(s.apply(100.0), 1.0);
    }

    #[test]
    fn round_trip_and_negative_values() {
        let xs = [-3.0, -0.5, 0.0, 2.0, 40.0];
        for method in [NormMethod::MinMax, NormMethod::LogMinMax] {
            let s = ColumnStats::fit("x", method, xs).unwrap();
            for x in xs.iter().chain(&[1.7, 12.0]) {
                assert!((s.invert(s.apply(*x)) - x).abs() < 1e-9, "{method:?} {x}");
            }
        }
    }

    #[test]
    fn constant_column_is_an_error_naming_it() {
        match ColumnStats::fit("flat", NormMethod::MinMax, [2.0, 2.0]) {
            Err(Error::Normalization { column, .. }) => assert_eq!(column, "flat"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
