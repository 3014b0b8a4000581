use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value written into normalized inputs wherever a feature is missing.
pub const FILL_VALUE: f64 = -1.0;

/// Reference date for the `datenum` time feature.
pub fn reference_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureGroup {
    M,
    Q,
    RC,
    V,
    Time,
}

impl FeatureGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            FeatureGroup::M => "M",
            FeatureGroup::Q => "Q",
            FeatureGroup::RC => "RC",
            FeatureGroup::V => "V",
            FeatureGroup::Time => "T",
        }
    }

    pub fn from_prefix(s: &str) -> Option<Self> {
        Some(match s {
            "M" => FeatureGroup::M,
            "Q" => FeatureGroup::Q,
            "RC" => FeatureGroup::RC,
            "V" => FeatureGroup::V,
            "T" => FeatureGroup::Time,
            _ => return None,
        })
    }
}

/// Groups used by the attribution protocols. Time features and
/// coordinates belong to none of them and are never removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttrGroup {
    M,
    Q,
    RC,
    V,
    BA,
}

impl AttrGroup {
    pub const ALL: [AttrGroup; 5] = [AttrGroup::M, AttrGroup::Q, AttrGroup::RC, AttrGroup::V, AttrGroup::BA];

    pub fn name(self) -> &'static str {
        match self {
            AttrGroup::M => "M",
            AttrGroup::Q => "Q",
            AttrGroup::RC => "RC",
            AttrGroup::V => "V",
            AttrGroup::BA => "BA",
        }
    }

    pub fn of_feature(group: FeatureGroup) -> Option<AttrGroup> {
        match group {
            FeatureGroup::M => Some(AttrGroup::M),
            FeatureGroup::Q => Some(AttrGroup::Q),
            FeatureGroup::RC => Some(AttrGroup::RC),
            FeatureGroup::V => Some(AttrGroup::V),
            FeatureGroup::Time => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LandUse {
    AG,
    UD,
    UR,
    MX,
}

impl LandUse {
    pub const ALL: [LandUse; 4] = [LandUse::AG, LandUse::UD, LandUse::UR, LandUse::MX];
}

/// Land-use class from urban and agricultural percentages. Rules are
/// tried in the order AG, UD, UR, MX; `relaxed` raises the urban ceiling
/// for AG from 5% to 7%.
pub fn classify_land_use(urban_pct: f64, ag_pct: f64, relaxed: bool) -> Result<LandUse> {
    for (name, v) in [("urban", urban_pct), ("agricultural", ag_pct)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Domain(format!("{name} percentage {v} outside [0, 100]")));
        }
    }
    let ag_urban_cap = if relaxed { 7.0 } else { 5.0 };
    Ok(if ag_pct > 50.0 && urban_pct <= ag_urban_cap {
        LandUse::AG
    } else if urban_pct <= 5.0 && ag_pct <= 25.0 {
        LandUse::UD
    } else if urban_pct > 25.0 && ag_pct <= 25.0 {
        LandUse::UR
    } else {
        LandUse::MX
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicFeature {
    pub name: String,
    pub group: FeatureGroup,
}

impl DynamicFeature {
    pub fn new(name: &str, group: FeatureGroup) -> Self {
        DynamicFeature {
            name: name.to_string(),
            group,
        }
    }

    /// Column header used in the per-basin dynamics files.
    pub fn header(&self) -> String {
        format!("{}:{}", self.group.prefix(), self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasinRecord {
    pub id: String,
    /// Longitude and latitude in decimal degrees.
    pub coords: [f64; 2],
    pub urban_pct: f64,
    pub ag_pct: f64,
    pub land_use: LandUse,
    pub statics: Vec<f64>,
    /// `T × F_d`, row-major. NaN marks a value still missing after gap
    /// filling.
    pub dynamics: Vec<f64>,
    /// `T × n_targets`, row-major. NaN where unobserved.
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasinDataset {
    pub features: Vec<DynamicFeature>,
    pub static_names: Vec<String>,
    pub target_names: Vec<String>,
    pub calendar: Vec<NaiveDate>,
    pub basins: Vec<BasinRecord>,
}

/// `[datenum, sinT, cosT]` for one date.
pub fn time_features(date: NaiveDate) -> [f64; 3] {
    let d = (date - reference_date()).num_days() as f64;
    let phase = 2.0 * std::f64::consts::PI * d / crate::metrics::DAYS_PER_YEAR;
    [d, phase.sin(), phase.cos()]
}

pub fn time_feature_defs() -> [DynamicFeature; 3] {
    [
        DynamicFeature::new("datenum", FeatureGroup::Time),
        DynamicFeature::new("sinT", FeatureGroup::Time),
        DynamicFeature::new("cosT", FeatureGroup::Time),
    ]
}

impl BasinDataset {
    pub fn n_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn n_dynamic(&self) -> usize {
        self.features.len()
    }

    pub fn n_targets(&self) -> usize {
        self.target_names.len()
    }

    pub fn dynamic_row<'a>(&'a self, basin: &'a BasinRecord, t: usize) -> &'a [f64] {
        let f = self.n_dynamic();
        &basin.dynamics[t * f..(t + 1) * f]
    }

    /// Indices of the dynamic columns belonging to `group`.
    pub fn columns_of(&self, group: FeatureGroup) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.target_names.iter().position(|n| n == name)
    }

    pub fn year_of(&self, t: usize) -> i32 {
        self.calendar[t].year()
    }

    /// Checks the structural invariants shared by ingestion and synthesis.
    pub fn validate(&self) -> Result<()> {
        for w in self.calendar.windows(2) {
            if w[1] != w[0].succ_opt().expect("date in range") {
                return Err(Error::Ingestion(format!(
                    "calendar is not strictly increasing and daily at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        let (t, f, v) = (self.n_days(), self.n_dynamic(), self.n_targets());
        for b in &self.basins {
            if b.dynamics.len() != t * f || b.targets.len() != t * v || b.mask.len() != t * v {
                return Err(Error::Ingestion(format!("basin {} has inconsistent array sizes", b.id)));
            }
            if b.statics.len() != self.static_names.len() {
                return Err(Error::Ingestion(format!("basin {} has the wrong number of statics", b.id)));
            }
        }
        Ok(())
    }

    /// Clears the masks of every basin-variable series with fewer than
    /// `min_obs` observations inside the current calendar.
    pub fn screen_by_observations(&mut self, min_obs: usize) -> usize {
        let v = self.n_targets();
        let mut cleared = 0;
        for b in &mut self.basins {
            for j in 0..v {
                let n = (0..b.mask.len() / v.max(1)).filter(|&t| b.mask[t * v + j]).count();
                if n < min_obs && n > 0 {
                    for t in 0..b.mask.len() / v {
                        b.mask[t * v + j] = false;
                        b.targets[t * v + j] = f64::NAN;
                    }
                    cleared += 1;
                }
            }
        }
        cleared
    }
}

/// Percentage of calendar days on which `variable` was observed.
pub fn coverage(record: &BasinRecord, n_targets: usize, variable: usize) -> f64 {
    let days = record.mask.len() / n_targets;
    if days == 0 {
        return 0.0;
    }
    let observed = (0..days).filter(|&t| record.mask[t * n_targets + variable]).count();
    100.0 * observed as f64 / days as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn land_use_examples() {
        assert_eq!(classify_land_use(6.0, 60.0, true).unwrap(), LandUse::AG);
        assert_eq!(classify_land_use(6.0, 60.0, false).unwrap(), LandUse::MX);
        assert_eq!(classify_land_use(3.0, 10.0, false).unwrap(), LandUse::UD);
        assert_eq!(classify_land_use(30.0, 30.0, false).unwrap(), LandUse::MX);
        assert_eq!(classify_land_use(30.0, 20.0, false).unwrap(), LandUse::UR);
        assert!(matches!(classify_land_use(-1.0, 20.0, false), Err(Error::Domain(_))));
        assert!(classify_land_use(10.0, 100.5, false).is_err());
    }

    #[test]
    fn land_use_is_total_on_a_grid() {
        for u in 0..=200 {
            for a in 0..=200 {
                let (u, a) = (u as f64 * 0.5, a as f64 * 0.5);
                for relaxed in [false, true] {
                    assert!(classify_land_use(u, a, relaxed).is_ok());
                }
            }
        }
    }

    fn record(mask: Vec<bool>) -> BasinRecord {
        BasinRecord {
            id: "b".into(),
            coords: [0.0, 0.0],
            urban_pct: 0.0,
            ag_pct: 0.0,
            land_use: LandUse::UD,
            statics: vec![],
            dynamics: vec![],
            targets: vec![0.0; mask.len()],
            mask,
        }
    }

    #[test]
    fn coverage_counts_days() {
        let mask: Vec<bool> = (0..370).map(|t| t < 74).collect();
        assert!((coverage(&record(mask), 1, 0) - 20.0).abs() < 1e-12);
        assert_eq!(coverage(&record(vec![true; 5]), 1, 0), 100.0);
        assert_eq!(coverage(&record(vec![false; 5]), 1, 0), 0.0);
    }

    #[test]
    fn time_features_at_reference() {
        let [d, s, c] = time_features(reference_date());
        assert_eq!((d, s, c), (0.0, 0.0, 1.0));
        let before = time_features(NaiveDate::from_ymd_opt(1999, 12, 31).unwrap());
        assert_eq!(before[0], -1.0);
    }
}
