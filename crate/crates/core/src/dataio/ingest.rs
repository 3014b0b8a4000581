use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::interp::{spline_fill, weekly_hold};
use super::schema::{
    classify_land_use, time_feature_defs, time_features, BasinDataset, BasinRecord, DynamicFeature, FeatureGroup,
};
use crate::error::{Error, Result};

const DATE_FORMAT: &str = "%Y-%m-%d";
const STATIC_KEYS: [&str; 5] = ["basin_id", "lon", "lat", "urban_pct", "ag_pct"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    #[serde(default)]
    pub relaxed_land_use: bool,
    /// Basin-variable series with fewer observations than this inside the
    /// loaded calendar are treated as unobserved.
    #[serde(default)]
    pub min_observations: Option<usize>,
}

fn cell(s: &str) -> f64 {
    s.trim().parse::<f64>().unwrap_or(f64::NAN)
}

fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

struct Table {
    header: Vec<String>,
    dates: Vec<NaiveDate>,
    rows: Vec<Vec<f64>>,
}

fn read_dated(path: &Path) -> Result<Table> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("date") {
        return Err(Error::Ingestion(format!("{}: first column must be `date`", path.display())));
    }
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let date = NaiveDate::parse_from_str(rec.get(0).unwrap_or("").trim(), DATE_FORMAT)
            .map_err(|e| Error::Ingestion(format!("{}: bad date: {e}", path.display())))?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::Ingestion(format!(
                    "{}: dates not strictly increasing at {date}",
                    path.display()
                )));
            }
            if Some(date) != prev.succ_opt() {
                return Err(Error::Ingestion(format!("{}: gap in daily dates before {date}", path.display())));
            }
        }
        dates.push(date);
        rows.push((1..header.len()).map(|i| cell(rec.get(i).unwrap_or(""))).collect());
    }
    Ok(Table { header, dates, rows })
}

fn basin_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Reads `statics.csv`, `dynamics/<id>.csv` and `targets/<id>.csv` from
/// `dir`.
pub fn ingest_csv(dir: impl AsRef<Path>, options: &IngestOptions) -> Result<BasinDataset> {
    let dir = dir.as_ref();
    let static_path = dir.join("statics.csv");
    let mut rdr = csv::Reader::from_path(&static_path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", static_path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header.len() < STATIC_KEYS.len() || header[..STATIC_KEYS.len()] != STATIC_KEYS {
        return Err(Error::Ingestion(format!(
            "statics.csv must start with columns {}",
            STATIC_KEYS.join(",")
        )));
    }
    let static_names: Vec<String> = header[STATIC_KEYS.len()..].to_vec();
    let mut static_rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let values = (1..header.len()).map(|i| cell(rec.get(i).unwrap_or(""))).collect();
        if static_rows.insert(id.clone(), values).is_some() {
            return Err(Error::Ingestion(format!("duplicate static row for basin {id}")));
        }
    }

    let dyn_files = basin_files(&dir.join("dynamics"))?;
    if dyn_files.is_empty() {
        return Err(Error::Ingestion("no basin dynamics files".into()));
    }
    let mut features: Option<Vec<DynamicFeature>> = None;
    let mut keep: Vec<usize> = Vec::new();
    let mut target_names: Option<Vec<String>> = None;
    let mut calendar: Option<Vec<NaiveDate>> = None;
    let mut basins = Vec::new();

    for (id, path) in &dyn_files {
        let st = static_rows
            .get(id)
            .ok_or_else(|| Error::Ingestion(format!("no static row for basin {id}")))?;
        let table = read_dated(path)?;
        if let Some(known) = &features {
            let expected: Vec<String> = known.iter().map(|f| f.header()).collect();
            let got: Vec<&String> = keep.iter().map(|&i| &table.header[i + 1]).collect();
            if got.len() != expected.len() || got.iter().zip(&expected).any(|(a, b)| *a != b) {
                return Err(Error::Ingestion(format!("basin {id} has different dynamic columns")));
            }
        } else {
            let mut f = Vec::new();
            for (i, h) in table.header.iter().enumerate().skip(1) {
                let (prefix, name) = h
                    .split_once(':')
                    .ok_or_else(|| Error::Ingestion(format!("dynamic column `{h}` lacks a group prefix")))?;
                let group = FeatureGroup::from_prefix(prefix)
                    .ok_or_else(|| Error::Ingestion(format!("unknown feature group `{prefix}`")))?;
                if group != FeatureGroup::Time {
                    f.push(DynamicFeature::new(name, group));
                    keep.push(i - 1);
                }
            }
            features = Some(f);
        }
        match &calendar {
            None => calendar = Some(table.dates.clone()),
            Some(c) if *c != table.dates => {
                return Err(Error::Ingestion(format!("basin {id} does not share the common calendar")))
            }
            _ => {}
        }
        let targ_path = dir.join("targets").join(format!("{id}.csv"));
        let targ = read_dated(&targ_path)?;
        if targ.dates != table.dates {
            return Err(Error::Ingestion(format!("basin {id}: target dates differ from dynamics")));
        }
        let names: Vec<String> = targ.header[1..].to_vec();
        match &target_names {
            None => target_names = Some(names),
            Some(n) if *n != names => {
                return Err(Error::Ingestion(format!("basin {id} has different target columns")))
            }
            _ => {}
        }

        let feats = features.as_ref().unwrap();
        let n = table.dates.len();
        let mut columns: Vec<Vec<f64>> = keep.iter().map(|&i| table.rows.iter().map(|r| r[i]).collect()).collect();
        for (col, feat) in columns.iter_mut().zip(feats) {
            match feat.group {
                FeatureGroup::RC => weekly_hold(col),
                FeatureGroup::V => spline_fill(col),
                _ => {}
            }
        }
        let mut dynamics = Vec::with_capacity(n * (feats.len() + 3));
        for t in 0..n {
            for col in &columns {
                dynamics.push(col[t]);
            }
            dynamics.extend(time_features(table.dates[t]));
        }
        let targets: Vec<f64> = targ.rows.iter().flatten().copied().collect();
        let mask = targets.iter().map(|v| v.is_finite()).collect();

        let (coords, urban, ag) = ([st[0], st[1]], st[2], st[3]);
        let land_use = classify_land_use(urban, ag, options.relaxed_land_use)
            .map_err(|e| Error::Ingestion(format!("basin {id}: {e}")))?;
        basins.push(BasinRecord {
            id: id.clone(),
            coords,
            urban_pct: urban,
            ag_pct: ag,
            land_use,
            statics: st[4..].to_vec(),
            dynamics,
            targets,
            mask,
        });
    }

    let mut features = features.unwrap();
    features.extend(time_feature_defs());
    let mut ds = BasinDataset {
        features,
        static_names,
        target_names: target_names.unwrap_or_default(),
        calendar: calendar.unwrap_or_default(),
        basins,
    };
    ds.validate()?;
    if let Some(min) = options.min_observations {
        ds.screen_by_observations(min);
    }
    Ok(ds)
}

/// Writes the layout read by [`ingest_csv`]. Time features are derived
/// on read and not written.
pub fn write_csv(ds: &BasinDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["dynamics", "targets"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut w = csv::Writer::from_path(dir.join("statics.csv"))?;
    let mut header: Vec<String> = STATIC_KEYS.iter().map(|s| s.to_string()).collect();
    header.extend(ds.static_names.iter().cloned());
    w.write_record(&header)?;
    for b in &ds.basins {
        let mut row = vec![b.id.clone(), fmt(b.coords[0]), fmt(b.coords[1]), fmt(b.urban_pct), fmt(b.ag_pct)];
        row.extend(b.statics.iter().map(|&x| fmt(x)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(dir.join("statics.csv"), e))?;

    let cols: Vec<usize> = (0..ds.n_dynamic()).filter(|&j| ds.features[j].group != FeatureGroup::Time).collect();
    let v = ds.n_targets();
    for b in &ds.basins {
        let path = dir.join("dynamics").join(format!("{}.csv", b.id));
        let mut w = csv::Writer::from_path(&path)?;
        let mut h = vec!["date".to_string()];
        h.extend(cols.iter().map(|&j| ds.features[j].header()));
        w.write_record(&h)?;
        for (t, date) in ds.calendar.iter().enumerate() {
            let r = ds.dynamic_row(b, t);
            let mut row = vec![date.format(DATE_FORMAT).to_string()];
            row.extend(cols.iter().map(|&j| fmt(r[j])));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("targets").join(format!("{}.csv", b.id));
        let mut w = csv::Writer::from_path(&path)?;
        let mut h = vec!["date".to_string()];
        h.extend(ds.target_names.iter().cloned());
        w.write_record(&h)?;
        for (t, date) in ds.calendar.iter().enumerate() {
            let mut row = vec![date.format(DATE_FORMAT).to_string()];
            row.extend((0..v).map(|j| if b.mask[t * v + j] { fmt(b.targets[t * v + j]) } else { String::new() }));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
