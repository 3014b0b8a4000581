use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trust::DEGRADATION_UNIT;

use super::config::Format;
use super::report::EvaluationReport;

pub const REPORT_FILE: &str = "report.json";

/// One flat CSV table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

/// 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn label<T: serde::Serialize>(v: T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(serde_json::Value::Null) | Err(_) => String::new(),
        Ok(other) => other.to_string(),
    }
}

/// The data tables followed by the plot-data tables, in file order.
pub fn tables(r: &EvaluationReport) -> Vec<Table> {
    let baseline = Table {
        name: "baseline",
        header: vec!["model", "basin", "variable", "condition", "kge", "r", "beta", "gamma", "pbias"],
        rows: r
            .baseline
            .iter()
            .map(|b| {
                vec![
                    b.model.clone(),
                    b.basin.clone(),
                    b.variable.clone(),
                    b.condition.clone(),
                    num(b.kge),
                    num(b.r),
                    num(b.beta),
                    num(b.gamma),
                    num(b.pbias),
                ]
            })
            .collect(),
    };
    let mut robustness = Vec::new();
    let mut fig3 = Vec::new();
    for rec in &r.robustness {
        let c = &rec.curve;
        for k in 0..c.levels.len() {
            robustness.push(vec![
                rec.model.clone(),
                label(c.kind),
                label(c.side),
                num(c.levels[k]),
                num(c.median_pct_change[k]),
                c.n_pairs[k].to_string(),
                num(c.beta),
            ]);
            fig3.push(vec![
                rec.model.clone(),
                format!("{}_{}", label(c.kind), label(c.side)),
                num(c.levels[k] / DEGRADATION_UNIT),
                num(c.median_pct_change[k]),
            ]);
        }
    }
    let mut uncertainty = Vec::new();
    let mut fig4 = Vec::new();
    for u in &r.uncertainty {
        for row in &u.rows {
            uncertainty.push(vec![
                u.model.clone(),
                label(u.method),
                num(u.level),
                label(u.scope),
                u.runs.to_string(),
                row.basin.clone(),
                row.variable.clone(),
                num(row.mean_kge),
                num(row.sd_kge),
            ]);
            fig4.push(vec![
                u.model.clone(),
                format!("{}_{}", label(u.method), u.level),
                row.variable.clone(),
                row.basin.clone(),
                num(row.sd_kge),
                num(row.mean_kge),
            ]);
        }
    }
    let mut attribution = Vec::new();
    let mut fig5 = Vec::new();
    for a in &r.attribution {
        for row in &a.rows {
            attribution.push(vec![
                a.model.clone(),
                label(a.method),
                row.variable.clone(),
                row.group.clone(),
                opt(row.raw),
                num(row.share),
            ]);
            fig5.push(vec![
                a.model.clone(),
                label(a.method),
                row.variable.clone(),
                row.group.clone(),
                num(row.share),
            ]);
        }
    }
    let stats = r
        .statistics
        .iter()
        .map(|s| {
            vec![
                s.test.clone(),
                s.scope.clone(),
                s.a.clone(),
                s.b.clone(),
                s.n.to_string(),
                opt(s.statistic),
                opt(s.effect),
                opt(s.p_value),
                opt(s.p_adjusted),
                s.stars.clone().unwrap_or_default(),
                s.note.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let fig1 = r
        .baseline
        .iter()
        .filter(|b| b.condition == super::report::CLEAN)
        .map(|b| vec![b.model.clone(), b.variable.clone(), b.basin.clone(), num(b.kge)])
        .collect();
    let mut fig2 = Vec::new();
    for b in r.baseline.iter().filter(|b| b.condition == super::report::CLEAN) {
        if let Some(p) = r.pairs.iter().find(|p| p.basin == b.basin && p.variable == b.variable) {
            fig2.push(vec![
                b.model.clone(),
                b.basin.clone(),
                b.variable.clone(),
                label(p.land_use),
                num(p.coverage),
                opt(p.simplicity),
                opt(p.linearity),
                num(b.kge),
            ]);
        }
    }
    vec![
        baseline,
        Table {
            name: "robustness",
            header: vec!["model", "kind", "side", "level", "median_pct_change", "n_pairs", "beta"],
            rows: robustness,
        },
        Table {
            name: "uncertainty",
            header: vec!["model", "method", "level", "scope", "runs", "basin", "variable", "mean_kge", "sd_kge"],
            rows: uncertainty,
        },
        Table {
            name: "attribution",
            header: vec!["model", "method", "variable", "group", "raw", "share"],
            rows: attribution,
        },
        Table {
            name: "stats",
            header: vec!["test", "scope", "a", "b", "n", "statistic", "effect", "p_value", "p_adjusted", "stars", "note"],
            rows: stats,
        },
        Table {
            name: "fig1_kge_boxplot",
            header: vec!["model", "variable", "basin", "kge"],
            rows: fig1,
        },
        Table {
            name: "fig2_simplicity_scatter",
            header: vec!["model", "basin", "variable", "land_use", "coverage", "simplicity", "linearity", "kge"],
            rows: fig2,
        },
        Table {
            name: "fig3_robustness_curves",
            header: vec!["model", "curve", "corruption_units", "median_pct_change"],
            rows: fig3,
        },
        Table {
            name: "fig4_uncertainty",
            header: vec!["model", "condition", "variable", "basin", "sd_kge", "mean_kge"],
            rows: fig4,
        },
        Table {
            name: "fig5_attribution_shares",
            header: vec!["model", "method", "variable", "group", "share"],
            rows: fig5,
        },
    ]
}

fn write_table(dir: &Path, t: &Table) -> Result<PathBuf> {
    let path = dir.join(format!("{}.csv", t.name));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(&t.header)?;
    for row in &t.rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the report in every requested format and returns the files.
pub fn emit(report: &EvaluationReport, dir: impl AsRef<Path>, formats: &[Format]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if formats.contains(&Format::Json) {
        let path = dir.join(REPORT_FILE);
        fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if formats.contains(&Format::Csv) {
        for t in tables(report) {
            written.push(write_table(dir, &t)?);
        }
        if let Some(f) = &report.failure {
            let t = Table {
                name: "failure",
                header: vec!["stage", "job", "detail", "not_run"],
                rows: vec![vec![f.stage.clone(), f.job.clone(), f.detail.clone(), f.not_run.join(";")]],
            };
            written.push(write_table(dir, &t)?);
        }
    }
    Ok(written)
}
