use serde::{Deserialize, Serialize};

use crate::corrupt::{CorruptionKind, Side};
use crate::dataio::LandUse;
use crate::error::Result;
use crate::trust::{AttributionMethod, RobustnessCurve, TtaScope, UncertaintyMethod};

use super::config::{ExperimentConfig, IgBaselineKind};

/// Bumped whenever the report layout changes.
pub const REPORT_VERSION: u32 = 1;

pub const CLEAN: &str = "clean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub report_version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub model: String,
    pub basin: String,
    pub variable: String,
    pub condition: String,
    pub n_obs: usize,
    pub kge: f64,
    pub r: f64,
    pub beta: f64,
    pub gamma: f64,
    pub pbias: f64,
}

/// Per basin-variable context for the performance scatter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairContext {
    pub basin: String,
    pub variable: String,
    pub land_use: LandUse,
    pub coverage: f64,
    pub simplicity: Option<f64>,
    pub linearity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub model: String,
    pub curve: RobustnessCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub basin: String,
    pub variable: String,
    pub mean_kge: f64,
    pub sd_kge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub model: String,
    pub method: UncertaintyMethod,
    pub level: f64,
    pub runs: usize,
    pub scope: Option<TtaScope>,
    pub median_sd: Option<f64>,
    pub rows: Vec<UncertaintyRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub variable: String,
    pub group: String,
    /// Absent when no basin passed the filters.
    pub raw: Option<f64>,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub model: String,
    pub method: AttributionMethod,
    pub ig_baseline: Option<IgBaselineKind>,
    pub ig_steps: Option<usize>,
    /// Largest completeness residual over the explained samples.
    pub ig_max_gap: Option<f64>,
    pub rows: Vec<AttributionRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub test: String,
    pub scope: String,
    pub a: String,
    pub b: String,
    pub n: usize,
    pub statistic: Option<f64>,
    pub effect: Option<f64>,
    pub p_value: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub stars: Option<String>,
    /// Why the test could not be computed.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub job: String,
    pub detail: String,
    /// Stages that did not run because of the failure.
    pub not_run: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metadata: RunMetadata,
    pub config: ExperimentConfig,
    pub baseline: Vec<BaselineRecord>,
    pub pairs: Vec<PairContext>,
    pub robustness: Vec<RobustnessRecord>,
    pub uncertainty: Vec<UncertaintyRecord>,
    pub attribution: Vec<AttributionRecord>,
    pub statistics: Vec<StatRecord>,
    pub failure: Option<Failure>,
}

impl EvaluationReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        EvaluationReport {
            metadata: RunMetadata {
                config_hash: config.hash(),
                seed: config.seed,
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                report_version: REPORT_VERSION,
            },
            config: config.experiment(),
            baseline: Vec::new(),
            pairs: Vec::new(),
            robustness: Vec::new(),
            uncertainty: Vec::new(),
            attribution: Vec::new(),
            statistics: Vec::new(),
            failure: None,
        }
    }

    /// Canonical JSON body.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn clean_records<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a BaselineRecord> + 'a {
        self.baseline.iter().filter(move |r| r.model == model && r.condition == CLEAN)
    }

    pub fn curve(&self, model: &str, kind: CorruptionKind, side: Side) -> Option<&RobustnessCurve> {
        self.robustness
            .iter()
            .find(|r| r.model == model && r.curve.kind == kind && r.curve.side == side)
            .map(|r| &r.curve)
    }
}
