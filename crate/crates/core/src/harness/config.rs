use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corrupt::{
    CorruptionKind, CorruptionSpec, Side, DEFAULT_NOISE_SIGMA, DEFAULT_PGD_EPSILON, DEFAULT_PGD_ITERS, DEFAULT_PGD_STEP,
};
use crate::dataio::{AttrGroup, BasinDataset, IngestOptions, SplitPlan, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::MIN_BASE_KGE;
use crate::models::{Family, ModelSpec, TrainConfig};
use crate::trust::{AttributionMethod, TtaScope, DEFAULT_IG_STEPS, DEFAULT_RUNS};

/// Version of the configuration grammar; part of the config hash.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown output format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSource {
    pub path: PathBuf,
    #[serde(default)]
    pub relaxed_land_use: bool,
    #[serde(default)]
    pub min_observations: Option<usize>,
}

impl IngestSource {
    pub fn options(&self) -> IngestOptions {
        IngestOptions {
            relaxed_land_use: self.relaxed_land_use,
            min_observations: self.min_observations,
        }
    }
}

/// Exactly one of the two sources must be given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestSource>,
}

/// A named model. Unset fields take the desk-scale defaults of the family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ff_dim: Option<usize>,
}

impl ModelEntry {
    pub fn new(name: &str, family: Family) -> Self {
        ModelEntry {
            name: name.to_string(),
            family,
            seq_len: None,
            decoder_window: None,
            hidden: None,
            layers: None,
            dropout: None,
            heads: None,
            ff_dim: None,
        }
    }

    pub fn resolve(&self, n_dynamic: usize, n_static: usize, n_targets: usize) -> ModelSpec {
        let mut s = ModelSpec::desk(self.family, n_dynamic, n_static, n_targets);
        s.seq_len = self.seq_len.unwrap_or(s.seq_len);
        s.decoder_window = self.decoder_window.unwrap_or(s.decoder_window);
        s.hidden = self.hidden.unwrap_or(s.hidden);
        s.layers = self.layers.unwrap_or(s.layers);
        s.dropout = self.dropout.unwrap_or(s.dropout);
        s.heads = self.heads.unwrap_or(s.heads);
        s.ff_dim = self.ff_dim.unwrap_or(s.ff_dim);
        s
    }

    pub fn resolve_for(&self, ds: &BasinDataset) -> ModelSpec {
        self.resolve(ds.n_dynamic(), ds.static_names.len(), ds.n_targets())
    }
}

/// A corruption sweep named `<kind>_<side>`, e.g. `outlier_targets`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    pub sweeps: Vec<String>,
    /// Replaces the preset levels of every sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    #[serde(default = "default_min_base")]
    pub min_base_kge: f64,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_epsilon")]
    pub pgd_epsilon: f64,
    #[serde(default = "default_step")]
    pub pgd_step: f64,
    #[serde(default = "default_iters")]
    pub pgd_iters: usize,
    /// Restricts the sweep to these models; all models when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<String>>,
}

fn default_min_base() -> f64 {
    MIN_BASE_KGE
}
fn default_sigma() -> f64 {
    DEFAULT_NOISE_SIGMA
}
fn default_epsilon() -> f64 {
    DEFAULT_PGD_EPSILON
}
fn default_step() -> f64 {
    DEFAULT_PGD_STEP
}
fn default_iters() -> usize {
    DEFAULT_PGD_ITERS
}
fn default_runs() -> usize {
    DEFAULT_RUNS
}
fn default_ig_steps() -> usize {
    DEFAULT_IG_STEPS
}
fn default_ig_samples() -> usize {
    16
}
fn default_groups() -> Vec<AttrGroup> {
    AttrGroup::ALL.to_vec()
}
fn default_stride() -> usize {
    1
}
fn default_jobs() -> usize {
    1
}
fn default_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv]
}
fn yes() -> bool {
    true
}

pub fn parse_sweep(name: &str) -> Result<(CorruptionKind, Side)> {
    Ok(match name {
        "outlier_features" => (CorruptionKind::Outlier, Side::Features),
        "outlier_targets" => (CorruptionKind::Outlier, Side::Targets),
        "noise_features" => (CorruptionKind::Noise, Side::Features),
        "noise_targets" => (CorruptionKind::Noise, Side::Targets),
        "adversarial_features" => (CorruptionKind::Adversarial, Side::Features),
        other => return Err(Error::Config(format!("unknown corruption preset `{other}`"))),
    })
}

impl RobustnessConfig {
    /// Every spec of one sweep, seeded with `seed`.
    pub fn specs(&self, sweep: &str, seed: u64) -> Result<Vec<CorruptionSpec>> {
        let (kind, side) = parse_sweep(sweep)?;
        let levels = match &self.levels {
            Some(l) => l.clone(),
            None => CorruptionSpec::preset_levels(kind).to_vec(),
        };
        levels
            .into_iter()
            .map(|fraction| {
                let spec = CorruptionSpec {
                    sigma: self.noise_sigma,
                    epsilon: self.pgd_epsilon,
                    step: self.pgd_step,
                    iters: self.pgd_iters,
                    ..CorruptionSpec::new(kind, side, fraction, seed)
                };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaConfig {
    pub sigmas: Vec<f64>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_scope")]
    pub scope: TtaScope,
}

fn default_scope() -> TtaScope {
    TtaScope::RunoffOnly
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McDropoutConfig {
    pub rates: Vec<f64>,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tta: Option<TtaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_dropout: Option<McDropoutConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgBaselineKind {
    /// Fill value for dynamic inputs, zero for statics and coordinates.
    FillDynamic,
    /// Zero everywhere.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionConfig {
    pub methods: Vec<AttributionMethod>,
    #[serde(default = "default_groups")]
    pub groups: Vec<AttrGroup>,
    /// Epochs of every subset retrain; the baseline budget when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    /// Test samples per model explained by IG, evenly spaced.
    #[serde(default = "default_ig_samples")]
    pub ig_samples: usize,
    #[serde(default = "default_ig_baseline")]
    pub ig_baseline: IgBaselineKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<String>>,
}

fn default_ig_baseline() -> IgBaselineKind {
    IgBaselineKind::FillDynamic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    pub dataset: DatasetConfig,
    pub split: SplitPlan,
    pub train: TrainConfig,
    /// Every `stride`-th observed training day becomes a sample.
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub models: Vec<ModelEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<RobustnessConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<UncertaintyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution: Option<AttributionConfig>,
    #[serde(default = "yes")]
    pub statistics: bool,
}

pub const DEFAULT_OUT_DIR: &str = "wqtrust-out";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// The config without execution settings (output directory, thread
    /// count, formats), which never change results.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            out: None,
            jobs: default_jobs(),
            formats: default_formats(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the grammar version and the canonical JSON form of
    /// [`Self::experiment`].
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(&self.experiment()).expect("config serializes");
        let mut h = Sha256::new();
        h.update(CONFIG_VERSION.to_le_bytes());
        h.update(body);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn model(&self, name: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Models a protocol applies to, in declaration order.
    pub fn selected(&self, names: &Option<Vec<String>>) -> Vec<&ModelEntry> {
        match names {
            None => self.models.iter().collect(),
            Some(n) => self.models.iter().filter(|m| n.contains(&m.name)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (&self.dataset.synth, &self.dataset.ingest) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => return bad("dataset needs exactly one of `synth` or `ingest`".into()),
        }
        if self.jobs == 0 || self.stride == 0 {
            return bad("jobs and stride must be at least 1".into());
        }
        if self.formats.is_empty() {
            return bad("at least one output format is required".into());
        }
        self.train.validate()?;
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            if m.name.is_empty() || m.name.contains(['/', ',']) {
                return bad(format!("invalid model name `{}`", m.name));
            }
            if !names.insert(&m.name) {
                return bad(format!("duplicate model name `{}`", m.name));
            }
            m.resolve(1, 0, 1).validate()?;
        }
        let check_refs = |refs: &Option<Vec<String>>, what: &str| -> Result<()> {
            for n in refs.iter().flatten() {
                if self.model(n).is_none() {
                    return Err(Error::Config(format!("{what} references unknown model `{n}`")));
                }
            }
            Ok(())
        };
        if let Some(r) = &self.robustness {
            check_refs(&r.models, "robustness")?;
            if r.sweeps.is_empty() {
                return bad("robustness needs at least one sweep".into());
            }
            for s in &r.sweeps {
                r.specs(s, 0)?;
            }
            if !r.min_base_kge.is_finite() {
                return bad("min_base_kge must be finite".into());
            }
        }
        if let Some(u) = &self.uncertainty {
            check_refs(&u.models, "uncertainty")?;
            if u.tta.is_none() && u.mc_dropout.is_none() {
                return bad("uncertainty needs `tta` or `mc_dropout`".into());
            }
            if let Some(t) = &u.tta {
                if t.runs < 2 || t.sigmas.is_empty() || t.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                    return bad("tta needs runs >= 2 and non-negative noise levels".into());
                }
            }
            if let Some(d) = &u.mc_dropout {
                if d.runs < 2 || d.rates.is_empty() || d.rates.iter().any(|p| !(0.0..1.0).contains(p)) {
                    return bad("mc_dropout needs runs >= 2 and rates in [0, 1)".into());
                }
                if d.rates.iter().any(|p| *p > 0.0) {
                    for m in self.selected(&u.models) {
                        if m.family != Family::Recurrent {
                            return bad(format!(
                                "model `{}` of the {} family has no inference-time dropout",
                                m.name,
                                m.family.name()
                            ));
                        }
                    }
                }
            }
        }
        if let Some(a) = &self.attribution {
            check_refs(&a.models, "attribution")?;
            let distinct: BTreeSet<_> = a.groups.iter().collect();
            if a.methods.is_empty() || a.groups.is_empty() || distinct.len() != a.groups.len() {
                return bad("attribution needs methods and distinct groups".into());
            }
            if a.ig_steps == 0 || a.ig_samples == 0 || a.epochs == Some(0) {
                return bad("ig_steps, ig_samples and epochs must be at least 1".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
seed = 7

[dataset.synth]
n_basins = 4
start_year = 2000
years = 2
variables = [{ name = "NO3", alpha = 1.0 }, { name = "TP", alpha = 0.5 }, { name = "Temp", beta_sin = 1.0 }]

[split]
kind = "temporal_held_out"
test_years = [2001]

[train]
epochs = 2
batch_size = 64
lr = 0.001

[[models]]
name = "lstm"
family = "recurrent"
hidden = 8
seq_len = 10
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.jobs, 1);
        assert_eq!(c.formats, vec![Format::Json, Format::Csv]);
        assert!(c.statistics);
        let spec = c.models[0].resolve(5, 3, 3);
        assert_eq!((spec.hidden, spec.seq_len, spec.layers), (8, 10, 2));
    }

    #[test]
    fn hash_tracks_every_field() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut d = c.clone();
        assert_eq!(c.hash(), d.hash());
        d.train.lr = 0.002;
        assert_ne!(c.hash(), d.hash());
        let mut e = c.clone();
        e.seed = 8;
        assert_ne!(c.hash(), e.hash());
        let mut f = c.clone();
        f.models[0].dropout = Some(0.1);
        assert_ne!(c.hash(), f.hash());
        let mut g = c.clone();
        g.jobs = 4;
        g.out = Some("elsewhere".into());
        assert_eq!(c.hash(), g.hash());
    }

    #[test]
    fn unresolved_references_are_rejected() {
        let bad_preset = format!("{MINIMAL}\n[robustness]\nsweeps = [\"adversarial_targets\"]\n");
        assert!(matches!(ExperimentConfig::from_toml(&bad_preset), Err(Error::Config(_))));
        let bad_model = format!("{MINIMAL}\n[robustness]\nsweeps = [\"noise_targets\"]\nmodels = [\"gru\"]\n");
        assert!(matches!(ExperimentConfig::from_toml(&bad_model), Err(Error::Config(_))));
        let unknown = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
