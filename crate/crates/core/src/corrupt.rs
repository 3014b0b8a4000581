//! Seeded corruption of training data: extreme-value outliers, random
//! measurement noise and PGD adversarial perturbations.

use ndcore::Tape;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{BasinDataset, FeatureGroup, RowSet, FILL_VALUE};
use crate::error::{Error, Result};
use crate::models::{masked_mse, Batch, InputVars, Regressor, Sample};
use crate::pipeline::PREDICT_BATCH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Outlier,
    Noise,
    Adversarial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Features,
    Targets,
}

pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const DEFAULT_PGD_EPSILON: f64 = 0.1;
pub const DEFAULT_PGD_STEP: f64 = 0.025;
pub const DEFAULT_PGD_ITERS: usize = 10;

/// Width of the outlier fence in interquartile ranges.
pub const IQR_FENCE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub side: Side,
    pub fraction: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub seed: u64,
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

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, side: Side, fraction: f64, seed: u64) -> Self {
        CorruptionSpec {
            kind,
            side,
            fraction,
            sigma: DEFAULT_NOISE_SIGMA,
            epsilon: DEFAULT_PGD_EPSILON,
            step: DEFAULT_PGD_STEP,
            iters: DEFAULT_PGD_ITERS,
            seed,
        }
    }

    /// Levels used for replication: 10/20/30% outliers and adversarial
    /// perturbations, 30/40/50% noise.
    pub fn preset_levels(kind: CorruptionKind) -> [f64; 3] {
        match kind {
            CorruptionKind::Outlier | CorruptionKind::Adversarial => [0.1, 0.2, 0.3],
            CorruptionKind::Noise => [0.3, 0.4, 0.5],
        }
    }

    /// Every (kind, side, level) combination of the replication presets.
    pub fn presets(seed: u64) -> Vec<CorruptionSpec> {
        let mut out = Vec::new();
        for kind in [CorruptionKind::Outlier, CorruptionKind::Noise, CorruptionKind::Adversarial] {
            let sides: &[Side] = if kind == CorruptionKind::Adversarial {
                &[Side::Features]
            } else {
                &[Side::Features, Side::Targets]
            };
            for &side in sides {
                for level in Self::preset_levels(kind) {
                    out.push(CorruptionSpec::new(kind, side, level, seed));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::Config(format!("corruption fraction {} outside (0, 1)", self.fraction)));
        }
        if self.kind == CorruptionKind::Adversarial && self.side != Side::Features {
            return Err(Error::Config("adversarial corruption applies to features only".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {}", self.sigma)));
        }
        if !(self.epsilon >= 0.0 && self.step >= 0.0) {
            return Err(Error::Config("PGD budget and step must be non-negative".into()));
        }
        Ok(())
    }

    /// `round(fraction · n)`, at least one.
    pub fn count(&self, n: usize) -> Result<usize> {
        let k = (self.fraction * n as f64).round() as usize;
        if k < 1 {
            return Err(Error::Corruption(format!(
                "fraction {} of {n} rows selects nothing",
                self.fraction
            )));
        }
        Ok(k)
    }

    pub fn label(&self) -> String {
        let kind = match self.kind {
            CorruptionKind::Outlier => "outlier",
            CorruptionKind::Noise => "noise",
            CorruptionKind::Adversarial => "adversarial",
        };
        let side = match self.side {
            Side::Features => "features",
            Side::Targets => "targets",
        };
        format!("{kind}_{side}_{:.2}", self.fraction)
    }
}

/// Row-major values with NaN for missing entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    pub n_cols: usize,
    pub values: Vec<f64>,
}

impl DataMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.len().checked_div(self.n_cols).unwrap_or(0)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.n_cols..(r + 1) * self.n_cols]
    }

    fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.n_cols).copied().filter(|v| v.is_finite()).collect()
    }
}

/// Audit record of one corruption, serializable to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionManifest {
    pub spec: CorruptionSpec,
    /// Size of the candidate population.
    pub population: usize,
    /// Selected candidate indices, ascending.
    pub selected: Vec<usize>,
    /// Outliers only: per selected row, whether each column went to the
    /// upper fence.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub upper: Vec<Vec<bool>>,
}

impl CorruptionManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Lower and upper outlier values `Q1 − 3·IQR` and `Q3 + 3·IQR`.
pub fn fences(values: &[f64]) -> Option<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75));
    let iqr = q3 - q1;
    Some((q1 - IQR_FENCE * iqr, q3 + IQR_FENCE * iqr))
}

fn select(spec: &CorruptionSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let k = spec.count(n)?;
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Replaces every observed value of the selected candidate rows by a
/// column fence, upper or lower by a fair coin per value. Fences come from
/// the uncorrupted data.
pub fn inject_outliers(data: &mut DataMatrix, candidates: &[usize], spec: &CorruptionSpec) -> Result<CorruptionManifest> {
    spec.validate()?;
    let col_fences: Vec<Option<(f64, f64)>> = (0..data.n_cols).map(|c| fences(&data.column(c))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let selected = select(spec, candidates.len(), &mut rng)?;
    let mut upper = Vec::with_capacity(selected.len());
    for &i in &selected {
        let r = candidates[i];
        let mut sides = Vec::with_capacity(data.n_cols);
        for (c, fence) in col_fences.iter().enumerate() {
            let up = rng.random::<bool>();
            sides.push(up);
            let cell = &mut data.values[r * data.n_cols + c];
            if let (true, Some((lo, hi))) = (cell.is_finite(), fence) {
                *cell = if up { *hi } else { *lo };
            }
        }
        upper.push(sides);
    }
    Ok(CorruptionManifest {
        spec: spec.clone(),
        population: candidates.len(),
        selected,
        upper,
    })
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Additive noise scaled by the column standard deviation (features) or
/// proportional noise (targets) on the selected candidate rows.
pub fn inject_noise(data: &mut DataMatrix, candidates: &[usize], spec: &CorruptionSpec) -> Result<CorruptionManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let selected = select(spec, candidates.len(), &mut rng)?;
    let scales: Vec<f64> = match spec.side {
        Side::Features => (0..data.n_cols).map(|c| spec.sigma * sample_std(&data.column(c))).collect(),
        Side::Targets => vec![spec.sigma; data.n_cols],
    };
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for &i in &selected {
        let r = candidates[i];
        for (c, scale) in scales.iter().enumerate() {
            let eta = scale * std_normal.sample(&mut rng);
            let cell = &mut data.values[r * data.n_cols + c];
            if cell.is_finite() {
                *cell = match spec.side {
                    Side::Features => *cell + eta,
                    Side::Targets => *cell * (1.0 + eta),
                };
            }
        }
    }
    Ok(CorruptionManifest {
        spec: spec.clone(),
        population: candidates.len(),
        selected,
        upper: Vec::new(),
    })
}

/// Identity of a candidate row in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowId {
    pub basin: usize,
    pub day: usize,
}

/// Applies an outlier or noise corruption to the training rows of `ds`.
/// Feature corruption touches every non-time dynamic column; target
/// corruption only observed entries, so masks never change.
pub fn corrupt_dataset(
    ds: &BasinDataset,
    train: &RowSet,
    spec: &CorruptionSpec,
) -> Result<(BasinDataset, CorruptionManifest, Vec<RowId>)> {
    spec.validate()?;
    let f = ds.n_dynamic();
    let v = ds.n_targets();
    let cols: Vec<usize> = match spec.side {
        Side::Features => (0..f).filter(|&j| ds.features[j].group != FeatureGroup::Time).collect(),
        Side::Targets => (0..v).collect(),
    };
    let mut rows = Vec::new();
    for &b in &train.basins {
        for t in train.days() {
            rows.push(RowId { basin: b, day: t });
        }
    }
    let width = if spec.side == Side::Features { f } else { v };
    let mut m = DataMatrix {
        n_cols: cols.len(),
        values: Vec::with_capacity(rows.len() * cols.len()),
    };
    for r in &rows {
        let rec = &ds.basins[r.basin];
        let src = match spec.side {
            Side::Features => &rec.dynamics,
            Side::Targets => &rec.targets,
        };
        for &j in &cols {
            let i = r.day * width + j;
            let observed = spec.side == Side::Features || rec.mask[i];
            m.values.push(if observed { src[i] } else { f64::NAN });
        }
    }
    let candidates: Vec<usize> = match spec.side {
        Side::Features => (0..rows.len()).collect(),
        Side::Targets => (0..rows.len()).filter(|&r| m.row(r).iter().any(|x| x.is_finite())).collect(),
    };
    let manifest = match spec.kind {
        CorruptionKind::Outlier => inject_outliers(&mut m, &candidates, spec)?,
        CorruptionKind::Noise => inject_noise(&mut m, &candidates, spec)?,
        CorruptionKind::Adversarial => {
            return Err(Error::Config("adversarial corruption needs a model; use pgd_attack".into()))
        }
    };
    let mut out = ds.clone();
    let mut touched = Vec::with_capacity(manifest.selected.len());
    for &i in &manifest.selected {
        let r = rows[candidates[i]];
        touched.push(r);
        let rec = &mut out.basins[r.basin];
        let dst = match spec.side {
            Side::Features => &mut rec.dynamics,
            Side::Targets => &mut rec.targets,
        };
        for (k, &j) in cols.iter().enumerate() {
            let x = m.values[candidates[i] * m.n_cols + k];
            if x.is_finite() {
                dst[r.day * width + j] = x;
            }
        }
    }
    Ok((out, manifest, touched))
}

#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub samples: Vec<Sample>,
    pub manifest: CorruptionManifest,
    /// Masked MSE on the attacked subset before the attack and after each
    /// iteration.
    pub losses: Vec<f64>,
    /// Final window and static perturbations, one per selected sample.
    pub delta_window: Vec<Vec<f64>>,
    pub delta_statics: Vec<Vec<f64>>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of squared errors over observed targets, the observed count, and
/// optionally the input gradients of that sum.
fn sse_and_grad(model: &dyn Regressor, batch: &Batch, want_grad: bool) -> Result<(f64, usize, Option<(Vec<f64>, Vec<f64>)>)> {
    let tape = Tape::new();
    let x = if want_grad {
        InputVars::leaves(&tape, batch)
    } else {
        InputVars::constants(&tape, batch)
    };
    let pred = model.forward_inputs(&tape, &x)?;
    let Some((mse, count)) = masked_mse(&tape, pred, &batch.targets)? else {
        return Ok((0.0, 0, None));
    };
    let sse = mse.value().item()? * count as f64;
    if !want_grad {
        return Ok((sse, count, None));
    }
    tape.backward(mse)?;
    let gd = tape
        .grad(x.dynamic)
        .ok_or_else(|| Error::Contract("model output does not depend on the dynamic inputs".into()))?;
    let gs = tape.grad(x.statics).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; batch.statics.numel()]);
    Ok((sse, count, Some((gd.into_data(), gs))))
}

fn attacked_loss(model: &dyn Regressor, samples: &[Sample]) -> Result<f64> {
    let (mut sse, mut n) = (0.0, 0);
    for chunk in samples.chunks(PREDICT_BATCH) {
        let (s, c, _) = sse_and_grad(model, &Batch::new(chunk, model.seq_len())?, false)?;
        sse += s;
        n += c;
    }
    Ok(if n == 0 { 0.0 } else { sse / n as f64 })
}

/// L∞ projected sign-gradient ascent on the masked MSE of a seeded subset
/// of samples. Dynamic windows and statics are perturbed; positions
/// holding the fill value are left alone.
pub fn pgd_attack(model: &dyn Regressor, samples: &[Sample], spec: &CorruptionSpec) -> Result<PgdOutcome> {
    spec.validate()?;
    if spec.kind != CorruptionKind::Adversarial {
        return Err(Error::Config("pgd_attack needs an adversarial spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let selected = select(spec, samples.len(), &mut rng)?;
    let clean: Vec<Sample> = selected.iter().map(|&i| samples[i].clone()).collect();
    let mut delta_d: Vec<Vec<f64>> = clean.iter().map(|s| vec![0.0; s.window.len()]).collect();
    let mut delta_s: Vec<Vec<f64>> = clean.iter().map(|s| vec![0.0; s.statics.len()]).collect();
    let perturbed = |dd: &[Vec<f64>], ds: &[Vec<f64>]| -> Vec<Sample> {
        clean
            .iter()
            .zip(dd.iter().zip(ds))
            .map(|(s, (d, e))| Sample {
                window: s.window.iter().zip(d).map(|(x, d)| x + d).collect(),
                statics: s.statics.iter().zip(e).map(|(x, d)| x + d).collect(),
                ..s.clone()
            })
            .collect()
    };
    let mut losses = vec![attacked_loss(model, &clean)?];
    let seq_len = model.seq_len();
    for _ in 0..spec.iters {
        let current = perturbed(&delta_d, &delta_s);
        for (c, chunk) in current.chunks(PREDICT_BATCH).enumerate() {
            let (_, _, grads) = sse_and_grad(model, &Batch::new(chunk, seq_len)?, true)?;
            let Some((gd, gs)) = grads else { continue };
            let (wd, ws) = (chunk[0].window.len(), chunk[0].statics.len());
            for k in 0..chunk.len() {
                let i = c * PREDICT_BATCH + k;
                let orig = &clean[i];
                for (p, d) in delta_d[i].iter_mut().enumerate() {
                    if orig.window[p] != FILL_VALUE {
                        *d = (*d + spec.step * sign(gd[k * wd + p])).clamp(-spec.epsilon, spec.epsilon);
                    }
                }
                for (p, d) in delta_s[i].iter_mut().enumerate() {
                    if orig.statics[p] != FILL_VALUE {
                        *d = (*d + spec.step * sign(gs[k * ws + p])).clamp(-spec.epsilon, spec.epsilon);
                    }
                }
            }
        }
        losses.push(attacked_loss(model, &perturbed(&delta_d, &delta_s))?);
    }
    let attacked = perturbed(&delta_d, &delta_s);
    let mut out = samples.to_vec();
    for (&i, s) in selected.iter().zip(attacked) {
        out[i] = s;
    }
    Ok(PgdOutcome {
        samples: out,
        manifest: CorruptionManifest {
            spec: spec.clone(),
            population: samples.len(),
            selected,
            upper: Vec::new(),
        },
        losses,
        delta_window: delta_d,
        delta_statics: delta_s,
    })
}
