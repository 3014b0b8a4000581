use std::collections::BTreeMap;

use ndcore::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{BasinDataset, FeatureGroup, NormStats, FILL_VALUE};
use crate::error::{Error, Result};
use crate::models::{Batch, InputVars, Model, Regressor, Sample};
use crate::pipeline::{evaluate, predict_with, PairScore};

pub const DEFAULT_RUNS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMethod {
    Tta,
    McDropout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaScope {
    RunoffOnly,
    AllDynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSd {
    pub basin: usize,
    pub variable: usize,
    pub mean_kge: f64,
    pub sd_kge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyResult {
    pub method: UncertaintyMethod,
    pub runs: usize,
    /// Noise SD for TTA, dropout rate for MC dropout.
    pub level: f64,
    pub scope: Option<TtaScope>,
    pub pairs: Vec<PairSd>,
}

impl UncertaintyResult {
    pub fn median_sd(&self) -> Option<f64> {
        crate::metrics::median(&self.pairs.iter().map(|p| p.sd_kge).collect::<Vec<_>>())
    }
}

/// Sample standard deviation; exactly zero when every value is identical.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 || values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Dynamic columns perturbed under each scope. Time features are never
/// perturbed.
pub fn tta_columns(ds: &BasinDataset, scope: TtaScope) -> Vec<usize> {
    match scope {
        TtaScope::RunoffOnly => ds.columns_of(FeatureGroup::Q),
        TtaScope::AllDynamic => (0..ds.n_dynamic()).filter(|&j| ds.features[j].group != FeatureGroup::Time).collect(),
    }
}

/// Deterministic forward pass of any regressor.
pub fn regressor_predict(model: &dyn Regressor, batch: &Batch) -> Result<Tensor> {
    let tape = Tape::new();
    let x = InputVars::constants(&tape, batch);
    Ok((*model.forward_inputs(&tape, &x)?.value()).clone())
}

fn check_runs(n_runs: usize) -> Result<()> {
    if n_runs < 2 {
        return Err(Error::Config(format!("uncertainty needs at least 2 runs, got {n_runs}")));
    }
    Ok(())
}

fn summarize(
    method: UncertaintyMethod,
    level: f64,
    scope: Option<TtaScope>,
    runs: &[Vec<PairScore>],
) -> UncertaintyResult {
    let mut by_pair: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for run in runs {
        for s in run {
            by_pair.entry((s.basin, s.variable)).or_default().push(s.kge.kge);
        }
    }
    let pairs = by_pair
        .into_iter()
        .filter(|(_, k)| k.len() == runs.len())
        .map(|((basin, variable), k)| PairSd {
            basin,
            variable,
            mean_kge: k.iter().sum::<f64>() / k.len() as f64,
            sd_kge: sample_sd(&k),
        })
        .collect();
    UncertaintyResult {
        method,
        runs: runs.len(),
        level,
        scope,
        pairs,
    }
}

/// Test-time augmentation: Gaussian noise of SD `sigma` (normalized space)
/// on the chosen dynamic columns of every window, skipping fill positions.
#[allow(clippy::too_many_arguments)]
pub fn tta_uncertainty(
    model: &dyn Regressor,
    ds: &BasinDataset,
    norm: &NormStats,
    samples: &[Sample],
    columns: &[usize],
    sigma: f64,
    n_runs: usize,
    seed: u64,
    scope: Option<TtaScope>,
) -> Result<UncertaintyResult> {
    check_runs(n_runs)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("TTA noise SD must be non-negative, got {sigma}")));
    }
    let f = ds.n_dynamic();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let noisy: Vec<Sample> = samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for row in s.window.chunks_mut(f) {
                    for &j in columns {
                        let z = normal.sample(&mut rng);
                        if row[j] != FILL_VALUE {
                            row[j] += sigma * z;
                        }
                    }
                }
                s
            })
            .collect();
        let preds = predict_with(&noisy, model.seq_len(), |b| regressor_predict(model, b))?;
        runs.push(evaluate(ds, norm, samples, &preds)?);
    }
    Ok(summarize(UncertaintyMethod::Tta, sigma, scope, &runs))
}

/// Monte Carlo dropout with independent masks per run.
pub fn mc_dropout_uncertainty(
    model: &Model,
    ds: &BasinDataset,
    samples: &[Sample],
    p: f64,
    n_runs: usize,
    seed: u64,
) -> Result<UncertaintyResult> {
    check_runs(n_runs)?;
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    if p > 0.0 && !model.supports_dropout() {
        return Err(Error::Contract(format!(
            "the {} family has no inference-time dropout",
            model.spec.family.name()
        )));
    }
    let norm = model
        .norm_stats
        .as_ref()
        .ok_or_else(|| Error::Contract("model carries no normalization statistics".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let preds = predict_with(samples, model.spec.seq_len, |b| model.predict_with_dropout(b, p, &mut rng))?;
        runs.push(evaluate(ds, norm, samples, &preds)?);
    }
    Ok(summarize(UncertaintyMethod::McDropout, p, None, &runs))
}
