//! Glue between datasets and models: sample windows, group masking,
//! training under train-only normalization, and per-pair evaluation in
//! original units.

use serde::{Deserialize, Serialize};

use crate::dataio::{fit_normalizer, AttrGroup, BasinDataset, NormStats, NormalizedData, RowSet, FILL_VALUE};
use crate::error::{Error, Result};
use crate::metrics::{kge, pbias, KgeBreakdown};
use crate::models::{build, train, Batch, Model, ModelSpec, Sample, TrainConfig};

/// Fewest paired observations for a (basin, variable) score.
pub const MIN_EVAL_OBS: usize = 10;

/// Rows per inference batch.
pub const PREDICT_BATCH: usize = 256;

/// Replaces every input column of the removed groups with the fill value.
/// Time features and coordinates are never touched.
pub fn mask_groups(ds: &BasinDataset, data: &mut NormalizedData, removed: &[AttrGroup]) {
    if removed.is_empty() {
        return;
    }
    let f = ds.n_dynamic();
    let cols: Vec<usize> = (0..f)
        .filter(|&j| AttrGroup::of_feature(ds.features[j].group).is_some_and(|g| removed.contains(&g)))
        .collect();
    for dynamics in &mut data.dynamics {
        for row in dynamics.chunks_mut(f) {
            for &j in &cols {
                row[j] = FILL_VALUE;
            }
        }
    }
    if removed.contains(&AttrGroup::BA) {
        for s in &mut data.statics {
            s.iter_mut().for_each(|v| *v = FILL_VALUE);
        }
    }
}

/// Normalizes `ds` with `norm` and masks the removed groups.
pub fn prepare(ds: &BasinDataset, norm: &NormStats, removed: &[AttrGroup]) -> NormalizedData {
    let mut data = norm.apply(ds);
    mask_groups(ds, &mut data, removed);
    data
}

/// Windows ending on every `stride`-th day of `rows` that has at least one
/// observed target. History before the first calendar day is padded with
/// the fill value.
pub fn samples(ds: &BasinDataset, data: &NormalizedData, rows: &RowSet, seq_len: usize, stride: usize) -> Vec<Sample> {
    let f = ds.n_dynamic();
    let v = ds.n_targets();
    let stride = stride.max(1);
    let mut out = Vec::new();
    for &b in &rows.basins {
        let dyn_b = &data.dynamics[b];
        let targ_b = &data.targets[b];
        let observed = rows.days().filter(|&t| targ_b[t * v..(t + 1) * v].iter().any(|y| y.is_finite()));
        for t in observed.step_by(stride) {
            let mut window = Vec::with_capacity(seq_len * f);
            for k in 0..seq_len {
                match (t + k + 1).checked_sub(seq_len) {
                    Some(s) => window.extend_from_slice(&dyn_b[s * f..(s + 1) * f]),
                    None => window.extend(std::iter::repeat_n(FILL_VALUE, f)),
                }
            }
            out.push(Sample {
                basin: b,
                day: t,
                window,
                statics: data.statics[b].clone(),
                coords: data.coords[b],
                target: targ_b[t * v..(t + 1) * v].to_vec(),
            });
        }
    }
    out
}

/// Builds from `model_seed`, trains on `train_samples` with `train_seed`
/// and attaches the normalization statistics.
pub fn fit_model(
    spec: &ModelSpec,
    norm: &NormStats,
    train_samples: &[Sample],
    config: &TrainConfig,
    model_seed: u64,
    train_seed: u64,
) -> Result<Model> {
    let mut model = build(spec, model_seed)?;
    train(&mut model, train_samples, config, train_seed)?;
    model.norm_stats = Some(norm.clone());
    Ok(model)
}

/// Everything needed to train one model on the training rows of a dataset.
#[derive(Clone, Debug)]
pub struct TrainJob<'a> {
    pub spec: &'a ModelSpec,
    pub config: &'a TrainConfig,
    pub stride: usize,
    pub model_seed: u64,
    pub train_seed: u64,
}

impl TrainJob<'_> {
    /// Fits normalization on `train` rows of `ds`, then trains.
    pub fn run(&self, ds: &BasinDataset, train_rows: &RowSet, removed: &[AttrGroup]) -> Result<Model> {
        let norm = fit_normalizer(ds, train_rows)?;
        let data = prepare(ds, &norm, removed);
        let s = samples(ds, &data, train_rows, self.spec.seq_len, self.stride);
        fit_model(self.spec, &norm, &s, self.config, self.model_seed, self.train_seed)
    }
}

/// Deterministic predictions, one normalized row per sample.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    predict_with(samples, model.spec.seq_len, |batch| model.predict(batch))
}

/// Runs `f` over consecutive batches and splits the output into rows.
pub fn predict_with(
    samples: &[Sample],
    seq_len: usize,
    mut f: impl FnMut(&Batch) -> Result<ndcore::Tensor>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let y = f(&Batch::new(chunk, seq_len)?)?;
        out.extend(y.data().chunks(y.cols()).map(<[f64]>::to_vec));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub basin: usize,
    pub variable: usize,
    pub n_obs: usize,
    pub kge: KgeBreakdown,
    pub pbias: f64,
}

/// Scores normalized predictions against the raw observations of `ds`.
/// Pairs with fewer than [`MIN_EVAL_OBS`] observations or an undefined
/// KGE are omitted.
pub fn evaluate(ds: &BasinDataset, norm: &NormStats, samples: &[Sample], preds: &[Vec<f64>]) -> Result<Vec<PairScore>> {
    if samples.len() != preds.len() {
        return Err(Error::Contract("one prediction row per sample is required".into()));
    }
    let v = ds.n_targets();
    let nb = ds.basins.len();
    let mut obs = vec![Vec::new(); nb * v];
    let mut pred = vec![Vec::new(); nb * v];
    for (s, p) in samples.iter().zip(preds) {
        let rec = &ds.basins[s.basin];
        for j in 0..v {
            let i = s.day * v + j;
            if rec.mask[i] {
                obs[s.basin * v + j].push(rec.targets[i]);
                pred[s.basin * v + j].push(norm.invert_target(j, p[j]));
            }
        }
    }
    let mut out = Vec::new();
    for b in 0..nb {
        for j in 0..v {
            let (o, p) = (&obs[b * v + j], &pred[b * v + j]);
            if o.len() < MIN_EVAL_OBS {
                continue;
            }
            let (Ok(k), Ok(pb)) = (kge(o, p), pbias(o, p)) else {
                continue;
            };
            if k.kge.is_finite() {
                out.push(PairScore {
                    basin: b,
                    variable: j,
                    n_obs: o.len(),
                    kge: k,
                    pbias: pb,
                });
            }
        }
    }
    Ok(out)
}

/// Test samples for `model`: the clean dataset under the model's own
/// normalization statistics.
pub fn test_samples(model: &Model, ds: &BasinDataset, test_rows: &RowSet, removed: &[AttrGroup]) -> Result<Vec<Sample>> {
    let norm = model
        .norm_stats
        .as_ref()
        .ok_or_else(|| Error::Contract("model carries no normalization statistics".into()))?;
    let data = prepare(ds, norm, removed);
    Ok(samples(ds, &data, test_rows, model.spec.seq_len, 1))
}

/// Trains and scores in one call.
pub fn train_and_score(
    job: &TrainJob<'_>,
    train_ds: &BasinDataset,
    eval_ds: &BasinDataset,
    train_rows: &RowSet,
    test_rows: &RowSet,
    removed: &[AttrGroup],
) -> Result<(Model, Vec<PairScore>)> {
    let model = job.run(train_ds, train_rows, removed)?;
    let scores = score(&model, eval_ds, test_rows, removed)?;
    Ok((model, scores))
}

pub fn score(model: &Model, ds: &BasinDataset, test_rows: &RowSet, removed: &[AttrGroup]) -> Result<Vec<PairScore>> {
    let test = test_samples(model, ds, test_rows, removed)?;
    let preds = predict(model, &test)?;
    evaluate(ds, model.norm_stats.as_ref().expect("checked in test_samples"), &test, &preds)
}
