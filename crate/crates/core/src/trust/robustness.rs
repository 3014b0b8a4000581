use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corrupt::{corrupt_dataset, pgd_attack, CorruptionKind, CorruptionSpec, Side};
use crate::dataio::{BasinDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{median, percent_change, theil_sen, MIN_BASE_KGE};
use crate::models::Model;
use crate::pipeline::{fit_model, prepare, samples, score, PairScore, TrainJob};

/// Corruption fraction that one unit of the degradation slope refers to.
pub const DEGRADATION_UNIT: f64 = 0.1;

/// Percent KGE change of every (basin, variable) pair present in both
/// score sets whose baseline KGE reaches `min_base`.
pub fn percent_changes(base: &[PairScore], new: &[PairScore], min_base: f64) -> Vec<f64> {
    let new: BTreeMap<(usize, usize), f64> = new.iter().map(|s| ((s.basin, s.variable), s.kge.kge)).collect();
    base.iter()
        .filter_map(|b| {
            let n = new.get(&(b.basin, b.variable))?;
            percent_change(b.kge.kge, *n, min_base)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub kind: CorruptionKind,
    pub side: Side,
    /// Corruption fractions, starting with 0.
    pub levels: Vec<f64>,
    pub median_pct_change: Vec<f64>,
    pub n_pairs: Vec<usize>,
    /// Theil-Sen slope in percent per 0.1 corruption.
    pub beta: f64,
}

/// Median percent change per level, anchored at (0, 0), with the
/// Theil-Sen degradation slope.
pub fn robustness_curve(
    kind: CorruptionKind,
    side: Side,
    levels: &[f64],
    changes: &[Vec<f64>],
) -> Result<RobustnessCurve> {
    if levels.len() != changes.len() {
        return Err(Error::Contract("one change set per level is required".into()));
    }
    let mut out = RobustnessCurve {
        kind,
        side,
        levels: vec![0.0],
        median_pct_change: vec![0.0],
        n_pairs: vec![0],
        beta: 0.0,
    };
    for (&level, c) in levels.iter().zip(changes) {
        let m = median(c).ok_or_else(|| {
            Error::Sweep(format!(
                "no (basin, variable) pair passes the KGE ≥ {MIN_BASE_KGE} filter at level {level}"
            ))
        })?;
        out.levels.push(level);
        out.median_pct_change.push(m);
        out.n_pairs.push(c.len());
    }
    let x: Vec<f64> = out.levels.iter().map(|l| l / DEGRADATION_UNIT).collect();
    out.beta = theil_sen(&x, &out.median_pct_change)?;
    Ok(out)
}

/// What a corrupted retrain needs besides the corruption itself.
#[derive(Clone, Debug)]
pub struct SweepContext<'a> {
    pub dataset: &'a BasinDataset,
    pub split: &'a Split,
    pub job: TrainJob<'a>,
    /// Clean model; source of the PGD gradients and of the normalization
    /// used for adversarial retraining.
    pub baseline: &'a Model,
}

/// Retrains on corrupted training data and scores on the clean test rows.
pub fn corrupted_scores(ctx: &SweepContext<'_>, spec: &CorruptionSpec) -> Result<Vec<PairScore>> {
    let model = match spec.kind {
        CorruptionKind::Outlier | CorruptionKind::Noise => {
            let (corrupted, _, _) = corrupt_dataset(ctx.dataset, &ctx.split.train, spec)?;
            ctx.job.run(&corrupted, &ctx.split.train, &[])?
        }
        CorruptionKind::Adversarial => {
            let norm = ctx
                .baseline
                .norm_stats
                .as_ref()
                .ok_or_else(|| Error::Contract("baseline carries no normalization statistics".into()))?;
            let data = prepare(ctx.dataset, norm, &[]);
            let clean = samples(ctx.dataset, &data, &ctx.split.train, ctx.job.spec.seq_len, ctx.job.stride);
            let attacked = pgd_attack(ctx.baseline, &clean, spec)?;
            fit_model(
                ctx.job.spec,
                norm,
                &attacked.samples,
                ctx.job.config,
                ctx.job.model_seed,
                ctx.job.train_seed,
            )?
        }
    };
    score(&model, ctx.dataset, &ctx.split.test, &[])
}
