use std::collections::BTreeMap;

use ndcore::{Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::dataio::{AttrGroup, BasinDataset, Split, FILL_VALUE};
use crate::error::{Error, Result};
use crate::metrics::{median, percent_change, MIN_BASE_KGE};
use crate::models::{Batch, InputVars, Regressor, Sample};
use crate::pipeline::{train_and_score, PairScore, TrainJob, PREDICT_BATCH};

pub const DEFAULT_IG_STEPS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Ablation,
    Traverse,
    Ig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub variable: usize,
    pub group: AttrGroup,
    pub raw: f64,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: AttributionMethod,
    pub groups: Vec<AttrGroup>,
    pub scores: Vec<GroupScore>,
}

impl AttributionResult {
    pub fn raw(&self, variable: usize, group: AttrGroup) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| s.variable == variable && s.group == group)
            .map(|s| s.raw)
    }

    fn from_raw(method: AttributionMethod, groups: &[AttrGroup], raw: &[Vec<f64>]) -> Self {
        let mut scores = Vec::new();
        for (variable, r) in raw.iter().enumerate() {
            for ((&group, &raw), share) in groups.iter().zip(r).zip(normalize_shares(r)) {
                scores.push(GroupScore {
                    variable,
                    group,
                    raw,
                    share,
                });
            }
        }
        AttributionResult {
            method,
            groups: groups.to_vec(),
            scores,
        }
    }
}

/// Shares proportional to the positive part of each raw importance. When
/// nothing is positive the share is uniform.
pub fn normalize_shares(raw: &[f64]) -> Vec<f64> {
    let pos: Vec<f64> = raw.iter().map(|r| if r.is_finite() && *r > 0.0 { *r } else { 0.0 }).collect();
    let total: f64 = pos.iter().sum();
    if total > 0.0 {
        pos.iter().map(|p| p / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

fn kge_map(scores: &[PairScore]) -> BTreeMap<(usize, usize), f64> {
    scores.iter().map(|s| ((s.basin, s.variable), s.kge.kge)).collect()
}

/// Per variable, the median over basins of `100·(with − without)/|with|`,
/// over pairs whose `with` KGE passes the baseline filter.
fn median_gain(with: &BTreeMap<(usize, usize), f64>, without: &BTreeMap<(usize, usize), f64>, n_vars: usize) -> Vec<Option<f64>> {
    let mut per_var = vec![Vec::new(); n_vars];
    for (&(b, v), &k_with) in with {
        if let Some(&k_without) = without.get(&(b, v)) {
            if let Some(pc) = percent_change(k_with, k_without, MIN_BASE_KGE) {
                per_var[v].push(-pc);
            }
        }
    }
    per_var.iter().map(|c| median(c)).collect()
}

/// Importance of each group as the median percent KGE decrease of the
/// model trained without it.
pub fn ablation_from_scores(
    groups: &[AttrGroup],
    full: &[PairScore],
    without: &[Vec<PairScore>],
    n_vars: usize,
) -> Result<AttributionResult> {
    if without.len() != groups.len() {
        return Err(Error::Contract("one ablated run per group is required".into()));
    }
    let full = kge_map(full);
    let mut raw = vec![vec![f64::NAN; groups.len()]; n_vars];
    for (gi, w) in without.iter().enumerate() {
        for (v, m) in median_gain(&full, &kge_map(w), n_vars).into_iter().enumerate() {
            raw[v][gi] = m.unwrap_or(f64::NAN);
        }
    }
    Ok(AttributionResult::from_raw(AttributionMethod::Ablation, groups, &raw))
}

/// Bit masks of every subset of `n` groups, ascending.
pub fn subset_masks(n: usize) -> Vec<u32> {
    (0..1u32 << n).collect()
}

fn members(groups: &[AttrGroup], mask: u32) -> Vec<AttrGroup> {
    groups.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, g)| *g).collect()
}

/// Mean over the matched pairs (S ∪ {g}, S) of the median percent KGE
/// gain from adding g.
pub fn traverse_from_scores(
    groups: &[AttrGroup],
    subsets: &BTreeMap<u32, Vec<PairScore>>,
    n_vars: usize,
) -> Result<AttributionResult> {
    let maps: BTreeMap<u32, BTreeMap<(usize, usize), f64>> = subsets.iter().map(|(m, s)| (*m, kge_map(s))).collect();
    let get = |mask: u32| {
        maps.get(&mask).ok_or_else(|| Error::AttributedRun {
            subset: format!("{:?}", members(groups, mask)),
            detail: "subset model missing".into(),
        })
    };
    let mut raw = vec![vec![f64::NAN; groups.len()]; n_vars];
    for gi in 0..groups.len() {
        let bit = 1u32 << gi;
        let mut sums = vec![(0.0, 0usize); n_vars];
        for s in subset_masks(groups.len()).into_iter().filter(|m| m & bit == 0) {
            let gains = median_gain(get(s | bit)?, get(s)?, n_vars);
            for (v, g) in gains.into_iter().enumerate() {
                if let Some(g) = g {
                    sums[v].0 += g;
                    sums[v].1 += 1;
                }
            }
        }
        for v in 0..n_vars {
            if sums[v].1 > 0 {
                raw[v][gi] = sums[v].0 / sums[v].1 as f64;
            }
        }
    }
    Ok(AttributionResult::from_raw(AttributionMethod::Traverse, groups, &raw))
}

/// Groups outside `removed` plus the always-kept covariates.
fn all_but(groups: &[AttrGroup], keep_mask: u32) -> Vec<AttrGroup> {
    groups
        .iter()
        .enumerate()
        .filter(|(i, _)| keep_mask & (1 << i) == 0)
        .map(|(_, g)| *g)
        .collect()
}

fn attributed<T>(groups: &[AttrGroup], mask: u32, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::AttributedRun {
        subset: format!("{:?}", members(groups, mask)),
        detail: e.to_string(),
    })
}

/// Scores of the model trained on the groups in `mask`.
fn subset_scores(job: &TrainJob<'_>, ds: &BasinDataset, split: &Split, groups: &[AttrGroup], mask: u32) -> Result<Vec<PairScore>> {
    let removed = all_but(groups, mask);
    attributed(
        groups,
        mask,
        train_and_score(job, ds, ds, &split.train, &split.test, &removed).map(|(_, s)| s),
    )
}

/// One full run plus one retrain per removed group.
pub fn ablation_importance(job: &TrainJob<'_>, ds: &BasinDataset, split: &Split, groups: &[AttrGroup]) -> Result<AttributionResult> {
    let all = (1u32 << groups.len()) - 1;
    let full = subset_scores(job, ds, split, groups, all)?;
    let without = (0..groups.len())
        .map(|gi| subset_scores(job, ds, split, groups, all & !(1 << gi)))
        .collect::<Result<Vec<_>>>()?;
    ablation_from_scores(groups, &full, &without, ds.n_targets())
}

/// One retrain per subset of `groups`.
pub fn traverse_importance(job: &TrainJob<'_>, ds: &BasinDataset, split: &Split, groups: &[AttrGroup]) -> Result<AttributionResult> {
    let subsets = subset_masks(groups.len())
        .into_iter()
        .map(|m| Ok((m, subset_scores(job, ds, split, groups, m)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    traverse_from_scores(groups, &subsets, ds.n_targets())
}

/// Integrated-gradient attributions of one output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    pub window: Vec<f64>,
    pub statics: Vec<f64>,
    pub coords: [f64; 2],
    pub f_x: f64,
    pub f_baseline: f64,
}

impl IgResult {
    pub fn total(&self) -> f64 {
        self.window.iter().chain(&self.statics).chain(&self.coords).sum()
    }

    /// `|Σ IG − (F(x) − F(x'))|`.
    pub fn completeness_gap(&self) -> f64 {
        (self.total() - (self.f_x - self.f_baseline)).abs()
    }
}

/// Fill value for dynamic inputs, zero for statics and coordinates.
pub fn ig_baseline(sample: &Sample) -> Sample {
    Sample {
        window: vec![FILL_VALUE; sample.window.len()],
        statics: vec![0.0; sample.statics.len()],
        coords: [0.0, 0.0],
        ..sample.clone()
    }
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a + t * (b - a)).collect()
}

fn output_sum(model: &dyn Regressor, batch: &Batch, output: usize, want_grad: bool) -> Result<(Vec<f64>, Option<[Vec<f64>; 3]>)> {
    let tape = Tape::new();
    let x = if want_grad {
        InputVars::leaves(&tape, batch)
    } else {
        InputVars::constants(&tape, batch)
    };
    let pred = model.forward_inputs(&tape, &x)?;
    let values: Vec<f64> = pred.value().data().chunks(model.n_outputs()).map(|r| r[output]).collect();
    if !want_grad {
        return Ok((values, None));
    }
    let mut sel = vec![0.0; pred.value().numel()];
    sel.iter_mut().skip(output).step_by(model.n_outputs()).for_each(|v| *v = 1.0);
    let sel = tape.constant(Tensor::new(pred.shape(), sel)?);
    tape.backward(pred.mul(sel)?.sum())?;
    let grad = |v: ndcore::Var<'_>, n: usize| tape.grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; n]);
    let g = [
        grad(x.dynamic, batch.dynamic.numel()),
        grad(x.statics, batch.statics.numel()),
        grad(x.coords, batch.coords.numel()),
    ];
    Ok((values, Some(g)))
}

/// Midpoint Riemann sum of the path integral from `baseline` to `x` with
/// `n_steps` points.
pub fn integrated_gradients(
    model: &dyn Regressor,
    x: &Sample,
    baseline: &Sample,
    n_steps: usize,
    output: usize,
) -> Result<IgResult> {
    if x.window.len() != baseline.window.len() || x.statics.len() != baseline.statics.len() {
        return Err(TensorError::dim(
            "integrated_gradients",
            &[x.window.len(), x.statics.len()],
            &[baseline.window.len(), baseline.statics.len()],
        )
        .into());
    }
    if n_steps == 0 || output >= model.n_outputs() {
        return Err(Error::Config("IG needs at least one step and a valid output".into()));
    }
    let seq_len = model.seq_len();
    let path: Vec<Sample> = (0..n_steps)
        .map(|k| {
            let t = (k as f64 + 0.5) / n_steps as f64;
            let c = lerp(&baseline.coords, &x.coords, t);
            Sample {
                window: lerp(&baseline.window, &x.window, t),
                statics: lerp(&baseline.statics, &x.statics, t),
                coords: [c[0], c[1]],
                ..x.clone()
            }
        })
        .collect();
    let (wd, ws) = (x.window.len(), x.statics.len());
    let mut acc = [vec![0.0; wd], vec![0.0; ws], vec![0.0; 2]];
    for chunk in path.chunks(PREDICT_BATCH) {
        let (_, g) = output_sum(model, &Batch::new(chunk, seq_len)?, output, true)?;
        let g = g.expect("gradients requested");
        for (a, (gv, width)) in acc.iter_mut().zip(g.iter().zip([wd, ws, 2])) {
            for row in gv.chunks(width) {
                a.iter_mut().zip(row).for_each(|(a, r)| *a += r);
            }
        }
    }
    let ends = Batch::new([x, baseline], seq_len)?;
    let (f, _) = output_sum(model, &ends, output, false)?;
    let scale = |a: &[f64], xv: &[f64], bv: &[f64]| -> Vec<f64> {
        a.iter().zip(xv.iter().zip(bv)).map(|(g, (x, b))| (x - b) * g / n_steps as f64).collect()
    };
    let c = scale(&acc[2], &x.coords, &baseline.coords);
    Ok(IgResult {
        window: scale(&acc[0], &x.window, &baseline.window),
        statics: scale(&acc[1], &x.statics, &baseline.statics),
        coords: [c[0], c[1]],
        f_x: f[0],
        f_baseline: f[1],
    })
}

/// Group scores from per-variable IG results: feature-level IG sums a
/// dynamic feature over its window; the group score is the mean of
/// feature-level |IG| over samples and over the group's features.
pub fn ig_group_scores(ds: &BasinDataset, groups: &[AttrGroup], per_variable: &[Vec<IgResult>]) -> AttributionResult {
    let f = ds.n_dynamic();
    let mut raw = vec![vec![f64::NAN; groups.len()]; per_variable.len()];
    for (v, results) in per_variable.iter().enumerate() {
        for (gi, &g) in groups.iter().enumerate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for r in results {
                if g == AttrGroup::BA {
                    for s in &r.statics {
                        total += s.abs();
                        count += 1;
                    }
                    continue;
                }
                for j in (0..f).filter(|&j| AttrGroup::of_feature(ds.features[j].group) == Some(g)) {
                    let feature: f64 = r.window.iter().skip(j).step_by(f).sum();
                    total += feature.abs();
                    count += 1;
                }
            }
            if count > 0 {
                raw[v][gi] = total / count as f64;
            }
        }
    }
    AttributionResult::from_raw(AttributionMethod::Ig, groups, &raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::KgeBreakdown;
    use crate::models::InputVars;

    /// `F(x) = Σ w·(last window row) + Σ u·statics`.
    struct Linear {
        w: Vec<f64>,
        u: Vec<f64>,
    }

    impl Regressor for Linear {
        fn seq_len(&self) -> usize {
            1
        }
        fn n_outputs(&self) -> usize {
            1
        }
        fn forward_inputs<'t>(&self, tape: &'t Tape, x: &InputVars<'t>) -> Result<ndcore::Var<'t>> {
            let w = tape.constant(Tensor::matrix(self.w.len(), 1, self.w.clone())?);
            let u = tape.constant(Tensor::matrix(self.u.len(), 1, self.u.clone())?);
            Ok(x.dynamic.matmul(w)?.add(x.statics.matmul(u)?)?)
        }
    }

    fn sample(window: Vec<f64>, statics: Vec<f64>) -> Sample {
        Sample {
            basin: 0,
            day: 0,
            window,
            statics,
            coords: [0.3, 0.7],
            target: vec![1.0],
        }
    }

    #[test]
    fn linear_model_ig_is_exact() {
        let m = Linear {
            w: vec![0.5, -2.0, 1.5],
            u: vec![3.0],
        };
        let x = sample(vec![0.2, 0.4, -0.6], vec![0.9]);
        let zero = Sample {
            window: vec![0.0; 3],
            statics: vec![0.0],
            coords: [0.0; 2],
            ..x.clone()
        };
        let ig = integrated_gradients(&m, &x, &zero, 7, 0).unwrap();
        for i in 0..3 {
            assert!((ig.window[i] - m.w[i] * x.window[i]).abs() < 1e-12);
        }
        assert!((ig.statics[0] - 2.7).abs() < 1e-12);
        assert!(ig.completeness_gap() < 1e-12);
        let same = integrated_gradients(&m, &x, &x, 7, 0).unwrap();
        assert!(same.window.iter().chain(&same.statics).all(|v| *v == 0.0));
        let bad = Sample {
            window: vec![0.0; 2],
            ..zero
        };
        assert!(matches!(
            integrated_gradients(&m, &x, &bad, 7, 0),
            Err(Error::Tensor(TensorError::Dimension { .. }))
        ));
    }

    #[test]
    fn shares_sum_to_one() {
        for raw in [vec![1.0, 3.0, -2.0, f64::NAN, 0.5], vec![-1.0, -2.0, 0.0, -0.5, -3.0]] {
            let s = normalize_shares(&raw);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(s.iter().all(|v| *v >= 0.0));
        }
    }

    fn scores(kge: &[(usize, usize, f64)]) -> Vec<PairScore> {
        kge.iter()
            .map(|&(basin, variable, k)| PairScore {
                basin,
                variable,
                n_obs: 10,
                kge: KgeBreakdown {
                    kge: k,
                    r: 0.0,
                    beta: 1.0,
                    gamma: 1.0,
                },
                pbias: 0.0,
            })
            .collect()
    }

    #[test]
    fn single_group_traverse_equals_ablation() {
        let groups = [AttrGroup::Q];
        let with = scores(&[(0, 0, 0.8), (1, 0, 0.6), (2, 0, 0.5)]);
        let without = scores(&[(0, 0, 0.4), (1, 0, 0.5), (2, 0, 0.05)]);
        let a = ablation_from_scores(&groups, &with, &[without.clone()], 1).unwrap();
        let subsets = BTreeMap::from([(0u32, without), (1u32, with)]);
        let t = traverse_from_scores(&groups, &subsets, 1).unwrap();
        assert_eq!(a.raw(0, AttrGroup::Q), t.raw(0, AttrGroup::Q));
        assert!(a.raw(0, AttrGroup::Q).unwrap() > 0.0);
    }

    #[test]
    fn traverse_counts_pairs_and_reports_missing_subsets() {
        assert_eq!(subset_masks(5).len(), 32);
        for g in 0..5 {
            assert_eq!(subset_masks(5).iter().filter(|m| *m & (1 << g) == 0).count(), 16);
        }
        let groups = [AttrGroup::M, AttrGroup::Q];
        let subsets = BTreeMap::from([(0u32, scores(&[(0, 0, 0.5)]))]);
        assert!(matches!(
            traverse_from_scores(&groups, &subsets, 1),
            Err(Error::AttributedRun { .. })
        ));
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let groups = [AttrGroup::M, AttrGroup::Q];
        let mut subsets = BTreeMap::new();
        for m in 0..4u32 {
            let mut s = scores(&[(0, 0, 0.3 + 0.1 * m as f64), (1, 0, 0.2 + 0.15 * m as f64), (2, 0, 0.9)]);
            if m % 2 == 1 {
                s.reverse();
            }
            subsets.insert(m, s);
        }
        let a = traverse_from_scores(&groups, &subsets, 1).unwrap();
        for s in subsets.values_mut() {
            s.reverse();
        }
        assert_eq!(traverse_from_scores(&groups, &subsets, 1).unwrap(), a);
    }
}
