use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::corrupt::CorruptionSpec;
use crate::dataio::{coverage, ingest_csv, split, synthesize, AttrGroup, BasinDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::record_simplicity;
use crate::models::{Model, ModelSpec, Sample, TrainConfig};
use crate::pipeline::{score, test_samples, train_and_score, PairScore, TrainJob};
use crate::stats::{bh_fdr, cles, mann_whitney_u, pearson, significance_stars, spearman, wilcoxon_paired, Alternative};
use crate::trust::{
    ablation_from_scores, ig_baseline, ig_group_scores, integrated_gradients, mc_dropout_uncertainty, percent_changes,
    robustness_curve, subset_masks, traverse_from_scores, tta_columns, tta_uncertainty, AttributionMethod,
    AttributionResult, IgResult, SweepContext, UncertaintyResult,
};

use super::config::{AttributionConfig, ExperimentConfig, IgBaselineKind, ModelEntry};
use super::report::*;
use super::seed::seed_stream;

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

struct StageError {
    job: String,
    error: Error,
}

type StageResult<T> = std::result::Result<T, StageError>;

fn at<T>(job: impl Into<String>, r: Result<T>) -> StageResult<T> {
    r.map_err(|error| StageError { job: job.into(), error })
}

/// Runs every job on the pool and returns the results in plan order, or
/// the first failure in plan order.
fn par_jobs<J, T, F>(pool: &ThreadPool, jobs: &[J], id: impl Fn(&J) -> String + Sync, f: F) -> StageResult<Vec<T>>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = pool.install(|| jobs.par_iter().map(&f).collect());
    results.into_iter().zip(jobs).map(|(r, j)| at(id(j), r)).collect()
}

struct Stages<'a> {
    cfg: &'a ExperimentConfig,
    pool: ThreadPool,
    ds: BasinDataset,
    split: Split,
    specs: Vec<ModelSpec>,
    baselines: Vec<Model>,
    clean: Vec<Vec<PairScore>>,
    report: EvaluationReport,
}

fn model_seeds(master: u64, name: &str) -> (u64, u64) {
    (seed_stream(master, &["model", name, "init"]), seed_stream(master, &["model", name, "train"]))
}

impl<'a> Stages<'a> {
    fn job<'s>(&'s self, i: usize, config: &'s TrainConfig) -> TrainJob<'s> {
        let (model_seed, train_seed) = model_seeds(self.cfg.seed, &self.cfg.models[i].name);
        TrainJob {
            spec: &self.specs[i],
            config,
            stride: self.cfg.stride,
            model_seed,
            train_seed,
        }
    }

    fn index(&self, m: &ModelEntry) -> usize {
        self.cfg.models.iter().position(|e| e.name == m.name).expect("validated model reference")
    }

    fn basin_name(&self, b: usize) -> String {
        self.ds.basins[b].id.clone()
    }

    fn var_name(&self, v: usize) -> String {
        self.ds.target_names[v].clone()
    }

    fn records(&self, model: &str, condition: &str, scores: &[PairScore]) -> Vec<BaselineRecord> {
        scores
            .iter()
            .map(|s| BaselineRecord {
                model: model.to_string(),
                basin: self.basin_name(s.basin),
                variable: self.var_name(s.variable),
                condition: condition.to_string(),
                n_obs: s.n_obs,
                kge: s.kge.kge,
                r: s.kge.r,
                beta: s.kge.beta,
                gamma: s.kge.gamma,
                pbias: s.pbias,
            })
            .collect()
    }

    fn baseline(&mut self) -> StageResult<()> {
        let jobs: Vec<usize> = (0..self.cfg.models.len()).collect();
        for &i in &jobs {
            at(self.cfg.models[i].name.clone(), self.specs[i].validate())?;
        }
        let this = &*self;
        let train = &this.cfg.train;
        let models = par_jobs(
            &this.pool,
            &jobs,
            |&i| this.cfg.models[i].name.clone(),
            |&i| this.job(i, train).run(&this.ds, &this.split.train, &[]),
        )?;
        self.baselines = models;
        Ok(())
    }

    fn evaluate(&mut self) -> StageResult<()> {
        let this = &*self;
        let jobs: Vec<usize> = (0..this.baselines.len()).collect();
        let clean = par_jobs(
            &this.pool,
            &jobs,
            |&i| this.cfg.models[i].name.clone(),
            |&i| score(&this.baselines[i], &this.ds, &this.split.test, &[]),
        )?;
        for (i, s) in clean.iter().enumerate() {
            let r = self.records(&self.cfg.models[i].name, CLEAN, s);
            self.report.baseline.extend(r);
        }
        self.clean = clean;
        let nv = self.ds.n_targets();
        for rec in &self.ds.basins {
            for v in 0..nv {
                let s = record_simplicity(&self.ds, rec, v).ok();
                self.report.pairs.push(PairContext {
                    basin: rec.id.clone(),
                    variable: self.ds.target_names[v].clone(),
                    land_use: rec.land_use,
                    coverage: coverage(rec, nv, v),
                    simplicity: s.map(|s| s.simplicity),
                    linearity: s.map(|s| s.linearity),
                });
            }
        }
        Ok(())
    }

    fn robustness(&mut self) -> StageResult<()> {
        let Some(rc) = &self.cfg.robustness else { return Ok(()) };
        let mut jobs: Vec<(usize, usize, CorruptionSpec)> = Vec::new();
        for m in self.cfg.selected(&rc.models) {
            let i = self.index(m);
            for (k, sweep) in rc.sweeps.iter().enumerate() {
                let specs = at(sweep.clone(), rc.specs(sweep, seed_stream(self.cfg.seed, &["corrupt", sweep])))?;
                jobs.extend(specs.into_iter().map(|s| (i, k, s)));
            }
        }
        let this = &*self;
        let train = &this.cfg.train;
        let id = |(i, _, s): &(usize, usize, CorruptionSpec)| format!("{}/{}", this.cfg.models[*i].name, s.label());
        let scores = par_jobs(&this.pool, &jobs, id, |(i, _, spec)| {
            let ctx = SweepContext {
                dataset: &this.ds,
                split: &this.split,
                job: this.job(*i, train),
                baseline: &this.baselines[*i],
            };
            crate::trust::corrupted_scores(&ctx, spec)
        })?;
        let mut grouped: BTreeMap<(usize, usize), Vec<(&CorruptionSpec, &Vec<PairScore>)>> = BTreeMap::new();
        for ((i, k, spec), s) in jobs.iter().zip(&scores) {
            grouped.entry((*i, *k)).or_default().push((spec, s));
        }
        let mut records = Vec::new();
        let mut curves = Vec::new();
        for ((i, k), runs) in grouped {
            let name = &self.cfg.models[i].name;
            let levels: Vec<f64> = runs.iter().map(|(s, _)| s.fraction).collect();
            let changes: Vec<Vec<f64>> =
                runs.iter().map(|(_, s)| percent_changes(&self.clean[i], s, rc.min_base_kge)).collect();
            for (spec, s) in &runs {
                records.extend(self.records(name, &spec.label(), s));
            }
            let (kind, side) = (runs[0].0.kind, runs[0].0.side);
            let curve = at(format!("{name}/{}", rc.sweeps[k]), robustness_curve(kind, side, &levels, &changes))?;
            curves.push(RobustnessRecord {
                model: name.clone(),
                curve,
            });
        }
        self.report.baseline.extend(records);
        self.report.robustness.extend(curves);
        Ok(())
    }

    fn uncertainty(&mut self) -> StageResult<()> {
        let Some(uc) = &self.cfg.uncertainty else { return Ok(()) };
        #[derive(Clone, Copy)]
        enum Job {
            Tta(usize, f64),
            Mc(usize, f64),
        }
        let mut jobs = Vec::new();
        for m in self.cfg.selected(&uc.models) {
            let i = self.index(m);
            for &s in uc.tta.iter().flat_map(|t| &t.sigmas) {
                jobs.push(Job::Tta(i, s));
            }
            for &p in uc.mc_dropout.iter().flat_map(|d| &d.rates) {
                jobs.push(Job::Mc(i, p));
            }
        }
        let this = &*self;
        let mut samples: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
        for j in &jobs {
            let (Job::Tta(i, _) | Job::Mc(i, _)) = *j;
            if let std::collections::btree_map::Entry::Vacant(e) = samples.entry(i) {
                let name = this.cfg.models[i].name.clone();
                e.insert(at(name, test_samples(&this.baselines[i], &this.ds, &this.split.test, &[]))?);
            }
        }
        let id = |j: &Job| match *j {
            Job::Tta(i, s) => format!("{}/tta_{s}", this.cfg.models[i].name),
            Job::Mc(i, p) => format!("{}/mc_dropout_{p}", this.cfg.models[i].name),
        };
        let results = par_jobs(&this.pool, &jobs, id, |j| match *j {
            Job::Tta(i, sigma) => {
                let t = uc.tta.as_ref().expect("tta job implies tta config");
                let model = &this.baselines[i];
                let seed = seed_stream(this.cfg.seed, &["tta", &this.cfg.models[i].name, &sigma.to_string()]);
                tta_uncertainty(
                    model,
                    &this.ds,
                    model.norm_stats.as_ref().expect("trained models carry statistics"),
                    &samples[&i],
                    &tta_columns(&this.ds, t.scope),
                    sigma,
                    t.runs,
                    seed,
                    Some(t.scope),
                )
            }
            Job::Mc(i, p) => {
                let d = uc.mc_dropout.as_ref().expect("mc job implies mc config");
                let seed = seed_stream(this.cfg.seed, &["mc_dropout", &this.cfg.models[i].name, &p.to_string()]);
                mc_dropout_uncertainty(&this.baselines[i], &this.ds, &samples[&i], p, d.runs, seed)
            }
        })?;
        let records: Vec<UncertaintyRecord> = jobs
            .iter()
            .zip(results)
            .map(|(j, r): (&Job, UncertaintyResult)| {
                let (Job::Tta(i, _) | Job::Mc(i, _)) = *j;
                UncertaintyRecord {
                    model: self.cfg.models[i].name.clone(),
                    method: r.method,
                    level: r.level,
                    runs: r.runs,
                    scope: r.scope,
                    median_sd: r.median_sd(),
                    rows: r
                        .pairs
                        .iter()
                        .map(|p| UncertaintyRow {
                            basin: self.basin_name(p.basin),
                            variable: self.var_name(p.variable),
                            mean_kge: p.mean_kge,
                            sd_kge: p.sd_kge,
                        })
                        .collect(),
                }
            })
            .collect();
        self.report.uncertainty.extend(records);
        Ok(())
    }

    fn attribution_rows(&self, r: &AttributionResult) -> Vec<AttributionRow> {
        r.scores
            .iter()
            .map(|s| AttributionRow {
                variable: self.var_name(s.variable),
                group: s.group.name().to_string(),
                raw: finite(s.raw),
                share: s.share,
            })
            .collect()
    }

    fn explain(&self, i: usize, ac: &AttributionConfig) -> Result<(AttributionResult, f64)> {
        let model = &self.baselines[i];
        let test = test_samples(model, &self.ds, &self.split.test, &[])?;
        if test.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let k = ac.ig_samples.min(test.len());
        let chosen: Vec<&Sample> = (0..k).map(|j| &test[j * test.len() / k]).collect();
        let mut per_var: Vec<Vec<IgResult>> = Vec::new();
        let mut gap = 0.0f64;
        for v in 0..self.ds.n_targets() {
            let mut out = Vec::with_capacity(k);
            for s in &chosen {
                let base = match ac.ig_baseline {
                    IgBaselineKind::FillDynamic => ig_baseline(s),
                    IgBaselineKind::Zero => Sample {
                        window: vec![0.0; s.window.len()],
                        statics: vec![0.0; s.statics.len()],
                        coords: [0.0; 2],
                        ..(*s).clone()
                    },
                };
                let r = integrated_gradients(model, s, &base, ac.ig_steps, v)?;
                gap = gap.max(r.completeness_gap());
                out.push(r);
            }
            per_var.push(out);
        }
        Ok((ig_group_scores(&self.ds, &ac.groups, &per_var), gap))
    }

    fn attribution(&mut self) -> StageResult<()> {
        let Some(ac) = &self.cfg.attribution else { return Ok(()) };
        let groups: &[AttrGroup] = &ac.groups;
        let all = (1u32 << groups.len()) - 1;
        let mut masks = BTreeSet::new();
        if ac.methods.contains(&AttributionMethod::Ablation) {
            masks.insert(all);
            masks.extend((0..groups.len()).map(|g| all & !(1 << g)));
        }
        if ac.methods.contains(&AttributionMethod::Traverse) {
            masks.extend(subset_masks(groups.len()));
        }
        let selected: Vec<usize> = self.cfg.selected(&ac.models).into_iter().map(|m| self.index(m)).collect();
        let jobs: Vec<(usize, u32)> = selected.iter().flat_map(|&i| masks.iter().map(move |&m| (i, m))).collect();
        let train = TrainConfig {
            epochs: ac.epochs.unwrap_or(self.cfg.train.epochs),
            ..self.cfg.train.clone()
        };
        let this = &*self;
        let member_names = |mask: u32| -> Vec<&str> {
            groups.iter().enumerate().filter(|(g, _)| mask & (1 << g) != 0).map(|(_, g)| g.name()).collect()
        };
        let id = |(i, m): &(usize, u32)| format!("{}/subset[{}]", this.cfg.models[*i].name, member_names(*m).join(","));
        let scores = par_jobs(&this.pool, &jobs, id, |&(i, mask)| {
            let removed: Vec<AttrGroup> =
                groups.iter().enumerate().filter(|(g, _)| mask & (1 << g) == 0).map(|(_, g)| *g).collect();
            let job = this.job(i, &train);
            train_and_score(&job, &this.ds, &this.ds, &this.split.train, &this.split.test, &removed).map(|(_, s)| s)
        })?;
        let ig_jobs: Vec<usize> =
            if ac.methods.contains(&AttributionMethod::Ig) { selected.clone() } else { Vec::new() };
        let ig = par_jobs(&this.pool, &ig_jobs, |&i| format!("{}/ig", this.cfg.models[i].name), |&i| this.explain(i, ac))?;
        let mut by_model: BTreeMap<usize, BTreeMap<u32, Vec<PairScore>>> = BTreeMap::new();
        for ((i, m), s) in jobs.into_iter().zip(scores) {
            by_model.entry(i).or_default().insert(m, s);
        }
        let nv = self.ds.n_targets();
        let mut records = Vec::new();
        for &i in &selected {
            let name = self.cfg.models[i].name.clone();
            for method in &ac.methods {
                let (result, gap) = match method {
                    AttributionMethod::Ablation => {
                        let subsets = &by_model[&i];
                        let without: Vec<Vec<PairScore>> =
                            (0..groups.len()).map(|g| subsets[&(all & !(1 << g))].clone()).collect();
                        (at(format!("{name}/ablation"), ablation_from_scores(groups, &subsets[&all], &without, nv))?, None)
                    }
                    AttributionMethod::Traverse => {
                        (at(format!("{name}/traverse"), traverse_from_scores(groups, &by_model[&i], nv))?, None)
                    }
                    AttributionMethod::Ig => {
                        let k = ig_jobs.iter().position(|&j| j == i).expect("ig job per selected model");
                        (ig[k].0.clone(), Some(ig[k].1))
                    }
                };
                let is_ig = *method == AttributionMethod::Ig;
                records.push(AttributionRecord {
                    model: name.clone(),
                    method: *method,
                    ig_baseline: is_ig.then_some(ac.ig_baseline),
                    ig_steps: is_ig.then_some(ac.ig_steps),
                    ig_max_gap: gap.and_then(finite),
                    rows: self.attribution_rows(&result),
                });
            }
        }
        self.report.attribution.extend(records);
        Ok(())
    }

    fn statistics(&mut self) -> StageResult<()> {
        let mut out: Vec<StatRecord> = Vec::new();
        let kge_of = |i: usize| -> BTreeMap<(usize, usize), f64> {
            self.clean[i].iter().map(|s| ((s.basin, s.variable), s.kge.kge)).collect()
        };
        let n = self.cfg.models.len();
        let scopes: Vec<Option<usize>> = std::iter::once(None).chain((0..self.ds.n_targets()).map(Some)).collect();
        for i in 0..n {
            for j in i + 1..n {
                let (ki, kj) = (kge_of(i), kge_of(j));
                for scope in &scopes {
                    let keys: Vec<_> =
                        ki.keys().filter(|k| kj.contains_key(k) && scope.is_none_or(|v| k.1 == v)).collect();
                    let a: Vec<f64> = keys.iter().map(|k| ki[k]).collect();
                    let b: Vec<f64> = keys.iter().map(|k| kj[k]).collect();
                    let scope_name = scope.map_or("all".to_string(), |v| self.var_name(v));
                    let rec = |test: &str| StatRecord {
                        test: test.to_string(),
                        scope: scope_name.clone(),
                        a: self.cfg.models[i].name.clone(),
                        b: self.cfg.models[j].name.clone(),
                        n: a.len(),
                        statistic: None,
                        effect: None,
                        p_value: None,
                        p_adjusted: None,
                        stars: None,
                        note: None,
                    };
                    let effect = cles(&a, &b).ok();
                    out.push(match wilcoxon_paired(&a, &b, Alternative::TwoSided) {
                        Ok(t) => StatRecord {
                            statistic: finite(t.statistic),
                            effect,
                            p_value: finite(t.p_value),
                            ..rec("wilcoxon_signed_rank")
                        },
                        Err(e) => StatRecord {
                            note: Some(e.to_string()),
                            ..rec("wilcoxon_signed_rank")
                        },
                    });
                    out.push(match mann_whitney_u(&a, &b, Alternative::TwoSided) {
                        Ok(t) => StatRecord {
                            statistic: finite(t.u_a),
                            effect,
                            p_value: finite(t.test.p_value),
                            ..rec("mann_whitney_u")
                        },
                        Err(e) => StatRecord {
                            note: Some(e.to_string()),
                            ..rec("mann_whitney_u")
                        },
                    });
                }
            }
        }
        let simplicity: BTreeMap<(&str, &str), f64> = self
            .report
            .pairs
            .iter()
            .filter_map(|p| Some(((p.basin.as_str(), p.variable.as_str()), p.simplicity?)))
            .collect();
        for m in &self.cfg.models {
            let (x, y): (Vec<f64>, Vec<f64>) = self
                .report
                .clean_records(&m.name)
                .filter_map(|r| Some((*simplicity.get(&(r.basin.as_str(), r.variable.as_str()))?, r.kge)))
                .unzip();
            out.push(correlation_record("spearman", "simplicity_vs_kge", &m.name, "simplicity", spearman(&x, &y), x.len()));
        }
        for u in &self.report.uncertainty {
            let (x, y): (Vec<f64>, Vec<f64>) = u.rows.iter().map(|r| (r.sd_kge, r.mean_kge)).unzip();
            let scope = format!("{}_{}", serde_json::to_value(u.method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(), u.level);
            out.push(correlation_record("pearson", &scope, &u.model, "sd_vs_kge", pearson(&x, &y), x.len()));
        }
        let idx: Vec<usize> = (0..out.len()).filter(|&k| out[k].p_value.is_some()).collect();
        let p: Vec<f64> = idx.iter().map(|&k| out[k].p_value.expect("filtered")).collect();
        let adjusted = at("bh_fdr", bh_fdr(&p))?;
        for (k, q) in idx.into_iter().zip(adjusted) {
            out[k].p_adjusted = Some(q);
            out[k].stars = Some(significance_stars(q).to_string());
        }
        self.report.statistics = out;
        Ok(())
    }
}

fn correlation_record(
    test: &str,
    scope: &str,
    a: &str,
    b: &str,
    r: Result<crate::stats::Correlation>,
    n: usize,
) -> StatRecord {
    let base = StatRecord {
        test: test.to_string(),
        scope: scope.to_string(),
        a: a.to_string(),
        b: b.to_string(),
        n,
        statistic: None,
        effect: None,
        p_value: None,
        p_adjusted: None,
        stars: None,
        note: None,
    };
    match r {
        Ok(c) => StatRecord {
            statistic: finite(c.coefficient),
            p_value: finite(c.p_value),
            ..base
        },
        Err(e) => StatRecord {
            note: Some(e.to_string()),
            ..base
        },
    }
}

/// Loads or generates the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<BasinDataset> {
    match (&cfg.dataset.synth, &cfg.dataset.ingest) {
        (Some(s), _) => Ok(synthesize(s, seed_stream(cfg.seed, &["synth"]))?.dataset),
        (None, Some(i)) => ingest_csv(&i.path, &i.options()),
        (None, None) => Err(Error::Config("no dataset source".into())),
    }
}

/// Stages in execution order, restricted to those the config requests.
pub fn planned_stages(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let mut s = vec!["ingest", "split", "baseline", "evaluate"];
    if cfg.robustness.is_some() {
        s.push("robustness");
    }
    if cfg.uncertainty.is_some() {
        s.push("uncertainty");
    }
    if cfg.attribution.is_some() {
        s.push("attribution");
    }
    if cfg.statistics {
        s.push("statistics");
    }
    s
}

/// Runs every stage; a stage failure stops the run and is recorded in the
/// returned report, which keeps everything completed before it. Only an
/// invalid configuration is an error.
pub fn run_partial(cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut report = EvaluationReport::new(cfg);
    let plan = planned_stages(cfg);
    let fail = |report: &mut EvaluationReport, k: usize, e: StageError| {
        report.failure = Some(Failure {
            stage: plan[k].to_string(),
            job: e.job,
            detail: e.error.to_string(),
            not_run: plan[k + 1..].iter().map(|s| s.to_string()).collect(),
        });
    };
    let ds = match at("dataset", load_dataset(cfg)) {
        Ok(d) => d,
        Err(e) => {
            fail(&mut report, 0, e);
            return Ok(report);
        }
    };
    let sp = match at("split", split(&ds, &cfg.split)) {
        Ok(s) => s,
        Err(e) => {
            fail(&mut report, 1, e);
            return Ok(report);
        }
    };
    let specs = cfg.models.iter().map(|m| m.resolve_for(&ds)).collect();
    let mut st = Stages {
        cfg,
        pool,
        ds,
        split: sp,
        specs,
        baselines: Vec::new(),
        clean: Vec::new(),
        report,
    };
    for (k, stage) in plan.iter().enumerate().skip(2) {
        let r = match *stage {
            "baseline" => st.baseline(),
            "evaluate" => st.evaluate(),
            "robustness" => st.robustness(),
            "uncertainty" => st.uncertainty(),
            "attribution" => st.attribution(),
            "statistics" => st.statistics(),
            _ => unreachable!("unknown stage"),
        };
        if let Err(e) = r {
            fail(&mut st.report, k, e);
            break;
        }
    }
    Ok(st.report)
}

/// Like [`run_partial`], but a stage failure is an error.
pub fn run(cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    let report = run_partial(cfg)?;
    match report.failure {
        Some(f) => Err(Error::Stage {
            stage: f.stage,
            job: f.job,
            detail: f.detail,
        }),
        None => Ok(report),
    }
}
