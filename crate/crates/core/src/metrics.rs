//! Hydrological skill scores and the descriptive indices computed on
//! basin-variable series: KGE, PBIAS, simplicity/linearity, Theil-Sen,
//! LOWESS.

use serde::{Deserialize, Serialize};

use crate::dataio::{target_method, time_features, BasinDataset, BasinRecord, FeatureGroup, NormMethod};
use crate::error::{Error, Result};

/// Kling-Gupta efficiency and its three components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgeBreakdown {
    pub kge: f64,
    /// Pearson correlation between observations and predictions.
    pub r: f64,
    /// Bias ratio `μ_P / μ_O`.
    pub beta: f64,
    /// Variability ratio `σ_P / σ_O`.
    pub gamma: f64,
}

/// Drops every pair in which either side is not finite.
pub fn paired(observed: &[f64], predicted: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if observed.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "observed has {} values, predicted has {}",
            observed.len(),
            predicted.len()
        )));
    }
    Ok(observed
        .iter()
        .zip(predicted)
        .filter(|(o, p)| o.is_finite() && p.is_finite())
        .map(|(&o, &p)| (o, p))
        .unzip())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance (n denominator).
fn pop_var(x: &[f64], mu: f64) -> f64 {
    x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64
}

/// KGE on the original (denormalized) scale.
///
/// A constant prediction has no defined correlation; `r` is taken as 0 so
/// predicting the observed mean scores `1 − √2`.
pub fn kge(observed: &[f64], predicted: &[f64]) -> Result<KgeBreakdown> {
    let (o, p) = paired(observed, predicted)?;
    if o.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: o.len(),
        });
    }
    let mu_o = mean(&o);
    let mu_p = mean(&p);
    let var_o = pop_var(&o, mu_o);
    let var_p = pop_var(&p, mu_p);
    let sd_o = var_o.sqrt();
    let sd_p = var_p.sqrt();
    if sd_o == 0.0 {
        return Err(Error::MetricUndefined("observations have zero variance".into()));
    }
    if mu_o == 0.0 {
        return Err(Error::MetricUndefined("observations have zero mean".into()));
    }
    let r = if sd_p == 0.0 {
        0.0
    } else {
        let cov = o
            .iter()
            .zip(&p)
            .map(|(a, b)| (a - mu_o) * (b - mu_p))
            .sum::<f64>()
            / o.len() as f64;
        (cov / (var_o * var_p).sqrt()).clamp(-1.0, 1.0)
    };
    let beta = mu_p / mu_o;
    let gamma = sd_p / sd_o;
    let kge = 1.0 - ((r - 1.0).powi(2) + (beta - 1.0).powi(2) + (gamma - 1.0).powi(2)).sqrt();
    Ok(KgeBreakdown { kge, r, beta, gamma })
}

/// Percent bias `100·Σ(O−P)/ΣO`; negative values mean overestimation.
pub fn pbias(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    let (o, p) = paired(observed, predicted)?;
    let so: f64 = o.iter().sum();
    if so == 0.0 || o.is_empty() {
        return Err(Error::MetricUndefined("sum of observations is zero".into()));
    }
    let diff: f64 = o.iter().zip(&p).map(|(a, b)| a - b).sum();
    Ok(100.0 * diff / so)
}

/// Default floor on the baseline KGE below which percent changes are not
/// reported.
pub const MIN_BASE_KGE: f64 = 0.1;

/// `100·(new − base)/|base|`, or `None` when `base < min_base`.
pub fn percent_change(base: f64, new: f64, min_base: f64) -> Option<f64> {
    if !(base.is_finite() && new.is_finite()) || base < min_base || base == 0.0 {
        return None;
    }
    Some(100.0 * (new - base) / base.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplicityScore {
    /// R² on runoff plus annual harmonics.
    pub simplicity: f64,
    /// R² on runoff alone.
    pub linearity: f64,
    pub n_obs: usize,
}

pub const DAYS_PER_YEAR: f64 = 365.25;

pub const MIN_SIMPLICITY_OBS: usize = 10;

/// Simplicity and linearity of one concentration series.
///
/// `time` is the day index used for the annual harmonics (days since the
/// reference date). Pairs with a non-finite concentration or runoff are
/// skipped.
pub fn simplicity_score(concentration: &[f64], runoff: &[f64], time: &[f64]) -> Result<SimplicityScore> {
    if concentration.len() != runoff.len() || runoff.len() != time.len() {
        return Err(Error::Contract("simplicity inputs differ in length".into()));
    }
    let mut y = Vec::new();
    let mut q = Vec::new();
    let mut s = Vec::new();
    let mut c = Vec::new();
    for i in 0..concentration.len() {
        if concentration[i].is_finite() && runoff[i].is_finite() {
            let phase = 2.0 * std::f64::consts::PI * time[i] / DAYS_PER_YEAR;
            y.push(concentration[i]);
            q.push(runoff[i]);
            s.push(phase.sin());
            c.push(phase.cos());
        }
    }
    if y.len() < MIN_SIMPLICITY_OBS {
        return Err(Error::InsufficientData {
            needed: MIN_SIMPLICITY_OBS,
            got: y.len(),
        });
    }
    let ones = vec![1.0; y.len()];
    let full = r_squared(&[&ones, &q, &s, &c], &y)?;
    let linear = r_squared(&[&ones, &q], &y)?;
    Ok(SimplicityScore {
        simplicity: full.clamp(0.0, 1.0),
        linearity: linear.clamp(0.0, 1.0),
        n_obs: y.len(),
    })
}

/// Simplicity of one basin-variable series. Log-normalized variables and
/// runoff enter on the log scale; non-positive values are skipped.
pub fn record_simplicity(ds: &BasinDataset, basin: &BasinRecord, variable: usize) -> Result<SimplicityScore> {
    let q_col = *ds
        .columns_of(FeatureGroup::Q)
        .first()
        .ok_or_else(|| Error::Contract("dataset has no runoff column".into()))?;
    let name = ds
        .target_names
        .get(variable)
        .ok_or_else(|| Error::Contract(format!("no target variable {variable}")))?;
    let log_target = target_method(name) == NormMethod::LogMinMax;
    let nv = ds.n_targets();
    let positive_ln = |v: f64| if v > 0.0 { v.ln() } else { f64::NAN };
    let mut conc = Vec::with_capacity(ds.n_days());
    let mut runoff = Vec::with_capacity(ds.n_days());
    let mut time = Vec::with_capacity(ds.n_days());
    for t in 0..ds.n_days() {
        let y = basin.targets[t * nv + variable];
        conc.push(if log_target { positive_ln(y) } else { y });
        runoff.push(positive_ln(ds.dynamic_row(basin, t)[q_col]));
        time.push(time_features(ds.calendar[t])[0]);
    }
    simplicity_score(&conc, &runoff, &time)
}

/// Ordinary least squares by Householder QR. Returns fitted values.
pub fn ols_fit(columns: &[&[f64]], y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    let p = columns.len();
    if n < p {
        return Err(Error::MetricUndefined(format!(
            "{n} observations for {p} regressors"
        )));
    }
    // column-major copy of the design
    let mut a: Vec<Vec<f64>> = columns.iter().map(|c| c.to_vec()).collect();
    let mut b = y.to_vec();
    let scale = a
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let mut diag = vec![0.0; p];
    for k in 0..p {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-10 * scale.max(1e-300) {
            return Err(Error::MetricUndefined("rank-deficient design".into()));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        diag[k] = alpha;
        if vnorm2 > 0.0 {
            for col in a.iter_mut().skip(k) {
                let dot: f64 = v.iter().zip(&col[k..]).map(|(x, y)| x * y).sum();
                let f = 2.0 * dot / vnorm2;
                for (ci, vi) in col[k..].iter_mut().zip(&v) {
                    *ci -= f * vi;
                }
            }
            let dot: f64 = v.iter().zip(&b[k..]).map(|(x, y)| x * y).sum();
            let f = 2.0 * dot / vnorm2;
            for (bi, vi) in b[k..].iter_mut().zip(&v) {
                *bi -= f * vi;
            }
        }
        if diag[k].abs() <= 1e-10 * scale {
            return Err(Error::MetricUndefined("rank-deficient design".into()));
        }
    }
    // back substitution on the upper triangle
    let mut coef = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = b[k];
        for j in k + 1..p {
            s -= a[j][k] * coef[j];
        }
        coef[k] = s / a[k][k];
    }
    Ok((0..n)
        .map(|i| columns.iter().zip(&coef).map(|(col, c)| col[i] * c).sum())
        .collect())
}

fn r_squared(columns: &[&[f64]], y: &[f64]) -> Result<f64> {
    let mu = mean(y);
    let sst: f64 = y.iter().map(|v| (v - mu) * (v - mu)).sum();
    if sst == 0.0 {
        return Err(Error::MetricUndefined("constant response".into()));
    }
    let fitted = ols_fit(columns, y)?;
    let sse: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - sse / sst)
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of finite values; `None` for an empty input.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(median_sorted(&v))
}

/// Theil-Sen slope: the median of all pairwise slopes over distinct `x`.
pub fn theil_sen(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract("theil_sen inputs differ in length".into()));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: x.len(),
        });
    }
    let mut slopes = Vec::with_capacity(x.len() * (x.len() - 1) / 2);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            if x[j] != x[i] {
                slopes.push((y[j] - y[i]) / (x[j] - x[i]));
            }
        }
    }
    if slopes.is_empty() {
        return Err(Error::MetricUndefined("all x values identical".into()));
    }
    slopes.sort_by(f64::total_cmp);
    Ok(median_sorted(&slopes))
}

pub const DEFAULT_LOWESS_FRAC: f64 = 2.0 / 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LowessFit {
    pub fitted: Vec<f64>,
    /// Local-linear slope at each point.
    pub slopes: Vec<f64>,
}

impl LowessFit {
    /// Slope of the local fit at the largest `x`.
    pub fn endpoint_slope(&self, x: &[f64]) -> f64 {
        let imax = x
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.slopes[imax]
    }
}

/// Locally weighted linear regression with tricube weights over the
/// `floor(frac·n)` nearest neighbours, without robustifying iterations.
pub fn lowess(x: &[f64], y: &[f64], frac: f64) -> Result<LowessFit> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Contract("lowess inputs differ in length".into()));
    }
    if n < 5 {
        return Err(Error::InsufficientData { needed: 5, got: n });
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config(format!("lowess frac {frac} outside (0, 1]")));
    }
    let k = (frac * n as f64).floor() as usize;
    if k < 2 {
        return Err(Error::Config(format!("lowess neighbourhood of {k} points")));
    }
    let mut fitted = Vec::with_capacity(n);
    let mut slopes = Vec::with_capacity(n);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dist.clear();
        dist.extend((0..n).map(|j| ((x[j] - x[i]).abs(), j)));
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let h = dist[k - 1].0;
        let mut sw = 0.0;
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut w = Vec::with_capacity(k);
        for &(d, j) in &dist[..k] {
            let wt = if h == 0.0 {
                1.0
            } else if d < h {
                let u = d / h;
                (1.0 - u * u * u).powi(3)
            } else {
                0.0
            };
            w.push((wt, j));
            sw += wt;
            sx += wt * x[j];
            sy += wt * y[j];
        }
        let xm = sx / sw;
        let ym = sy / sw;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for &(wt, j) in &w {
            sxx += wt * (x[j] - xm) * (x[j] - xm);
            sxy += wt * (x[j] - xm) * (y[j] - ym);
        }
        let span = h.max(f64::MIN_POSITIVE);
        let slope = if sxx > 1e-12 * span * span * sw {
            sxy / sxx
        } else {
            0.0
        };
        slopes.push(slope);
        fitted.push(ym + slope * (x[i] - xm));
    }
    Ok(LowessFit { fitted, slopes })
}

/// Observed minus LOWESS-predicted values at the same `x`.
pub fn lowess_residuals(x: &[f64], y: &[f64], frac: f64) -> Result<Vec<f64>> {
    let fit = lowess(x, y, frac)?;
    Ok(y.iter().zip(&fit.fitted).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let o = [1.0, 2.0, 4.0, 3.0];
        let k = kge(&o, &o).unwrap();
        assert_eq!((k.kge, k.r, k.beta, k.gamma), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn mean_prediction_scores_one_minus_sqrt2() {
        let o = [1.0, 2.0, 4.0, 3.0];
        let p = [2.5; 4];
        let k = kge(&o, &p).unwrap();
        assert_eq!(k.r, 0.0);
        assert!((k.kge - (1.0 - 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn kge_error_paths() {
        assert!(matches!(kge(&[1.0], &[1.0]), Err(Error::InsufficientData { .. })));
        assert!(matches!(kge(&[2.0, 2.0], &[1.0, 3.0]), Err(Error::MetricUndefined(_))));
        assert!(matches!(kge(&[-1.0, 1.0], &[1.0, 3.0]), Err(Error::MetricUndefined(_))));
        // missing pairs are dropped before the length check
        assert!(kge(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.5]).is_ok());
    }

    #[test]
    fn pbias_cases() {
        assert_eq!(pbias(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((pbias(&[10.0, 10.0], &[11.0, 11.0]).unwrap() + 10.0).abs() < 1e-12);
        assert!(pbias(&[1.0, -1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn theil_sen_cases() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_eq!(theil_sen(&x, &y).unwrap(), 2.0);
        assert_eq!(theil_sen(&[0.0, 1.0, 2.0], &[0.0, 1.0, 10.0]).unwrap(), 5.0);
        assert!(matches!(theil_sen(&[1.0, 1.0], &[0.0, 2.0]), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn lowess_reproduces_lines_and_constants() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() * 5.0 + i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        for frac in [0.1, 0.3, 2.0 / 3.0, 1.0] {
            let fit = lowess(&x, &y, frac).unwrap();
            for (a, b) in fit.fitted.iter().zip(&y) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let res = lowess_residuals(&x, &vec![4.0; 30], 0.5).unwrap();
        assert!(res.iter().all(|r| r.abs() < 1e-12));
        assert!(matches!(lowess(&x, &y, 0.05), Err(Error::Config(_))));
        assert!(lowess(&x[..4], &y[..4], 1.0).is_err());
    }

    #[test]
    fn simplicity_of_exact_model() {
        let t: Vec<f64> = (0..400).map(|i| i as f64).collect();
        let q: Vec<f64> = t.iter().map(|v| (v * 0.13).cos() + 0.01 * v).collect();
        let y: Vec<f64> = t
            .iter()
            .zip(&q)
            .map(|(tv, qv)| 2.0 * qv + (2.0 * std::f64::consts::PI * tv / DAYS_PER_YEAR).sin())
            .collect();
        let s = simplicity_score(&y, &q, &t).unwrap();
        assert!(s.simplicity >= 0.999);
        assert!(s.linearity <= s.simplicity + 1e-12);
        assert!(matches!(
            simplicity_score(&y[..5], &q[..5], &t[..5]),
            Err(Error::InsufficientData { .. })
        ));
        // runoff that duplicates the intercept makes the design singular
        let flat = vec![1.0; 400];
        assert!(matches!(simplicity_score(&y, &flat, &t), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn percent_change_filter() {
        assert!((percent_change(0.5, 0.4, MIN_BASE_KGE).unwrap() + 20.0).abs() < 1e-9);
        assert_eq!(percent_change(0.05, 0.4, MIN_BASE_KGE), None);
    }
}
