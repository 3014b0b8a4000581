//! Hypothesis tests and effect sizes used to annotate comparisons:
//! Wilcoxon signed-rank, Mann-Whitney U, CLES, Pearson/Spearman and
//! Benjamini-Hochberg adjustment.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// The location of the first sample (or of the differences) is above
    /// the second (above zero).
    Greater,
    Less,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    NormalApprox,
    TDist,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub method: PMethod,
}

/// Largest effective sample size handled by exact enumeration.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMode {
    Auto,
    Exact,
    Normal,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// `Σ (t³ − t)` over tie groups.
fn tie_term(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        sum += t * t * t - t;
        i = j + 1;
    }
    sum
}

/// Signed-rank test on paired differences. Zero differences are dropped.
pub fn wilcoxon_signed_rank(diffs: &[f64], alternative: Alternative, mode: WilcoxonMode) -> Result<TestResult> {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| d.is_finite() && *d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::DegenerateTest("all differences are zero".into()));
    }
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::Normal => false,
        WilcoxonMode::Auto => n <= WILCOXON_EXACT_MAX_N,
    };
    let p = if exact {
        signed_rank_exact_p(&ranks, w_plus, alternative)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term(&abs) / 48.0;
        normal_tail(w_plus - mu, var.sqrt(), alternative)
    };
    Ok(TestResult {
        statistic: w_plus,
        p_value: p.clamp(0.0, 1.0),
        n_effective: n,
        method: if exact { PMethod::Exact } else { PMethod::NormalApprox },
    })
}

/// Paired version: differences `a − b`.
pub fn wilcoxon_paired(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::Contract("paired samples differ in length".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    wilcoxon_signed_rank(&d, alternative, WilcoxonMode::Auto)
}

/// Exact null distribution of W⁺ by dynamic programming over doubled ranks
/// (average ranks are multiples of ½).
fn signed_rank_exact_p(ranks: &[f64], w_plus: f64, alternative: Alternative) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let denom = 2f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w_plus).round() as usize;
    let upper: f64 = counts[w2..].iter().sum::<f64>() / denom;
    let lower: f64 = counts[..=w2].iter().sum::<f64>() / denom;
    match alternative {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
    }
}

/// Normal tail probability with a 0.5 continuity correction.
fn normal_tail(centered: f64, sd: f64, alternative: Alternative) -> f64 {
    if sd <= 0.0 {
        return 1.0;
    }
    let nd = std_normal();
    match alternative {
        Alternative::Greater => nd.sf((centered - 0.5) / sd),
        Alternative::Less => nd.cdf((centered + 0.5) / sd),
        Alternative::TwoSided => {
            let z = (centered.abs() - 0.5).max(0.0) / sd;
            (2.0 * nd.sf(z)).min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u_a: f64,
    pub u_b: f64,
    pub test: TestResult,
}

/// Mann-Whitney U with the tie-corrected normal approximation.
pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("Mann-Whitney needs two non-empty samples".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let ra: f64 = ranks[..a.len()].iter().sum();
    let u_a = ra - na * (na + 1.0) / 2.0;
    let u_b = na * nb - u_a;
    let n = na + nb;
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term(&pooled) / (n * (n - 1.0)).max(1.0));
    let p = normal_tail(u_a - na * nb / 2.0, var.max(0.0).sqrt(), alternative);
    Ok(MannWhitney {
        u_a,
        u_b,
        test: TestResult {
            statistic: u_a,
            p_value: p.clamp(0.0, 1.0),
            n_effective: a.len() + b.len(),
            method: PMethod::NormalApprox,
        },
    })
}

/// Pair counts behind the common-language effect size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClesCounts {
    pub greater: u64,
    pub ties: u64,
    pub less: u64,
}

pub fn cles_counts(a: &[f64], b: &[f64]) -> ClesCounts {
    let mut sorted = b.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut c = ClesCounts {
        greater: 0,
        ties: 0,
        less: 0,
    };
    for &x in a {
        let below = sorted.partition_point(|&y| y < x) as u64;
        let not_above = sorted.partition_point(|&y| y <= x) as u64;
        c.greater += below;
        c.ties += not_above - below;
        c.less += sorted.len() as u64 - not_above;
    }
    c
}

/// `P(A > B) + ½·P(A = B)` over all cross pairs.
///
/// The larger side is computed as the complement of the smaller so that
/// `cles(a, b) + cles(b, a) == 1` holds exactly in floating point.
pub fn cles(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("CLES needs two non-empty samples".into()));
    }
    let c = cles_counts(a, b);
    let total = 2 * (c.greater + c.ties + c.less);
    let up = 2 * c.greater + c.ties;
    let down = 2 * c.less + c.ties;
    Ok(if up <= down {
        up as f64 / total as f64
    } else {
        1.0 - down as f64 / total as f64
    })
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_fdr(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (1..=m).rev() {
        let i = order[rank - 1];
        running = running.min(p_values[i] * m as f64 / rank as f64);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub coefficient: f64,
    pub p_value: f64,
    pub n: usize,
}

fn finite_pairs(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::Contract("correlation inputs differ in length".into()));
    }
    let (a, b): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(&a, &b)| (a, b))
        .unzip();
    if a.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: a.len(),
        });
    }
    Ok((a, b))
}

fn pearson_coefficient(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::MetricUndefined("zero variance in correlation input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value from `t = r·√((n−2)/(1−r²))` on `n − 2` degrees of
/// freedom.
fn correlation_p(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    let (a, b) = finite_pairs(x, y)?;
    let r = pearson_coefficient(&a, &b)?;
    Ok(Correlation {
        coefficient: r,
        p_value: correlation_p(r, a.len()),
        n: a.len(),
    })
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    let (a, b) = finite_pairs(x, y)?;
    let rho = pearson_coefficient(&average_ranks(&a), &average_ranks(&b))?;
    Ok(Correlation {
        coefficient: rho,
        p_value: correlation_p(rho, a.len()),
        n: a.len(),
    })
}

/// Star notation: `***` p<0.001, `**` p<0.01, `*` p<0.05, `ns` otherwise.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "ns"
    }
}
