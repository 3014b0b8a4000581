use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wqtrust::stats::{
    average_ranks, bh_fdr, cles, cles_counts, ClesCounts, spearman, wilcoxon_signed_rank, Alternative, PMethod, WilcoxonMode,
};

/// Tail probabilities of W⁺ by listing every sign pattern.
fn signed_rank_enumeration(diffs: &[f64], alternative: Alternative) -> f64 {
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let observed: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let n = diffs.len();
    let (mut ge, mut le) = (0u64, 0u64);
    for pattern in 0u64..1 << n {
        let w: f64 = (0..n).filter(|i| pattern & (1 << i) != 0).map(|i| ranks[i]).sum();
        if w >= observed {
            ge += 1;
        }
        if w <= observed {
            le += 1;
        }
    }
    let total = (1u64 << n) as f64;
    let (up, lo) = (ge as f64 / total, le as f64 / total);
    match alternative {
        Alternative::Greater => up,
        Alternative::Less => lo,
        Alternative::TwoSided => (2.0 * up.min(lo)).min(1.0),
    }
}

#[test]
fn exact_wilcoxon_equals_sign_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=12 {
        for _ in 0..5 {
            // integer-valued magnitudes so ties occur
            let d: Vec<f64> = (0..n)
                .map(|_| rng.random_range(1..6) as f64 * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            for alt in [Alternative::Greater, Alternative::Less, Alternative::TwoSided] {
                let r = wilcoxon_signed_rank(&d, alt, WilcoxonMode::Auto).unwrap();
                assert_eq!(r.method, PMethod::Exact);
                assert_eq!(r.p_value, signed_rank_enumeration(&d, alt), "n={n} {d:?}");
            }
        }
    }
    let p = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Alternative::Greater, WilcoxonMode::Auto).unwrap();
    assert_eq!(p.p_value, 1.0 / 64.0);
}

#[test]
fn exact_and_normal_paths_agree_at_the_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let d: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.2)).collect();
        let e = wilcoxon_signed_rank(&d, Alternative::TwoSided, WilcoxonMode::Exact).unwrap();
        let a = wilcoxon_signed_rank(&d, Alternative::TwoSided, WilcoxonMode::Normal).unwrap();
        assert!((e.p_value - a.p_value).abs() < 0.01, "{} vs {}", e.p_value, a.p_value);
    }
}

#[test]
fn cles_matches_pair_counting_and_is_dual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..30).map(|_| rng.random_range(0..10) as f64).collect();
    let b: Vec<f64> = (0..30).map(|_| rng.random_range(0..10) as f64).collect();
    let (mut greater, mut ties, mut less) = (0u64, 0u64, 0u64);
    for x in &a {
        for y in &b {
            if x > y {
                greater += 1;
            } else if x == y {
                ties += 1;
            } else {
                less += 1;
            }
        }
    }
    assert_eq!(cles_counts(&a, &b), ClesCounts { greater, ties, less });
    let score = (greater as f64 + 0.5 * ties as f64) / 900.0;
    assert!((cles(&a, &b).unwrap() - score).abs() <= f64::EPSILON);
    assert_eq!(cles(&a, &b).unwrap() + cles(&b, &a).unwrap(), 1.0);
}

#[test]
fn bh_matches_its_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..0.2)).collect();
    let m = p.len();
    let adjusted = bh_fdr(&p).unwrap();
    for i in 0..m {
        let oracle = (0..m)
            .filter(|&j| p[j] >= p[i])
            .map(|j| {
                let rank = p.iter().filter(|&&q| q <= p[j]).count();
                p[j] * m as f64 / rank as f64
            })
            .fold(1.0f64, f64::min);
        assert_eq!(adjusted[i], oracle);
        assert!(adjusted[i] >= p[i]);
    }
    let got = bh_fdr(&[0.01, 0.04, 0.03]).unwrap();
    for (g, e) in got.iter().zip([0.03, 0.04, 0.04]) {
        assert!((g - e).abs() < 1e-15);
    }
}

#[test]
fn spearman_uses_average_ranks_and_ignores_monotone_maps() {
    let x = [1.0, 2.0, 2.0, 3.0, 5.0];
    let y = [2.0, 1.0, 4.0, 4.0, 6.0];
    let rx = [1.0, 2.5, 2.5, 4.0, 5.0];
    let ry = [2.0, 1.0, 3.5, 3.5, 5.0];
    let m = 3.0;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - m) * (a - m)).sum();
    let syy: f64 = ry.iter().map(|b| (b - m) * (b - m)).sum();
    let rho = spearman(&x, &y).unwrap().coefficient;
    assert!((rho - sxy / (sxx * syy).sqrt()).abs() < 1e-15);
    let cubed: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 1.0).collect();
    let logged: Vec<f64> = y.iter().map(|v: &f64| v.ln()).collect();
    assert_eq!(spearman(&cubed, &logged).unwrap().coefficient, rho);
}
