use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wqtrust::metrics::{kge, lowess, lowess_residuals, pbias, simplicity_score, theil_sen};

/// KGE written from its three terms with two-pass moments.
fn kge_oracle(o: &[f64], p: &[f64]) -> f64 {
    let n = o.len() as f64;
    let mo = o.iter().sum::<f64>() / n;
    let mp = p.iter().sum::<f64>() / n;
    let so = (o.iter().map(|x| (x - mo).powi(2)).sum::<f64>() / n).sqrt();
    let sp = (p.iter().map(|x| (x - mp).powi(2)).sum::<f64>() / n).sqrt();
    let cov = o.iter().zip(p).map(|(a, b)| (a - mo) * (b - mp)).sum::<f64>() / n;
    let r = if sp == 0.0 { 0.0 } else { cov / (so * sp) };
    1.0 - ((r - 1.0).powi(2) + (mp / mo - 1.0).powi(2) + (sp / so - 1.0).powi(2)).sqrt()
}

fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let o: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..10.0)).collect();
    let p: Vec<f64> = o.iter().map(|x| x * rng.random_range(0.5..1.5) + rng.random_range(-1.0..1.0)).collect();
    (o, p)
}

#[test]
fn kge_matches_the_three_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (o, p) = random_pair(&mut rng, 50);
        assert!((kge(&o, &p).unwrap().kge - kge_oracle(&o, &p)).abs() < 1e-12);
    }
}

#[test]
fn kge_under_translation_tracks_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (o, p) = random_pair(&mut rng, 40);
    let shift = |v: &[f64]| v.iter().map(|x| x + 7.5).collect::<Vec<_>>();
    let a = kge(&o, &p).unwrap();
    let b = kge(&shift(&o), &shift(&p)).unwrap();
    assert_ne!(a.beta, b.beta);
    assert!((a.r - b.r).abs() < 1e-12);
    assert!((b.kge - kge_oracle(&shift(&o), &shift(&p))).abs() < 1e-12);
}

#[test]
fn perturbed_predictions_score_below_perfect_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let o: Vec<f64> = (0..60).map(|_| rng.random_range(1.0..5.0)).collect();
    let z = Normal::new(0.0, 0.1).unwrap();
    for _ in 0..100 {
        let p: Vec<f64> = o.iter().map(|x| x + z.sample(&mut rng)).collect();
        assert!(kge(&o, &p).unwrap().kge < kge(&o, &o).unwrap().kge);
    }
}

#[test]
fn pbias_matches_direct_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (o, p) = random_pair(&mut rng, 30);
        let so: f64 = o.iter().sum();
        let sp: f64 = p.iter().sum();
        assert!((pbias(&o, &p).unwrap() - 100.0 * (so - sp) / so).abs() < 1e-12);
    }
    assert_eq!(pbias(&[10.0, 10.0], &[11.0, 11.0]).unwrap(), -10.0);
}

#[test]
fn theil_sen_matches_brute_force_and_resists_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..10.0)).collect();
    let y: Vec<f64> = (0..20).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut slopes = Vec::new();
    for i in 0..20 {
        for j in i + 1..20 {
            if x[i] != x[j] {
                slopes.push((y[j] - y[i]) / (x[j] - x[i]));
            }
        }
    }
    slopes.sort_by(f64::total_cmp);
    let m = slopes.len();
    let oracle = if m % 2 == 1 { slopes[m / 2] } else { 0.5 * (slopes[m / 2 - 1] + slopes[m / 2]) };
    assert_eq!(theil_sen(&x, &y).unwrap(), oracle);

    let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let mut y: Vec<f64> = x.iter().map(|v| -1.5 * v + 4.0).collect();
    for i in (0..40).step_by(4) {
        y[i] += if i % 8 == 0 { 1e3 } else { -1e3 };
    }
    assert!((theil_sen(&x, &y).unwrap() + 1.5).abs() < 1e-9);
}

#[test]
fn lowess_residuals_vanish_on_its_own_curve() {
    let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.3).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.4 * v - 2.0).collect();
    for frac in [0.2, 0.5, 1.0] {
        let fit = lowess(&x, &y, frac).unwrap();
        assert!(fit.fitted.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-9));
        let r = lowess_residuals(&x, &fit.fitted, frac).unwrap();
        assert!(r.iter().sum::<f64>().abs() / 30.0 < 1e-9);
    }
}

#[test]
fn white_noise_has_negligible_simplicity_and_regressors_nest() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = Normal::new(0.0, 1.0).unwrap();
    let t: Vec<f64> = (0..1000).map(|i| i as f64).collect();
    let q: Vec<f64> = (0..1000).map(|_| z.sample(&mut rng)).collect();
    let noise: Vec<f64> = (0..1000).map(|_| z.sample(&mut rng)).collect();
    let s = simplicity_score(&noise, &q, &t).unwrap();
    assert!(s.simplicity <= 0.02, "{}", s.simplicity);
    for k in 0..20 {
        let y: Vec<f64> = (0..1000).map(|i| k as f64 * 0.1 * q[i] + noise[i]).collect();
        let s = simplicity_score(&y, &q, &t).unwrap();
        assert!(s.linearity <= s.simplicity + 1e-12);
    }
}
