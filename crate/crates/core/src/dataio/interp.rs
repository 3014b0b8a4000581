//! Gap filling for coarse-resolution inputs: weekly step hold and natural
//! cubic spline interpolation of 8-day composites.

/// Longest gap after an observation that the weekly hold bridges.
pub const WEEKLY_HOLD_DAYS: usize = 6;

/// Forward-fills each observation over the following
/// [`WEEKLY_HOLD_DAYS`] missing days.
pub fn weekly_hold(values: &mut [f64]) {
    let mut last: Option<(usize, f64)> = None;
    for (t, v) in values.iter_mut().enumerate() {
        if v.is_finite() {
            last = Some((t, *v));
        } else if let Some((t0, x)) = last {
            if t - t0 <= WEEKLY_HOLD_DAYS {
                *v = x;
            }
        }
    }
}

/// Natural cubic spline through `(x, y)` with strictly increasing `x`.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let mut m = vec![0.0; n];
        if n >= 3 {
            // Thomas algorithm on the interior second derivatives
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let f = lower / diag[i - 1];
                diag[i] -= f * upper[i - 1];
                rhs[i] -= f * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        NaturalSpline { x, y, m }
    }

    /// Value at `t`; outside the knot range the end values are held.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if n == 0 {
            return f64::NAN;
        }
        if n == 1 || t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = self.x.partition_point(|&v| v <= t) - 1;
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Fills every missing day from a spline through the observed days.
pub fn spline_fill(values: &mut [f64]) {
    let (x, y): (Vec<f64>, Vec<f64>) = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(t, &v)| (t as f64, v))
        .unzip();
    if x.is_empty() || x.len() == values.len() {
        return;
    }
    let spline = NaturalSpline::new(x, y);
    for (t, v) in values.iter_mut().enumerate() {
        if !v.is_finite() {
            *v = spline.eval(t as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hold_bridges_six_days_only() {
        let mut v = vec![f64::NAN; 16];
        v[1] = 2.0;
        weekly_hold(&mut v);
        assert!(v[0].is_nan());
        assert!(v[1..8].iter().all(|&x| x == 2.0));
        assert!(v[8].is_nan());
    }

    #[test]
    fn spline_reproduces_linear_data_and_knots() {
        let x: Vec<f64> = (0..6).map(|i| (i * 8) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.25 * v).collect();
        let s = NaturalSpline::new(x.clone(), y.clone());
        for t in 0..41 {
            assert!((s.eval(t as f64) - (3.0 - 0.25 * t as f64)).abs() < 1e-12);
        }
        let y2: Vec<f64> = x.iter().map(|v| (v / 7.0).sin()).collect();
        let s2 = NaturalSpline::new(x.clone(), y2.clone());
        for (a, b) in x.iter().zip(&y2) {
            assert!((s2.eval(*a) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_is_twice_differentiable_at_knots() {
        let x = vec![0.0, 8.0, 16.0, 24.0, 32.0];
        let y = vec![1.0, 3.0, 2.0, 5.0, 4.0];
        let s = NaturalSpline::new(x, y);
        let h = 1e-4;
        for k in [8.0, 16.0, 24.0] {
            let left = (s.eval(k) - s.eval(k - h)) / h;
            let right = (s.eval(k + h) - s.eval(k)) / h;
            assert!((left - right).abs() < 1e-3);
        }
    }

    #[test]
    fn spline_fill_leaves_observed_values() {
        let mut v: Vec<f64> = (0..25).map(|t| if t % 8 == 0 { t as f64 } else { f64::NAN }).collect();
        spline_fill(&mut v);
        for (t, x) in v.iter().enumerate() {
            assert!((x - t as f64).abs() < 1e-12 || t > 24);
        }
    }
}
