//! Central finite-difference checks for tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_error <= rtol
    }
}

/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` receives one leaf per input and must return a scalar. `coords`
/// optionally restricts which `(input, element)` pairs are perturbed;
/// `None` checks every element.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64, coords: Option<&[(usize, usize)]>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&l, t)| {
            tape.grad(l)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let eval = |which: usize, j: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut d = t.data().to_vec();
                    d[j] += delta;
                    tape.constant(Tensor::new(t.shape().to_vec(), d).expect("same shape"))
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        f(&tape, &leaves)?.value().item()
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &(i, j) in coords {
        let numeric = (eval(i, j, h)? - eval(i, j, -h)?) / (2.0 * h);
        let err = rel_error(analytic[i][j], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((i, j));
        }
        report.checked += 1;
    }
    Ok(report)
}
