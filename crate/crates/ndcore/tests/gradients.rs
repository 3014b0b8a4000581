use ndcore::gradcheck::check;
use ndcore::{concat_cols, concat_rows, Elementwise, Tape, Tensor, Var, LEAKY_RELU_SLOPE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const RTOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Weighted sum keeps every output element in the loss with a distinct
/// coefficient so symmetric mistakes do not cancel.
fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>) -> ndcore::Result<Var<'t>> {
    let v = y.value();
    let w: Vec<f64> = (0..v.numel()).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect();
    let w = tape.constant(Tensor::new(v.shape().to_vec(), w)?);
    Ok(y.mul(w)?.sum())
}

fn assert_gradients<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> ndcore::Result<Var<'t>>,
{
    let report = check(f, inputs, H, None).unwrap();
    assert!(
        report.passes(RTOL),
        "{name}: max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let binary = [Elementwise::Add, Elementwise::Sub, Elementwise::Mul, Elementwise::Div];
    let unary = [
        Elementwise::Exp,
        Elementwise::Log,
        Elementwise::Tanh,
        Elementwise::Sigmoid,
        Elementwise::Gelu,
        Elementwise::LeakyRelu(LEAKY_RELU_SLOPE),
    ];
    for trial in 0..20 {
        let a = random(&mut rng, &[3, 4]);
        let b = positive(&mut rng, &[3, 4]);
        for op in binary {
            assert_gradients(
                &format!("{op:?} #{trial}"),
                move |t, x| weighted_sum(t, x[0].elementwise(op, Some(x[1]))?),
                &[a.clone(), b.clone()],
            );
        }
        for op in unary {
            let input = if op == Elementwise::Log { b.clone() } else { a.clone() };
            assert_gradients(
                &format!("{op:?} #{trial}"),
                move |t, x| weighted_sum(t, x[0].elementwise(op, None)?),
                &[input],
            );
        }
        let s = random(&mut rng, &[]);
        assert_gradients(
            "scalar broadcast",
            |t, x| weighted_sum(t, x[0].mul(x[1])?.sub(x[1])?),
            &[a.clone(), s],
        );
        assert_gradients(
            "misc unary",
            |t, x| weighted_sum(t, x[0].square().scale(0.7).add_scalar(1.5).sqrt()?.neg()),
            &[a.clone()],
        );
        assert_gradients("sqrt", |t, x| weighted_sum(t, x[0].sqrt()?), &[b.clone()]);
    }
}

#[test]
fn matrix_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..20 {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 5]);
        let r = random(&mut rng, &[5]);
        let name = |s: &str| format!("{s} #{trial}");
        assert_gradients(&name("matmul"), |t, x| weighted_sum(t, x[0].matmul(x[1])?), &[a.clone(), b.clone()]);
        assert_gradients(&name("transpose"), |t, x| weighted_sum(t, x[0].transpose()?), &[a.clone()]);
        assert_gradients(
            &name("add_row/mul_row"),
            |t, x| weighted_sum(t, x[0].matmul(x[1])?.add_row(x[2])?.mul_row(x[2])?),
            &[a.clone(), b.clone(), r.clone()],
        );
        assert_gradients(&name("sum_rows"), |t, x| weighted_sum(t, x[0].sum_rows()?), &[a.clone()]);
        assert_gradients(&name("mean_rows"), |t, x| weighted_sum(t, x[0].mean_rows()?), &[a.clone()]);
        assert_gradients(&name("mean"), |_, x| Ok(x[0].square().mean()), &[a.clone()]);
        assert_gradients(
            &name("select_rows"),
            |t, x| weighted_sum(t, x[0].select_rows(&[Some(2), None, Some(0), Some(2)])?),
            &[a.clone()],
        );
        assert_gradients(
            &name("slice/concat"),
            |t, x| {
                let left = x[0].slice_cols(1, 3)?;
                let right = x[1].slice_cols(0, 2)?.select_rows(&[Some(0), Some(3), Some(1)])?;
                let wide = concat_cols(&[left, right])?;
                weighted_sum(t, concat_rows(&[wide, x[0]])?)
            },
            &[a.clone(), b.clone()],
        );
        assert_gradients(&name("softmax_rows"), |t, x| weighted_sum(t, x[0].softmax_rows()?), &[a.clone()]);
        assert_gradients(&name("layer_norm_rows"), |t, x| weighted_sum(t, x[0].layer_norm_rows(1e-5)?), &[a.clone()]);
        assert_gradients(&name("batch_norm_cols"), |t, x| weighted_sum(t, x[0].batch_norm_cols(1e-5)?), &[a.clone()]);
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let x = random(&mut rng, &[4, 3]);
        let w1 = random(&mut rng, &[3, 5]);
        let b1 = random(&mut rng, &[5]);
        let w2 = random(&mut rng, &[5, 2]);
        assert_gradients(
            "mlp",
            |t, v| {
                let h = v[0].matmul(v[1])?.add_row(v[2])?.gelu();
                let h = h.layer_norm_rows(1e-5)?.tanh();
                let y = h.matmul(v[3])?.sigmoid();
                weighted_sum(t, y.mul(y)?)
            },
            &[x.clone(), w1, b1, w2],
        );
    }
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.get2(i, p) * b.get2(p, j);
            }
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let a = random(&mut rng, &[3, 3]);
        let b = random(&mut rng, &[3, 3]);
        let c = a.matmul(&b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_is_associative_on_well_conditioned_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let shift = |t: Tensor| {
            let mut d = t.into_data();
            for i in 0..4 {
                d[i * 4 + i] += 4.0;
            }
            Tensor::matrix(4, 4, d).unwrap()
        };
        let a = shift(random(&mut rng, &[4, 4]));
        let b = shift(random(&mut rng, &[4, 4]));
        let c = shift(random(&mut rng, &[4, 4]));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }
}

fn gradient_run(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let x = tape.leaf(random(&mut rng, &[5, 4]));
    let w = tape.leaf(random(&mut rng, &[4, 3]));
    let loss = x.matmul(w).unwrap().softmax_rows().unwrap().square().sum();
    tape.backward(loss).unwrap();
    let mut g = tape.grad(x).unwrap().into_data();
    g.extend(tape.grad(w).unwrap().into_data());
    g
}

#[test]
fn identical_seeds_give_bit_identical_gradients() {
    let a = gradient_run(99);
    let b = gradient_run(99);
    assert_eq!(
        a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn linear_layer_gradient_is_analytic(
        x in prop::collection::vec(-2.0f64..2.0, 6),
        w in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        // loss = sum(x·w) for x[2×3], w[3×2] → dL/dx[i,p] = Σ_j w[p,j]
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::matrix(2, 3, x).unwrap());
        let wv = tape.leaf(Tensor::matrix(3, 2, w.clone()).unwrap());
        let loss = xv.matmul(wv).unwrap().sum();
        tape.backward(loss).unwrap();
        let gx = tape.grad(xv).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let expected = w[p * 2] + w[p * 2 + 1];
                prop_assert!((gx.get2(i, p) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new();
        let v = tape.constant(Tensor::matrix(3, 4, x).unwrap());
        let p = v.softmax_rows().unwrap().value();
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
