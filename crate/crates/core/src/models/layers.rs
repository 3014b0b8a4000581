use ndcore::{concat_cols, Tape, Tensor, Var, LEAKY_RELU_SLOPE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Named trainable tensors plus non-trainable buffers, created in a fixed
/// order from a seed.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub buffer_names: Vec<String>,
    pub buffers: Vec<Tensor>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            tensors: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.push(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.buffer_names.push(name);
        self.buffers.push(Tensor::full(shape, value));
        self.buffers.len() - 1
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: self.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound),
            b: self.constant(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    pub fn batch_norm(&mut self, name: &str, width: usize) -> BatchNorm {
        BatchNorm {
            gain: self.constant(format!("{name}.gain"), &[width], 1.0),
            bias: self.constant(format!("{name}.bias"), &[width], 0.0),
            running_mean: self.buffer(format!("{name}.running_mean"), &[width], 0.0),
            running_var: self.buffer(format!("{name}.running_var"), &[width], 1.0),
        }
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> LayerNorm {
        LayerNorm {
            gain: self.constant(format!("{name}.gain"), &[width], 1.0),
            bias: self.constant(format!("{name}.bias"), &[width], 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul(p[self.w])?.add_row(p[self.b])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm_rows(LN_EPS)?.mul_row(p[self.gain])?.add_row(p[self.bias])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gain: usize,
    pub bias: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

/// Batch mean and population variance of one BatchNorm input, recorded so
/// the caller can update the running statistics after the step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub buffer_mean: usize,
    pub buffer_var: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        buffers: &[Tensor],
        x: Var<'t>,
        training: bool,
        moments: &mut Vec<BatchMoments>,
    ) -> Result<Var<'t>> {
        let normalized = if training {
            let v = x.value();
            let (rows, cols) = (v.rows(), v.cols());
            let mut mean = vec![0.0; cols];
            let mut var = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    mean[c] += v.get2(r, c);
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            for r in 0..rows {
                for c in 0..cols {
                    let d = v.get2(r, c) - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            moments.push(BatchMoments {
                buffer_mean: self.running_mean,
                buffer_var: self.running_var,
                mean,
                var,
            });
            x.batch_norm_cols(BN_EPS)?
        } else {
            let mean = buffers[self.running_mean].map(|m| -m);
            let inv_sd = buffers[self.running_var].map(|v| 1.0 / (v + BN_EPS).sqrt());
            x.add_row(tape.constant(mean))?.mul_row(tape.constant(inv_sd))?
        };
        Ok(normalized.mul_row(p[self.gain])?.add_row(p[self.bias])?)
    }
}

/// Exponential moving update of the running statistics.
pub fn update_running_stats(buffers: &mut [Tensor], moments: &[BatchMoments], rows: usize) {
    for m in moments {
        let unbiased = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
        let mean: Vec<f64> = buffers[m.buffer_mean]
            .data()
            .iter()
            .zip(&m.mean)
            .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
            .collect();
        let var: Vec<f64> = buffers[m.buffer_var]
            .data()
            .iter()
            .zip(&m.var)
            .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * unbiased)
            .collect();
        buffers[m.buffer_mean] = Tensor::vector(mean);
        buffers[m.buffer_var] = Tensor::vector(var);
    }
}

/// Linear, BatchNorm, LeakyReLU.
#[derive(Clone, Copy, Debug)]
pub struct MlpBlock {
    pub linear: Linear,
    pub norm: BatchNorm,
}

impl MlpBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        MlpBlock {
            linear: pb.linear(&format!("{name}.linear"), fan_in, fan_out),
            norm: pb.batch_norm(&format!("{name}.bn"), fan_out),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        buffers: &[Tensor],
        x: Var<'t>,
        training: bool,
        moments: &mut Vec<BatchMoments>,
    ) -> Result<Var<'t>> {
        let h = self.linear.forward(p, x)?;
        let h = self.norm.forward(tape, p, buffers, h, training, moments)?;
        Ok(h.leaky_relu(LEAKY_RELU_SLOPE))
    }
}

/// Inverted dropout: zeroes each entry with probability `p` and rescales
/// the survivors by `1/(1−p)`.
pub fn dropout<'t>(tape: &'t Tape, x: Var<'t>, p: f64, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    Ok(x.mul(tape.constant(Tensor::new(shape, mask)?))?)
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize, heads: usize) -> Self {
        MultiHeadAttention {
            q: pb.linear(&format!("{name}.q"), width, width),
            k: pb.linear(&format!("{name}.k"), width, width),
            v: pb.linear(&format!("{name}.v"), width, width),
            out: pb.linear(&format!("{name}.out"), width, width),
            heads,
        }
    }

    /// Full self-attention over the rows of `x`. Per-head weight matrices
    /// are appended to `weights` when given.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, weights: Option<&mut Vec<Tensor>>) -> Result<Var<'t>> {
        let width = x.value().cols();
        let dk = width / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, x)?;
        let v = self.v.forward(p, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut sink = weights;
        for h in 0..self.heads {
            let (a, b) = (h * dk, (h + 1) * dk);
            let scores = q.slice_cols(a, b)?.matmul(k.slice_cols(a, b)?.transpose()?)?.scale(scale);
            let attn = scores.softmax_rows()?;
            if let Some(w) = sink.as_deref_mut() {
                w.push((*attn.value()).clone());
            }
            outs.push(attn.matmul(v.slice_cols(a, b)?)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { concat_cols(&outs)? };
        self.out.forward(p, merged)
    }
}

/// Sinusoidal absolute position encoding, `[len × width]`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * width);
    for pos in 0..len {
        for i in 0..width {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / width as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(len, width, data).expect("shape matches data")
}
