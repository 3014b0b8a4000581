use ndcore::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::update_running_stats;
use super::{Batch, ForwardCtx, InputVars, Model, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Decoupled weight decay.
    AdamW,
    /// Weight decay folded into the gradient.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    Step { decay: f64, every: usize },
    Cosine { min_lr: f64 },
}

impl LrSchedule {
    /// Learning rate for zero-based `epoch` out of `epochs`.
    pub fn lr(&self, lr0: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => lr0,
            LrSchedule::Step { decay, every } => lr0 * decay.powi((epoch / every.max(1)) as i32),
            LrSchedule::Cosine { min_lr } => {
                if epochs <= 1 {
                    return lr0;
                }
                let progress = epoch as f64 / (epochs - 1) as f64;
                min_lr + 0.5 * (lr0 - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}
fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}
fn default_weight_decay() -> f64 {
    0.01
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let LrSchedule::Step { every: 0, .. } = self.schedule {
            return Err(Error::Config("step schedule needs every >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean masked MSE per epoch, weighted by observed entries.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mean squared error over observed target entries, with the observed
/// count. `None` when nothing in the batch is observed.
pub fn masked_mse<'t>(tape: &'t Tape, pred: Var<'t>, targets: &[f64]) -> Result<Option<(Var<'t>, usize)>> {
    let shape = pred.shape();
    let count = targets.iter().filter(|v| v.is_finite()).count();
    if count == 0 {
        return Ok(None);
    }
    let y: Vec<f64> = targets.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    let m: Vec<f64> = targets.iter().map(|v| if v.is_finite() { 1.0 } else { 0.0 }).collect();
    let y = tape.constant(Tensor::new(shape.clone(), y)?);
    let m = tape.constant(Tensor::new(shape, m)?);
    let diff = pred.sub(y)?.mul(m)?;
    Ok(Some((diff.square().sum().scale(1.0 / count as f64), count)))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[Tensor]) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64, kind: OptimizerKind, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let mut data = std::mem::replace(p, Tensor::scalar(0.0)).into_data();
            let shape_len = data.len();
            for i in 0..shape_len {
                let mut gi = g.data()[i];
                match kind {
                    OptimizerKind::AdamW => data[i] -= lr * wd * data[i],
                    OptimizerKind::Adam => gi += wd * data[i],
                }
                self.m[k][i] = ADAM_BETA1 * self.m[k][i] + (1.0 - ADAM_BETA1) * gi;
                self.v[k][i] = ADAM_BETA2 * self.v[k][i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = self.m[k][i] / bc1;
                let vhat = self.v[k][i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            *p = Tensor::new(g.shape().to_vec(), data).expect("gradient shape matches parameter");
        }
    }
}

/// Minibatch training on materialized samples. Shuffling and dropout
/// masks are drawn from streams seeded by `seed`.
pub fn train(model: &mut Model, samples: &[Sample], config: &TrainConfig, seed: u64) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(config.lr, epoch, config.epochs);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::new(chunk.iter().map(|&i| &samples[i]), model.spec.seq_len)?;
            let tape = Tape::new();
            let params = model.param_leaves(&tape);
            let inputs = InputVars::constants(&tape, &batch);
            let mut ctx = ForwardCtx::training(model.spec.dropout, &mut dropout_rng);
            let pred = model.forward(&tape, &params, &inputs, &mut ctx)?;
            let Some((loss, n)) = masked_mse(&tape, pred, &batch.targets)? else {
                continue;
            };
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::Contract(format!("non-finite training loss at epoch {epoch}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = params.iter().map(|p| tape.grad(*p)).collect();
            let moments = std::mem::take(&mut ctx.moments);
            drop(ctx);
            opt.step(&mut model.params, &grads, lr, config.optimizer, config.weight_decay);
            update_running_stats(&mut model.buffers, &moments, batch.size);
            total += value * n as f64;
            count += n;
            report.steps += 1;
        }
        report.epoch_losses.push(if count > 0 { total / count as f64 } else { f64::NAN });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule_is_exact() {
        let s = LrSchedule::Step { decay: 0.5, every: 100 };
        assert_eq!(s.lr(1e-3, 0, 300), 1e-3);
        assert_eq!(s.lr(1e-3, 99, 300), 1e-3);
        assert_eq!(s.lr(1e-3, 100, 300), 5e-4);
        assert_eq!(s.lr(1e-3, 250, 300), 2.5e-4);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { min_lr: 1e-6 };
        assert_eq!(s.lr(1e-4, 0, 300), 1e-4);
        assert!((s.lr(1e-4, 299, 300) - 1e-6).abs() < 1e-18);
        assert!(s.lr(1e-4, 150, 300) < 1e-4);
    }

    #[test]
    fn masked_loss_ignores_missing_entries() {
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 5.0, 2.0, 0.0]).unwrap());
        let (loss, n) = masked_mse(&tape, pred, &[0.0, f64::NAN, 1.0, f64::NAN]).unwrap().unwrap();
        assert_eq!(n, 2);
        assert_eq!(loss.value().item().unwrap(), 1.0);
        tape.backward(loss).unwrap();
        let g = tape.grad(pred).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert!(masked_mse(&tape, pred, &[f64::NAN; 4]).unwrap().is_none());
    }
}
