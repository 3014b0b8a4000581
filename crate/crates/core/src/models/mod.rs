//! The recurrent, operator-learning and attention regressors, their
//! shared trainer and the checkpoint format.

mod attention;
mod checkpoint;
pub mod layers;
mod operator;
mod recurrent;
mod train;

use ndcore::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::NormStats;
use crate::error::{Error, Result};
use layers::{BatchMoments, ParamBuilder};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{masked_mse, train, LrSchedule, OptimizerKind, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Recurrent,
    Operator,
    Attention,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Recurrent, Family::Operator, Family::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Family::Recurrent => "recurrent",
            Family::Operator => "operator",
            Family::Attention => "attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub seq_len: usize,
    #[serde(default)]
    pub decoder_window: usize,
    pub hidden: usize,
    pub layers: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub ff_dim: usize,
    #[serde(default)]
    pub n_dynamic: usize,
    #[serde(default)]
    pub n_static: usize,
    #[serde(default)]
    pub n_targets: usize,
}

fn default_heads() -> usize {
    1
}

impl ModelSpec {
    /// Desk-scale defaults with the published layer topology.
    pub fn desk(family: Family, n_dynamic: usize, n_static: usize, n_targets: usize) -> Self {
        let (seq_len, layers, dropout, heads) = match family {
            Family::Recurrent => (60, 2, 0.3, 1),
            Family::Operator => (1, 7, 0.0, 1),
            Family::Attention => (60, 3, 0.0, 4),
        };
        ModelSpec {
            family,
            seq_len,
            decoder_window: if family == Family::Attention { 16 } else { 0 },
            hidden: 64,
            layers,
            dropout,
            heads,
            ff_dim: 128,
            n_dynamic,
            n_static,
            n_targets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.hidden == 0 || self.seq_len == 0 || self.layers == 0 {
            return bad("hidden, seq_len and layers must be at least 1".into());
        }
        if self.n_dynamic == 0 || self.n_targets == 0 {
            return bad("model needs dynamic inputs and targets".into());
        }
        match self.family {
            Family::Recurrent => {}
            Family::Operator => {
                if self.hidden < 4 {
                    return bad("operator hidden width must be at least 4".into());
                }
            }
            Family::Attention => {
                if self.heads == 0 || self.hidden % self.heads != 0 {
                    return bad(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
                }
                if self.ff_dim == 0 {
                    return bad("attention ff_dim must be at least 1".into());
                }
                if self.decoder_window >= self.seq_len {
                    return bad(format!(
                        "decoder window {} must be shorter than the sequence length {}",
                        self.decoder_window, self.seq_len
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One prediction problem in normalized space: the input window ending on
/// the prediction day, static attributes, coordinates and the target row.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub basin: usize,
    pub day: usize,
    /// `seq_len × F_d`, row-major; the last row is the prediction day.
    pub window: Vec<f64>,
    pub statics: Vec<f64>,
    pub coords: [f64; 2],
    /// NaN where unobserved.
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    /// `[size·seq_len × F_d]`, sample-major.
    pub dynamic: Tensor,
    pub statics: Tensor,
    pub coords: Tensor,
    pub targets: Vec<f64>,
    pub n_targets: usize,
}

impl Batch {
    pub fn new<'a>(samples: impl IntoIterator<Item = &'a Sample>, seq_len: usize) -> Result<Self> {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let f_d = first.window.len() / seq_len;
        let (f_s, n_t) = (first.statics.len(), first.target.len());
        let mut dynamic = Vec::with_capacity(samples.len() * seq_len * f_d);
        let mut statics = Vec::with_capacity(samples.len() * f_s);
        let mut coords = Vec::with_capacity(samples.len() * 2);
        let mut targets = Vec::with_capacity(samples.len() * n_t);
        for s in &samples {
            if s.window.len() != seq_len * f_d || s.statics.len() != f_s || s.target.len() != n_t {
                return Err(Error::Contract("samples in a batch differ in shape".into()));
            }
            dynamic.extend_from_slice(&s.window);
            statics.extend_from_slice(&s.statics);
            coords.extend_from_slice(&s.coords);
            targets.extend_from_slice(&s.target);
        }
        let b = samples.len();
        Ok(Batch {
            size: b,
            seq_len,
            dynamic: Tensor::matrix(b * seq_len, f_d, dynamic)?,
            statics: Tensor::matrix(b, f_s, statics)?,
            coords: Tensor::matrix(b, 2, coords)?,
            targets,
            n_targets: n_t,
        })
    }
}

/// Model inputs on a tape, so callers choose which of them carry
/// gradients.
#[derive(Clone, Copy)]
pub struct InputVars<'t> {
    pub dynamic: Var<'t>,
    pub statics: Var<'t>,
    pub coords: Var<'t>,
    pub seq_len: usize,
}

impl<'t> InputVars<'t> {
    pub fn constants(tape: &'t Tape, batch: &Batch) -> Self {
        InputVars {
            dynamic: tape.constant(batch.dynamic.clone()),
            statics: tape.constant(batch.statics.clone()),
            coords: tape.constant(batch.coords.clone()),
            seq_len: batch.seq_len,
        }
    }

    pub fn leaves(tape: &'t Tape, batch: &Batch) -> Self {
        InputVars {
            dynamic: tape.leaf(batch.dynamic.clone()),
            statics: tape.leaf(batch.statics.clone()),
            coords: tape.leaf(batch.coords.clone()),
            seq_len: batch.seq_len,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.statics.value().rows()
    }
}

/// Per-call switches for a forward pass.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
    pub moments: Vec<BatchMoments>,
    pub attention: Option<Vec<Tensor>>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            dropout: 0.0,
            rng: None,
            moments: Vec::new(),
            attention: None,
        }
    }

    pub fn training(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx {
            training: true,
            dropout,
            rng: Some(rng),
            moments: Vec::new(),
            attention: None,
        }
    }

    /// Inference with dropout active at rate `p`.
    pub fn mc_dropout(p: f64, rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx {
            training: false,
            dropout: p,
            rng: Some(rng),
            moments: Vec::new(),
            attention: None,
        }
    }

    pub(crate) fn apply_dropout<'t>(&mut self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => layers::dropout(tape, x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Recurrent(recurrent::Layout),
    Operator(operator::Layout),
    Attention(attention::Layout),
}

/// A parameter set for one [`ModelSpec`], with the normalization
/// statistics it was trained under.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    pub param_names: Vec<String>,
    pub params: Vec<Tensor>,
    pub buffer_names: Vec<String>,
    pub buffers: Vec<Tensor>,
    pub norm_stats: Option<NormStats>,
    arch: Arch,
}

pub type TrainedModel = Model;

/// Deterministic initialization from `seed`.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut pb = ParamBuilder::new(seed);
    let arch = match spec.family {
        Family::Recurrent => Arch::Recurrent(recurrent::Layout::new(&mut pb, spec)),
        Family::Operator => Arch::Operator(operator::Layout::new(&mut pb, spec)),
        Family::Attention => Arch::Attention(attention::Layout::new(&mut pb, spec)),
    };
    Ok(Model {
        spec: spec.clone(),
        seed,
        param_names: pb.names,
        params: pb.tensors,
        buffer_names: pb.buffer_names,
        buffers: pb.buffers,
        norm_stats: None,
        arch,
    })
}

impl Model {
    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    pub fn param_constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    pub fn param_leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Output `[B × n_targets]` in normalized space.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        inputs: &InputVars<'t>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t>> {
        let rows = inputs.dynamic.value().rows();
        let b = inputs.batch_size();
        if inputs.seq_len != self.spec.seq_len || rows != b * self.spec.seq_len {
            return Err(ndcore::TensorError::dim(
                "model input",
                &[b * self.spec.seq_len, self.spec.n_dynamic],
                &[rows, inputs.dynamic.value().cols()],
            )
            .into());
        }
        if inputs.dynamic.value().cols() != self.spec.n_dynamic || inputs.statics.value().cols() != self.spec.n_static {
            return Err(ndcore::TensorError::dim(
                "model input features",
                &[self.spec.n_dynamic, self.spec.n_static],
                &[inputs.dynamic.value().cols(), inputs.statics.value().cols()],
            )
            .into());
        }
        match &self.arch {
            Arch::Recurrent(l) => l.forward(tape, params, inputs, ctx),
            Arch::Operator(l) => l.forward(tape, params, &self.buffers, inputs, ctx),
            Arch::Attention(l) => l.forward(tape, params, inputs, ctx),
        }
    }

    /// Deterministic inference.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.param_constants(&tape);
        let x = InputVars::constants(&tape, batch);
        let out = self.forward(&tape, &p, &x, &mut ForwardCtx::eval())?;
        Ok((*out.value()).clone())
    }

    /// Inference with dropout at rate `p` on every dropout site.
    pub fn predict_with_dropout(&self, batch: &Batch, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.param_constants(&tape);
        let x = InputVars::constants(&tape, batch);
        let out = self.forward(&tape, &params, &x, &mut ForwardCtx::mc_dropout(p, rng))?;
        Ok((*out.value()).clone())
    }

    /// Per-head attention weights of every attention layer, in call order.
    pub fn attention_weights(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let p = self.param_constants(&tape);
        let x = InputVars::constants(&tape, batch);
        let mut ctx = ForwardCtx::eval();
        ctx.attention = Some(Vec::new());
        self.forward(&tape, &p, &x, &mut ctx)?;
        Ok(ctx.attention.unwrap_or_default())
    }

    pub fn supports_dropout(&self) -> bool {
        self.spec.family == Family::Recurrent
    }
}

/// A differentiable map from model inputs to `[B × n_outputs]`, as needed
/// by input-gradient methods.
pub trait Regressor: Sync {
    fn seq_len(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn forward_inputs<'t>(&self, tape: &'t Tape, inputs: &InputVars<'t>) -> Result<Var<'t>>;
}

impl Regressor for Model {
    fn seq_len(&self) -> usize {
        self.spec.seq_len
    }

    fn n_outputs(&self) -> usize {
        self.spec.n_targets
    }

    fn forward_inputs<'t>(&self, tape: &'t Tape, inputs: &InputVars<'t>) -> Result<Var<'t>> {
        let p = self.param_constants(tape);
        self.forward(tape, &p, inputs, &mut ForwardCtx::eval())
    }
}
