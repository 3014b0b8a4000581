use ndcore::{concat_cols, Tape, Tensor, Var};

use super::layers::{Linear, ParamBuilder};
use super::{ForwardCtx, InputVars, ModelSpec};
use crate::error::Result;

/// Stacked LSTM over `[dynamic_t, statics]` with a linear head on the
/// final hidden state. Each cell has one bias per gate.
#[derive(Clone, Debug)]
pub struct Layout {
    cells: Vec<Linear>,
    head: Linear,
    hidden: usize,
}

impl Layout {
    pub fn new(pb: &mut ParamBuilder, spec: &ModelSpec) -> Self {
        let h = spec.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let cells = (0..spec.layers)
            .map(|l| {
                let fan_in = if l == 0 { spec.n_dynamic + spec.n_static } else { h };
                Linear {
                    w: pb.uniform(format!("lstm{l}.weight"), &[fan_in + h, 4 * h], bound),
                    b: pb.uniform(format!("lstm{l}.bias"), &[4 * h], bound),
                }
            })
            .collect();
        let head = pb.linear("head", h, spec.n_targets);
        Layout { cells, head, hidden: h }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        x: &InputVars<'t>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t>> {
        let b = x.batch_size();
        let t_len = x.seq_len;
        let h = self.hidden;
        let zeros = tape.constant(Tensor::zeros(&[b, h]));
        let mut state: Vec<(Var<'t>, Var<'t>)> = vec![(zeros, zeros); self.cells.len()];
        for t in 0..t_len {
            let rows: Vec<Option<usize>> = (0..b).map(|s| Some(s * t_len + t)).collect();
            let mut input = concat_cols(&[x.dynamic.select_rows(&rows)?, x.statics])?;
            for (l, cell) in self.cells.iter().enumerate() {
                let (h_prev, c_prev) = state[l];
                let gates = cell.forward(p, concat_cols(&[input, h_prev])?)?;
                let i = gates.slice_cols(0, h)?.sigmoid();
                let f = gates.slice_cols(h, 2 * h)?.sigmoid();
                let g = gates.slice_cols(2 * h, 3 * h)?.tanh();
                let o = gates.slice_cols(3 * h, 4 * h)?.sigmoid();
                let c = f.mul(c_prev)?.add(i.mul(g)?)?;
                let h_new = o.mul(c.tanh())?;
                state[l] = (h_new, c);
                input = if l + 1 < self.cells.len() {
                    ctx.apply_dropout(tape, h_new)?
                } else {
                    h_new
                };
            }
        }
        let last = state.last().expect("at least one layer").0;
        let last = ctx.apply_dropout(tape, last)?;
        self.head.forward(p, last)
    }
}
