use ndcore::{concat_cols, Tape, Tensor, Var};

use super::layers::{Linear, MlpBlock, ParamBuilder};
use super::{ForwardCtx, InputVars, ModelSpec};
use crate::error::Result;

/// Branch network on same-day forcings plus statics, trunk network on
/// coordinates, fused by elementwise product and decoded by the D network.
#[derive(Clone, Debug)]
pub struct Layout {
    branch: Vec<MlpBlock>,
    trunk: Vec<MlpBlock>,
    decoder: Vec<MlpBlock>,
    out: Linear,
}

/// Blocks in the D network.
pub const DECODER_BLOCKS: usize = 2;

impl Layout {
    pub fn new(pb: &mut ParamBuilder, spec: &ModelSpec) -> Self {
        let h = spec.hidden;
        let stack = |pb: &mut ParamBuilder, name: &str, fan_in: usize| -> Vec<MlpBlock> {
            (0..spec.layers)
                .map(|l| MlpBlock::new(pb, &format!("{name}{l}"), if l == 0 { fan_in } else { h }, h))
                .collect()
        };
        let branch = stack(pb, "branch", spec.n_dynamic + spec.n_static);
        let trunk = stack(pb, "trunk", 2);
        let widths = [h, h / 2, h / 4];
        let decoder = (0..DECODER_BLOCKS)
            .map(|l| MlpBlock::new(pb, &format!("d{l}"), widths[l], widths[l + 1]))
            .collect();
        let out = pb.linear("d_out", widths[DECODER_BLOCKS], spec.n_targets);
        Layout {
            branch,
            trunk,
            decoder,
            out,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        buffers: &[Tensor],
        x: &InputVars<'t>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t>> {
        let b = x.batch_size();
        let t_len = x.seq_len;
        let today: Vec<Option<usize>> = (0..b).map(|s| Some(s * t_len + t_len - 1)).collect();
        let training = ctx.training;
        let mut u = concat_cols(&[x.dynamic.select_rows(&today)?, x.statics])?;
        for block in &self.branch {
            u = block.forward(tape, p, buffers, u, training, &mut ctx.moments)?;
        }
        let mut v = x.coords;
        for block in &self.trunk {
            v = block.forward(tape, p, buffers, v, training, &mut ctx.moments)?;
        }
        let mut z = u.mul(v)?;
        for block in &self.decoder {
            z = block.forward(tape, p, buffers, z, training, &mut ctx.moments)?;
        }
        self.out.forward(p, z)
    }
}
