use ndcore::{concat_cols, concat_rows, Tape, Var};

use super::layers::{positional_encoding, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};
use super::{ForwardCtx, InputVars, ModelSpec};
use crate::error::Result;

/// Attention blocks on the concatenated encoder output and decoder tokens.
pub const DECODER_BLOCKS: usize = 2;

/// Post-norm transformer block with full self-attention.
#[derive(Clone, Debug)]
struct Block {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl Block {
    fn new(pb: &mut ParamBuilder, name: &str, spec: &ModelSpec) -> Self {
        let d = spec.hidden;
        Block {
            attn: MultiHeadAttention::new(pb, &format!("{name}.attn"), d, spec.heads),
            norm1: pb.layer_norm(&format!("{name}.norm1"), d),
            ff1: pb.linear(&format!("{name}.ff1"), d, spec.ff_dim),
            ff2: pb.linear(&format!("{name}.ff2"), spec.ff_dim, d),
            norm2: pb.layer_norm(&format!("{name}.norm2"), d),
        }
    }

    fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, ctx: &mut ForwardCtx<'_>) -> Result<Var<'t>> {
        let a = self.attn.forward(p, x, ctx.attention.as_mut())?;
        let x = self.norm1.forward(p, x.add(a)?)?;
        let f = self.ff2.forward(p, self.ff1.forward(p, x)?.gelu())?;
        self.norm2.forward(p, x.add(f)?)
    }
}

/// Kernel-3, stride-2, padding-1 convolution along the token axis.
#[derive(Clone, Debug)]
struct Distil {
    taps: [usize; 3],
    bias: usize,
}

impl Distil {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Self {
        let bound = 1.0 / ((3 * d) as f64).sqrt();
        Distil {
            taps: [0, 1, 2].map(|k| pb.uniform(format!("{name}.tap{k}"), &[d, d], bound)),
            bias: pb.constant(format!("{name}.bias"), &[d], 0.0),
        }
    }

    fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let len = x.value().rows();
        let out_len = len.div_ceil(2);
        let mut acc: Option<Var<'t>> = None;
        for (k, &w) in self.taps.iter().enumerate() {
            let rows: Vec<Option<usize>> = (0..out_len)
                .map(|i| (2 * i + k).checked_sub(1).filter(|&r| r < len))
                .collect();
            let term = x.select_rows(&rows)?.matmul(p[w])?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        Ok(acc.expect("three taps").add_row(p[self.bias])?.gelu())
    }
}

/// Encoder over the full window, decoder over the recent window and the
/// prediction day, both fed `[dynamic, statics]` tokens.
#[derive(Clone, Debug)]
pub struct Layout {
    enc_embed: Linear,
    encoder: Vec<Block>,
    distil: Vec<Distil>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    decoder: Vec<Block>,
    dec_norm: LayerNorm,
    head1: Linear,
    head2: Linear,
    width: usize,
    decoder_window: usize,
}

impl Layout {
    pub fn new(pb: &mut ParamBuilder, spec: &ModelSpec) -> Self {
        let d = spec.hidden;
        let token = spec.n_dynamic + spec.n_static;
        let enc_embed = pb.linear("enc_embed", token, d);
        let encoder = (0..spec.layers).map(|l| Block::new(pb, &format!("enc{l}"), spec)).collect();
        let distil = (0..spec.layers - 1).map(|l| Distil::new(pb, &format!("distil{l}"), d)).collect();
        let enc_norm = pb.layer_norm("enc_norm", d);
        let dec_embed = pb.linear("dec_embed", token, d);
        let decoder = (0..DECODER_BLOCKS).map(|l| Block::new(pb, &format!("dec{l}"), spec)).collect();
        let dec_norm = pb.layer_norm("dec_norm", d);
        let head1 = pb.linear("head1", d, d);
        let head2 = pb.linear("head2", d, spec.n_targets);
        Layout {
            enc_embed,
            encoder,
            distil,
            enc_norm,
            dec_embed,
            decoder,
            dec_norm,
            head1,
            head2,
            width: d,
            decoder_window: spec.decoder_window,
        }
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
        let dw = self.decoder_window;
        let enc_pe = tape.constant(positional_encoding(t_len, self.width));
        let dec_pe = tape.constant(positional_encoding(dw + 1, self.width));
        let mut outputs = Vec::with_capacity(b);
        for s in 0..b {
            let rows: Vec<Option<usize>> = (0..t_len).map(|t| Some(s * t_len + t)).collect();
            let statics = x.statics.select_rows(&vec![Some(s); t_len])?;
            let tokens = concat_cols(&[x.dynamic.select_rows(&rows)?, statics])?;

            let mut e = self.enc_embed.forward(p, tokens)?.add(enc_pe)?;
            for (l, block) in self.encoder.iter().enumerate() {
                e = block.forward(p, e, ctx)?;
                if let Some(conv) = self.distil.get(l) {
                    e = conv.forward(p, e)?;
                }
            }
            let e = self.enc_norm.forward(p, e)?;

            let recent: Vec<Option<usize>> = (t_len - 1 - dw..t_len).map(Some).collect();
            let d0 = self.dec_embed.forward(p, tokens.select_rows(&recent)?)?.add(dec_pe)?;
            let mut z = concat_rows(&[e, d0])?;
            for block in &self.decoder {
                z = block.forward(p, z, ctx)?;
            }
            let z = self.dec_norm.forward(p, z)?;
            let last = z.select_rows(&[Some(z.value().rows() - 1)])?;
            outputs.push(self.head2.forward(p, self.head1.forward(p, last)?.gelu())?);
        }
        Ok(concat_rows(&outputs)?)
    }
}
