//! Small layer library built on the tape.

use crate::error::{Error, Result};
use crate::numkit::{Bound, ParamId, ParamStore, RngStream, Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self::with_gain(store, name, fan_in, fan_out, 1.0, rng)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut RngStream,
    ) -> Self {
        let weight = store.normal(
            format!("{name}.weight"),
            &[fan_in, fan_out],
            gain / (fan_in as f64).sqrt(),
            rng,
        );
        let bias = store.zeros(format!("{name}.bias"), &[fan_out]);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_bias(y, p.var(self.bias))
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.ones(format!("{name}.gain"), &[dim]),
            shift: store.zeros(format!("{name}.shift"), &[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, 1e-5)?;
        let n = tape.mul_row(n, p.var(self.gain))?;
        tape.add_bias(n, p.var(self.shift))
    }
}

/// Multi-head self-attention over the rows of a `[L, d]` sequence.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(SelfAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::with_gain(store, &format!("{name}.proj"), dim, dim, 0.5, rng),
            heads,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(tape, p, x)?;
        let hd = self.dim / self.heads;
        let mut merged: Option<Var> = None;
        for h in 0..self.heads {
            let q = tape.slice_cols(qkv, h * hd, (h + 1) * hd)?;
            let k = tape.slice_cols(qkv, self.dim + h * hd, self.dim + (h + 1) * hd)?;
            let v = tape.slice_cols(qkv, 2 * self.dim + h * hd, 2 * self.dim + (h + 1) * hd)?;
            let o = tape.attention(q, k, v)?;
            merged = Some(match merged {
                None => o,
                Some(m) => tape.concat_cols(m, o)?,
            });
        }
        self.proj
            .forward(tape, p, merged.expect("at least one head"))
    }
}

/// Pre-norm transformer block: attention and a GELU MLP, each residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio, rng),
            fc2: Linear::with_gain(
                store,
                &format!("{name}.fc2"),
                dim * mlp_ratio,
                dim,
                0.5,
                rng,
            ),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Conv2d {
            weight: store.normal(
                format!("{name}.weight"),
                &[out_ch, in_ch, kernel, kernel],
                1.0 / fan_in.sqrt(),
                rng,
            ),
            bias: store.zeros(format!("{name}.bias"), &[out_ch]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p.var(self.weight),
            p.var(self.bias),
            self.stride,
            self.pad,
        )
    }
}
