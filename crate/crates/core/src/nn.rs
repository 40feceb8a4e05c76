//! Transformer encoder building blocks: multi-head self-attention, the GELU
//! MLP, pre-norm residual blocks and the L-block encoder.
//!
//! Weight structs only hold [`ParamId`]s. Forward functions look the values
//! up through a [`Bound`] so the same model runs on `f32` or `f64` tapes.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Affine map `x · W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.truncated_normal(&[d_in, d_out]),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, p: &Bound, x: Var) -> Result<Var> {
        let last = tape.shape(x).last().copied();
        if last != Some(self.d_in) {
            return dim_err(format!(
                "linear expects last dim {}, got shape {:?}",
                self.d_in,
                tape.shape(x)
            ));
        }
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            eps,
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(
            x,
            p.var(self.gamma),
            p.var(self.beta),
            E::from_f64(self.eps),
        )
    }
}

/// Query, key, value and output projections for `heads`-way attention.
#[derive(Clone, Debug)]
pub struct MsaWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MsaWeights {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "dim {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.query"), d, d),
            key: Linear::new(store, init, &format!("{name}.key"), d, d),
            value: Linear::new(store, init, &format!("{name}.value"), d, d),
            out: Linear::new(store, init, &format!("{name}.out"), d, d),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.d_in
    }
}

/// Two affine layers `d -> r·d -> d` with GELU in between.
#[derive(Clone, Debug)]
pub struct MlpWeights {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpWeights {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        d: usize,
        ratio: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d, ratio * d),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), ratio * d, d),
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub norm1: LayerNorm,
    pub attn: MsaWeights,
    pub norm2: LayerNorm,
    pub mlp: MlpWeights,
}

/// Hyperparameters shared by every block of an encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderShape {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl EncoderShape {
    /// Learnable scalars in one block: attention, MLP and two norms.
    pub fn block_params(&self) -> usize {
        let d = self.dim;
        let r = self.mlp_ratio;
        4 * Linear::num_params(d, d)
            + Linear::num_params(d, r * d)
            + Linear::num_params(r * d, d)
            + 4 * d
    }

    pub fn num_params(&self) -> usize {
        self.depth * self.block_params()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub blocks: Vec<BlockWeights>,
    pub shape: EncoderShape,
}

impl EncoderWeights {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        shape: EncoderShape,
    ) -> Result<Self> {
        let d = shape.dim;
        let blocks = (0..shape.depth)
            .map(|l| {
                let prefix = format!("{name}.blocks.{l}");
                Ok(BlockWeights {
                    norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d, shape.ln_eps),
                    attn: MsaWeights::new(store, init, &format!("{prefix}.attn"), d, shape.heads)?,
                    norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d, shape.ln_eps),
                    mlp: MlpWeights::new(store, init, &format!("{prefix}.mlp"), d, shape.mlp_ratio),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks, shape })
    }
}

/// Multi-head scaled dot-product self-attention over axis `-2` of
/// `z: [..., n, d]`. Leading axes are independent sequences.
pub fn msa_forward<E: Element>(
    tape: &mut Tape<E>,
    p: &Bound,
    w: &MsaWeights,
    z: Var,
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let d = w.dim();
    if shape.len() < 2 || shape[shape.len() - 1] != d {
        return dim_err(format!("attention expects [.., n, {d}], got {shape:?}"));
    }
    let n = shape[shape.len() - 2];
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let heads = w.heads;
    let dh = d / heads;

    let x = tape.reshape(z, &[batch, n, d])?;
    let q = w.query.forward(tape, p, x)?;
    let k = w.key.forward(tape, p, x)?;
    let v = w.value.forward(tape, p, x)?;

    // [B, n, h, dh] -> q,v: [B, h, n, dh]; kᵀ: [B, h, dh, n]
    let q = tape.reshape(q, &[batch, n, heads, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[batch, n, heads, dh])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, &[batch, n, heads, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, E::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(attn, v)?;

    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch, n, d])?;
    let out = w.out.forward(tape, p, ctx)?;
    tape.reshape(out, &shape)
}

/// Pre-norm residual block: `y = MSA(LN(z)) + z`, `z' = MLP(LN(y)) + y`.
pub fn transformer_block<E: Element>(
    tape: &mut Tape<E>,
    p: &Bound,
    w: &BlockWeights,
    z: Var,
) -> Result<Var> {
    let h = w.norm1.forward(tape, p, z)?;
    let h = msa_forward(tape, p, &w.attn, h)?;
    let y = tape.add(h, z)?;
    let h = w.norm2.forward(tape, p, y)?;
    let h = w.mlp.forward(tape, p, h)?;
    tape.add(h, y)
}

pub fn encoder_forward<E: Element>(
    tape: &mut Tape<E>,
    p: &Bound,
    w: &EncoderWeights,
    z: Var,
) -> Result<Var> {
    w.blocks
        .iter()
        .try_fold(z, |z, block| transformer_block(tape, p, block, z))
}
