//! Attention machinery shared by the encoder, the latent bottleneck and the
//! decoder: multi-head scaled dot-product attention and a pre-norm
//! attention block (attention + residual, FFN + residual).

mod params;

pub use params::{truncated_normal, Bound, Grads, Param, ParamId, ParamStore, INIT_STD};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, TensorError, Var, LAYER_NORM_EPS};

/// Whether a forward pass is a training pass (dropout active) or not.
pub enum Mode<'r> {
    Eval,
    Train { dropout: f64, rng: &'r mut ChaCha8Rng },
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match self {
            Mode::Train { dropout, rng } if *dropout > 0.0 => {
                let p = *dropout;
                let shape = tape.value(x).shape().to_vec();
                let mut mask = Tensor::zeros(&shape);
                for v in mask.data_mut() {
                    *v = if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) };
                }
                let mask = tape.constant(mask);
                tape.mul(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Post-softmax attention weights, one `queries x keys` matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub per_head: Vec<Tensor>,
}

impl AttnWeights {
    /// Head-averaged weights.
    pub fn mean(&self) -> Tensor {
        let mut out = self.per_head[0].clone();
        for h in &self.per_head[1..] {
            out.data_mut()
                .iter_mut()
                .zip(h.data())
                .for_each(|(a, b)| *a += b);
        }
        let n = self.per_head.len() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Multi-head `softmax(Q K^T / sqrt(d)) V` with heads concatenated.
///
/// `d` is the per-head width `d_model / n_heads`. Adds `queries * keys`
/// to the tape's score-element counter (independent of the head count).
pub fn attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
) -> Result<(Var, AttnWeights)> {
    let (qs, ks, vs) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] || ks != vs {
        return Err(TensorError::Dimension {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let d_model = qs[1];
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(TensorError::Contract(format!(
            "d_model {d_model} not divisible by n_heads {n_heads}"
        )));
    }
    let width = d_model / n_heads;
    let scale = 1.0 / (width as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            let span = (h * width, (h + 1) * width);
            (
                tape.slice_cols(q, span.0, span.1)?,
                tape.slice_cols(k, span.0, span.1)?,
                tape.slice_cols(v, span.0, span.1)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores)?;
        weights.push(tape.value(probs).clone());
        heads.push(tape.matmul(probs, vh)?);
    }
    tape.count_scores((qs[0] * ks[0]) as u64);
    let out = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok((out, AttnWeights { per_head: weights }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0), false),
            bias: store.add_bias(format!("{prefix}.bias"), dim),
        }
    }

    pub fn apply(&self, tape: &mut Tape<'_>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias), LAYER_NORM_EPS)
    }
}

/// Parameters of one attention block.
///
/// The attention width equals the query-side width. Keys and values are
/// projected from the context's native width, so one block type serves
/// both same-width self-attention and cross-width bridging
/// (e.g. `D_L`-wide latents reading `D`-wide input tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnBlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_query: LayerNormParams,
    /// Separate norm for the context; `None` means the context is
    /// normalized with `ln_query` (self-attention).
    pub ln_context: Option<LayerNormParams>,
    pub ln_ffn: LayerNormParams,
    pub n_heads: usize,
    pub query_dim: usize,
    pub context_dim: usize,
}

impl AttnBlockParams {
    /// Block whose context is the query sequence itself.
    pub fn self_attn<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, prefix, dim, dim, n_heads, false, rng)
    }

    /// Block whose queries attend to a separate context of width `context_dim`.
    pub fn cross_attn<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        context_dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, prefix, query_dim, context_dim, n_heads, true, rng)
    }

    fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        context_dim: usize,
        n_heads: usize,
        cross: bool,
        rng: &mut R,
    ) -> Self {
        let d_ff = 2 * query_dim;
        let ln_query = LayerNormParams::new(store, &format!("{prefix}.ln_query"), query_dim);
        let ln_context =
            cross.then(|| LayerNormParams::new(store, &format!("{prefix}.ln_context"), context_dim));
        Self {
            wq: store.add_weight(format!("{prefix}.wq"), &[query_dim, query_dim], rng),
            wk: store.add_weight(format!("{prefix}.wk"), &[context_dim, query_dim], rng),
            wv: store.add_weight(format!("{prefix}.wv"), &[context_dim, query_dim], rng),
            wo: store.add_weight(format!("{prefix}.wo"), &[query_dim, query_dim], rng),
            ln_ffn: LayerNormParams::new(store, &format!("{prefix}.ln_ffn"), query_dim),
            w1: store.add_weight(format!("{prefix}.w1"), &[query_dim, d_ff], rng),
            b1: store.add_bias(format!("{prefix}.b1"), d_ff),
            w2: store.add_weight(format!("{prefix}.w2"), &[d_ff, query_dim], rng),
            b2: store.add_bias(format!("{prefix}.b2"), query_dim),
            ln_query,
            ln_context,
            n_heads,
            query_dim,
            context_dim,
        }
    }

    pub fn d_ff(&self) -> usize {
        2 * self.query_dim
    }
}

/// `H = U + Attn(LN(U), LN(Z))`, then `H + FFN(LN(H))`.
///
/// Passing the same `Var` for `u` and `z` is self-attention.
pub fn attn_block(
    tape: &mut Tape<'_>,
    bound: &Bound,
    p: &AttnBlockParams,
    u: Var,
    z: Var,
    mode: &mut Mode<'_>,
) -> Result<(Var, AttnWeights)> {
    let u_norm = p.ln_query.apply(tape, bound, u)?;
    let z_norm = match (&p.ln_context, u == z) {
        (None, true) => u_norm,
        (None, false) => p.ln_query.apply(tape, bound, z)?,
        (Some(ln), _) => ln.apply(tape, bound, z)?,
    };
    let q = tape.matmul(u_norm, bound.var(p.wq))?;
    let k = tape.matmul(z_norm, bound.var(p.wk))?;
    let v = tape.matmul(z_norm, bound.var(p.wv))?;
    let (attn, weights) = attention(tape, q, k, v, p.n_heads)?;
    let attn = tape.matmul(attn, bound.var(p.wo))?;
    let attn = mode.dropout(tape, attn)?;
    let h = tape.add(u, attn)?;

    let f = p.ln_ffn.apply(tape, bound, h)?;
    let f = tape.matmul(f, bound.var(p.w1))?;
    let f = tape.add_bias(f, bound.var(p.b1))?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, bound.var(p.w2))?;
    let f = tape.add_bias(f, bound.var(p.b2))?;
    let f = mode.dropout(tape, f)?;
    Ok((tape.add(h, f)?, weights))
}
