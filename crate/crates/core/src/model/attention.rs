//! Scaled dot-product and multi-head attention, and the language-guided
//! cross-attention from frames to text tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ModelParams, ParamId, Tape, Tensor, Var};

/// Added to the logits of padded keys; `exp` of it underflows to exactly zero.
pub const MASK_LOGIT: f32 = -1e9;

/// `softmax(Q·Kᵀ/√d_k + mask)·V`. Returns the output and the attention weights.
pub fn attention(t: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<(Var, Var)> {
    let (_, dq) = t.value(q).dims2();
    let (mk, dk) = t.value(k).dims2();
    let (mv, _) = t.value(v).dims2();
    if dq != dk || mk != mv {
        return Err(Error::Shape(format!(
            "attention: Q width {dq}, K {mk}×{dk}, V rows {mv}"
        )));
    }
    let kt = t.transpose(k);
    let logits = t.matmul(q, kt)?;
    let mut logits = t.scale(logits, 1.0 / (dk as f32).sqrt());
    if let Some(m) = mask {
        logits = t.add(logits, m)?;
    }
    let w = t.softmax_rows(logits);
    Ok((t.matmul(w, v)?, w))
}

/// `n_q×n_k` additive mask hiding keys at positions `>= valid`.
pub fn key_padding_mask(n_q: usize, n_k: usize, valid: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n_q, n_k]);
    for i in 0..n_q {
        m.row_mut(i)[valid.min(n_k)..].fill(MASK_LOGIT);
    }
    m
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    /// `D×d_k` each.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Per-head projections plus the output map `W^O` (`h·d_v × D`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MhaLayout {
    pub heads: Vec<HeadLayout>,
    pub wo: ParamId,
}

impl MhaLayout {
    /// Projections drawn uniformly from `±1/√D`.
    pub fn init<R: Rng>(
        params: &mut ModelParams,
        prefix: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "{n_heads} heads do not divide width {dim}"
            )));
        }
        let dh = dim / n_heads;
        let lim = 1.0 / (dim as f32).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for i in 0..n_heads {
            heads.push(HeadLayout {
                wq: params.add(
                    format!("{prefix}.head{i}.wq"),
                    Tensor::uniform(&[dim, dh], lim, rng),
                )?,
                wk: params.add(
                    format!("{prefix}.head{i}.wk"),
                    Tensor::uniform(&[dim, dh], lim, rng),
                )?,
                wv: params.add(
                    format!("{prefix}.head{i}.wv"),
                    Tensor::uniform(&[dim, dh], lim, rng),
                )?,
            });
        }
        let wo = params.add(
            format!("{prefix}.wo"),
            Tensor::uniform(&[dim, dim], lim, rng),
        )?;
        Ok(MhaLayout { heads, wo })
    }
}

/// Multi-head attention with queries from `xq` and keys/values from `xkv`.
/// Returns the output and each head's attention weights.
pub fn multi_head(
    t: &mut Tape,
    xq: Var,
    xkv: Var,
    layout: &MhaLayout,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(layout.heads.len());
    let mut weights = Vec::with_capacity(layout.heads.len());
    for h in &layout.heads {
        let (wq, wk, wv) = (t.param(h.wq), t.param(h.wk), t.param(h.wv));
        let q = t.matmul(xq, wq)?;
        let k = t.matmul(xkv, wk)?;
        let v = t.matmul(xkv, wv)?;
        let (o, w) = attention(t, q, k, v, mask)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        t.concat_cols(&outs)?
    };
    let wo = t.param(layout.wo);
    Ok((t.matmul(cat, wo)?, weights))
}

/// Frames attend to text tokens; with `residual` the frames are added back.
pub fn language_guided_attention(
    t: &mut Tape,
    frames: Var,
    tokens: Var,
    layout: &MhaLayout,
    residual: bool,
) -> Result<Var> {
    let (_, df) = t.value(frames).dims2();
    let (_, dt) = t.value(tokens).dims2();
    if df != dt {
        return Err(Error::Shape(format!(
            "frames width {df} vs text width {dt}"
        )));
    }
    let (out, _) = multi_head(t, frames, tokens, layout, None)?;
    if residual {
        t.add(out, frames)
    } else {
        Ok(out)
    }
}
