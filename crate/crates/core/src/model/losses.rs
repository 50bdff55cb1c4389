//! Classification, reconstruction and diversity losses, the reconstructor
//! network, keyframe selection and their weighted combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ReconMode, TrainMode};
use crate::error::{Error, Result};
use crate::numerics::{ModelParams, ParamId, Tape, Tensor, Var};

/// Lower clamp on every log argument.
pub const LOG_FLOOR: f32 = 1e-7;

/// Weight on keyframe terms: `k/N`, or `1 − k/N` when `invert` is set.
/// Background terms get the complement. Warns on all-one or all-zero labels.
pub fn keyframe_weight(labels: &[u8], invert: bool) -> f32 {
    let n = labels.len().max(1);
    let k = labels.iter().filter(|&&l| l != 0).count();
    if k == 0 || k == labels.len() {
        log::warn!("degenerate labels: {k} keyframes out of {}", labels.len());
    }
    let w = k as f64 / n as f64;
    (if invert { 1.0 - w } else { w }) as f32
}

/// `−(1/N) Σ [w·y·log x + (1−w)(1−y)·log(1−x)]` over the `N` entries of `scores`.
pub fn classification_loss_weighted(
    t: &mut Tape,
    scores: Var,
    labels: &[u8],
    key_weight: f32,
) -> Result<Var> {
    let shape = t.value(scores).shape().to_vec();
    let n = labels.len();
    if t.value(scores).len() != n {
        return Err(Error::Shape(format!(
            "{} scores vs {n} labels",
            t.value(scores).len()
        )));
    }
    let pos: Vec<f32> = labels
        .iter()
        .map(|&y| if y != 0 { key_weight } else { 0.0 })
        .collect();
    let neg: Vec<f32> = labels
        .iter()
        .map(|&y| if y != 0 { 0.0 } else { 1.0 - key_weight })
        .collect();
    let pos = t.constant(Tensor::new(&shape, pos)?);
    let neg = t.constant(Tensor::new(&shape, neg)?);
    let log_x = t.log_clamped(scores, LOG_FLOOR);
    let one_minus = t.affine(scores, -1.0, 1.0);
    let log_1mx = t.log_clamped(one_minus, LOG_FLOOR);
    let a = t.mul(pos, log_x)?;
    let b = t.mul(neg, log_1mx)?;
    let s = t.add(a, b)?;
    let s = t.sum(s);
    Ok(t.scale(s, -1.0 / n as f32))
}

/// Weighted BCE with the literal `k/N` keyframe weight computed from `labels`.
pub fn classification_loss(t: &mut Tape, scores: Var, labels: &[u8]) -> Result<Var> {
    let w = keyframe_weight(labels, false);
    classification_loss_weighted(t, scores, labels, w)
}

/// Indices of the top `⌈fraction·N⌉` scores (at least two when `N ≥ 2`),
/// ties broken towards lower indices, returned in increasing order.
pub fn select_keyframes(scores: &[f32], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "select fraction {fraction} outside (0, 1]"
        )));
    }
    let n = scores.len();
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(n.min(2), n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Position-wise `D→D→D` network with a ReLU between the layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReconLayout {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ReconLayout {
    pub fn init<R: Rng>(p: &mut ModelParams, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(ReconLayout {
            w1: p.add("recon.w1", Tensor::glorot(dim, dim, rng))?,
            b1: p.add("recon.b1", Tensor::zeros(&[1, dim]))?,
            w2: p.add("recon.w2", Tensor::glorot(dim, dim, rng))?,
            b2: p.add("recon.b2", Tensor::zeros(&[1, dim]))?,
        })
    }
}

pub fn reconstruct(t: &mut Tape, x: Var, layout: &ReconLayout) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        t.param(layout.w1),
        t.param(layout.b1),
        t.param(layout.w2),
        t.param(layout.b2),
    );
    let h = t.matmul(x, w1)?;
    let h = t.add_row(h, b1)?;
    let h = t.relu(h);
    let y = t.matmul(h, w2)?;
    t.add_row(y, b2)
}

/// `(1/|X|) Σ ‖x_i − ŷ_i‖²` (mse) or `(1/|X|) Σ ‖x_i − ŷ_i‖` (l2).
pub fn reconstruction_loss(
    t: &mut Tape,
    original: Var,
    recon: Var,
    mode: ReconMode,
) -> Result<Var> {
    let so = t.value(original).dims2();
    let sr = t.value(recon).dims2();
    if so != sr {
        return Err(Error::Shape(format!(
            "reconstruction {sr:?} vs original {so:?}"
        )));
    }
    let d = t.sub(original, recon)?;
    let per_row = match mode {
        ReconMode::Mse => t.mul(d, d)?,
        ReconMode::L2 => t.row_norms(d),
    };
    let s = t.sum(per_row);
    Ok(t.scale(s, 1.0 / so.0 as f32))
}

/// Mean pairwise cosine similarity over distinct rows; zero for fewer than two rows.
pub fn diversity_loss(t: &mut Tape, recon: Var) -> Result<Var> {
    let n = t.value(recon).rows();
    if n < 2 {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let c = t.cosine_matrix(recon);
    let mut off = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        off.row_mut(i)[i] = 0.0;
    }
    let off = t.constant(off);
    let c = t.mul(c, off)?;
    let s = t.sum(c);
    Ok(t.scale(s, 1.0 / (n * (n - 1)) as f32))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub lambda: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.3,
            lambda: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Absent in unsupervised mode.
    pub classification: Option<f32>,
    pub diversity: f32,
    pub reconstruction: f32,
    pub total: f32,
}

/// Inputs to [`combined_loss`] for one sequence.
pub struct LossInputs<'a> {
    /// `N×1` scores.
    pub scores: Var,
    /// `N×D` transformer output features.
    pub features: Var,
    /// `N×D` input frame features, the reconstruction target.
    pub originals: &'a Tensor,
    /// Required in supervised mode, ignored otherwise.
    pub labels: Option<&'a [u8]>,
    pub key_weight: f32,
}

pub struct LossSettings<'a> {
    pub weights: LossWeights,
    pub mode: TrainMode,
    pub recon_mode: ReconMode,
    pub select_fraction: f64,
    pub recon: &'a ReconLayout,
}

/// Weighted sum of the losses: `α·Lc + β·Ld + λ·Lr` supervised, `β·Ld + λ·Lr` unsupervised.
///
/// Keyframes are the top-scoring positions unless `selection` fixes them.
pub fn combined_loss(
    t: &mut Tape,
    inputs: &LossInputs,
    settings: &LossSettings,
    selection: Option<&[usize]>,
) -> Result<(Var, LossBreakdown)> {
    let lc = match settings.mode {
        TrainMode::Supervised => {
            let labels = inputs
                .labels
                .ok_or_else(|| Error::Usage("supervised loss needs labels".into()))?;
            Some(classification_loss_weighted(
                t,
                inputs.scores,
                labels,
                inputs.key_weight,
            )?)
        }
        TrainMode::Unsupervised => None,
    };
    let chosen = match selection {
        Some(s) => s.to_vec(),
        None => select_keyframes(t.value(inputs.scores).data(), settings.select_fraction)?,
    };
    if chosen.is_empty() {
        return Err(Error::Usage("no keyframes selected".into()));
    }
    let feats = t.gather_rows(inputs.features, &chosen)?;
    let recon = reconstruct(t, feats, settings.recon)?;
    let orig = t.constant(inputs.originals.select_rows(&chosen)?);
    let lr = reconstruction_loss(t, orig, recon, settings.recon_mode)?;
    let ld = diversity_loss(t, recon)?;

    let w = settings.weights;
    let wd = t.scale(ld, w.beta);
    let wr = t.scale(lr, w.lambda);
    let mut total = t.add(wd, wr)?;
    if let Some(lc) = lc {
        let wc = t.scale(lc, w.alpha);
        total = t.add(wc, total)?;
    }
    let breakdown = LossBreakdown {
        classification: lc.map(|v| t.scalar(v)),
        diversity: t.scalar(ld),
        reconstruction: t.scalar(lr),
        total: t.scalar(total),
    };
    Ok((total, breakdown))
}
