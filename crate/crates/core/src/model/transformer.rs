//! Encoder–decoder frame-scoring transformer over fixed-length padded windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{key_padding_mask, multi_head, MhaLayout};
use crate::error::{Error, Result};
use crate::numerics::{ModelParams, ParamId, Tape, Tensor, Var};

/// Sinusoidal encoding: `PE(p, 2i) = sin(p/10000^(2i/D))`, `PE(p, 2i+1) = cos(…)`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs even width, got {dim}"
        )));
    }
    let mut pe = Tensor::zeros(&[len, dim]);
    for p in 0..len {
        let row = pe.row_mut(p);
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            row[2 * i] = angle.sin() as f32;
            row[2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(pe)
}

/// One window of `len` rows; rows at and beyond `valid_len` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedWindow {
    pub features: Tensor,
    pub valid_len: usize,
    pub mask: Vec<u8>,
    /// Index of the first frame in the source video.
    pub start: usize,
}

/// Splits `frames` into contiguous non-overlapping windows, zero-padding the last.
pub fn window_video(frames: &Tensor, window_len: usize) -> Result<Vec<PaddedWindow>> {
    if window_len == 0 {
        return Err(Error::Config("window_len must be at least 1".into()));
    }
    let (n, d) = frames.dims2();
    let mut out = Vec::with_capacity(n.div_ceil(window_len));
    let mut start = 0;
    while start < n {
        let valid = window_len.min(n - start);
        let mut data = vec![0.0f32; window_len * d];
        data[..valid * d].copy_from_slice(&frames.data()[start * d..(start + valid) * d]);
        let mut mask = vec![0u8; window_len];
        mask[..valid].fill(1);
        out.push(PaddedWindow {
            features: Tensor::new(&[window_len, d], data)?,
            valid_len: valid,
            mask,
            start,
        });
        start += valid;
    }
    Ok(out)
}

/// Concatenates the valid regions of `windows`.
pub fn unwindow(windows: &[PaddedWindow]) -> Result<Tensor> {
    let d = windows
        .first()
        .ok_or_else(|| Error::Shape("no windows".into()))?
        .features
        .cols();
    let mut data = Vec::new();
    let mut n = 0;
    for w in windows {
        data.extend_from_slice(&w.features.data()[..w.valid_len * d]);
        n += w.valid_len;
    }
    Tensor::new(&[n, d], data)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormLayout {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FfnLayout {
    /// `D×4D`, `1×4D`, `4D×D`, `1×D`
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub norm1: NormLayout,
    pub attn: MhaLayout,
    pub norm2: NormLayout,
    pub ffn: FfnLayout,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLayer {
    pub norm1: NormLayout,
    pub self_attn: MhaLayout,
    pub norm2: NormLayout,
    pub cross_attn: MhaLayout,
    pub norm3: NormLayout,
    pub ffn: FfnLayout,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerLayout {
    pub dim: usize,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub enc_norm: NormLayout,
    pub dec_norm: NormLayout,
    /// `D×1` and `1×1`
    pub head_w: ParamId,
    pub head_b: ParamId,
}

fn norm(p: &mut ModelParams, name: &str, d: usize) -> Result<NormLayout> {
    Ok(NormLayout {
        gain: p.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0))?,
        bias: p.add(format!("{name}.bias"), Tensor::zeros(&[1, d]))?,
    })
}

fn ffn<R: Rng>(p: &mut ModelParams, name: &str, d: usize, rng: &mut R) -> Result<FfnLayout> {
    Ok(FfnLayout {
        w1: p.add(format!("{name}.w1"), Tensor::glorot(d, 4 * d, rng))?,
        b1: p.add(format!("{name}.b1"), Tensor::zeros(&[1, 4 * d]))?,
        w2: p.add(format!("{name}.w2"), Tensor::glorot(4 * d, d, rng))?,
        b2: p.add(format!("{name}.b2"), Tensor::zeros(&[1, d]))?,
    })
}

impl TransformerLayout {
    pub fn init<R: Rng>(
        p: &mut ModelParams,
        dim: usize,
        heads: usize,
        n_enc: usize,
        n_dec: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut encoder = Vec::with_capacity(n_enc);
        for i in 0..n_enc {
            let pre = format!("enc{i}");
            encoder.push(EncoderLayer {
                norm1: norm(p, &format!("{pre}.norm1"), dim)?,
                attn: MhaLayout::init(p, &format!("{pre}.attn"), dim, heads, rng)?,
                norm2: norm(p, &format!("{pre}.norm2"), dim)?,
                ffn: ffn(p, &format!("{pre}.ffn"), dim, rng)?,
            });
        }
        let mut decoder = Vec::with_capacity(n_dec);
        for i in 0..n_dec {
            let pre = format!("dec{i}");
            decoder.push(DecoderLayer {
                norm1: norm(p, &format!("{pre}.norm1"), dim)?,
                self_attn: MhaLayout::init(p, &format!("{pre}.self_attn"), dim, heads, rng)?,
                norm2: norm(p, &format!("{pre}.norm2"), dim)?,
                cross_attn: MhaLayout::init(p, &format!("{pre}.cross_attn"), dim, heads, rng)?,
                norm3: norm(p, &format!("{pre}.norm3"), dim)?,
                ffn: ffn(p, &format!("{pre}.ffn"), dim, rng)?,
            });
        }
        Ok(TransformerLayout {
            dim,
            encoder,
            decoder,
            enc_norm: norm(p, "enc.norm", dim)?,
            dec_norm: norm(p, "dec.norm", dim)?,
            head_w: p.add("head.w", Tensor::glorot(dim, 1, rng))?,
            head_b: p.add("head.b", Tensor::zeros(&[1, 1]))?,
        })
    }
}

/// Inverted dropout applied to sublayer outputs while training.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f32,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f32, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply(&mut self, t: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = t.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if self.rng.random::<f32>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = t.constant(Tensor::new(&shape, data)?);
        t.mul(x, m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowOutput {
    /// `L×1` scores in (0, 1).
    pub scores: Var,
    /// `L×D` decoder output features after the final norm.
    pub features: Var,
}

fn layer_norm(t: &mut Tape, x: Var, n: &NormLayout) -> Result<Var> {
    let (g, b) = (t.param(n.gain), t.param(n.bias));
    t.layer_norm(x, g, b)
}

fn feed_forward(t: &mut Tape, x: Var, f: &FfnLayout) -> Result<Var> {
    let (w1, b1, w2, b2) = (t.param(f.w1), t.param(f.b1), t.param(f.w2), t.param(f.b2));
    let h = t.matmul(x, w1)?;
    let h = t.add_row(h, b1)?;
    let h = t.relu(h);
    let y = t.matmul(h, w2)?;
    t.add_row(y, b2)
}

fn residual(t: &mut Tape, x: Var, sub: Var, drop: &mut Option<&mut Dropout>) -> Result<Var> {
    let sub = match drop {
        Some(d) => d.apply(t, sub)?,
        None => sub,
    };
    t.add(x, sub)
}

fn check_finite(t: &Tape, x: Var, stage: &str, layer: usize) -> Result<()> {
    if t.value(x).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage: stage.into(),
            layer,
        })
    }
}

/// Scores one window. `x` is the `L×D` attended-frame input; keys at
/// positions `>= valid_len` are masked in every attention.
pub fn transformer_forward(
    t: &mut Tape,
    x: Var,
    valid_len: usize,
    layout: &TransformerLayout,
    use_pos_enc: bool,
    mut dropout: Option<&mut Dropout>,
) -> Result<WindowOutput> {
    let (l, d) = t.value(x).dims2();
    if d != layout.dim {
        return Err(Error::Shape(format!(
            "transformer width {} vs input {d}",
            layout.dim
        )));
    }
    if valid_len == 0 || valid_len > l {
        return Err(Error::Shape(format!(
            "valid_len {valid_len} for window of {l}"
        )));
    }
    let input = if use_pos_enc {
        let pe = t.constant(positional_encoding(l, d)?);
        t.add(x, pe)?
    } else {
        x
    };
    let mask = (valid_len < l).then(|| t.constant(key_padding_mask(l, l, valid_len)));

    let mut h = input;
    for (i, layer) in layout.encoder.iter().enumerate() {
        let n = layer_norm(t, h, &layer.norm1)?;
        let (a, _) = multi_head(t, n, n, &layer.attn, mask)?;
        h = residual(t, h, a, &mut dropout)?;
        let n = layer_norm(t, h, &layer.norm2)?;
        let f = feed_forward(t, n, &layer.ffn)?;
        h = residual(t, h, f, &mut dropout)?;
        check_finite(t, h, "encoder", i)?;
    }
    let memory = layer_norm(t, h, &layout.enc_norm)?;

    let mut h = input;
    for (i, layer) in layout.decoder.iter().enumerate() {
        let n = layer_norm(t, h, &layer.norm1)?;
        let (a, _) = multi_head(t, n, n, &layer.self_attn, mask)?;
        h = residual(t, h, a, &mut dropout)?;
        let n = layer_norm(t, h, &layer.norm2)?;
        let (c, _) = multi_head(t, n, memory, &layer.cross_attn, mask)?;
        h = residual(t, h, c, &mut dropout)?;
        let n = layer_norm(t, h, &layer.norm3)?;
        let f = feed_forward(t, n, &layer.ffn)?;
        h = residual(t, h, f, &mut dropout)?;
        check_finite(t, h, "decoder", i)?;
    }
    let features = layer_norm(t, h, &layout.dec_norm)?;
    let (w, b) = (t.param(layout.head_w), t.param(layout.head_b));
    let logits = t.matmul(features, w)?;
    let logits = t.add_row(logits, b)?;
    let scores = t.sigmoid(logits);
    check_finite(t, scores, "score_head", 0)?;
    Ok(WindowOutput { scores, features })
}
