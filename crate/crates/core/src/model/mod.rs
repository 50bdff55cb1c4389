//! The summarization network: caption fusion, language-guided attention,
//! frame-scoring transformer and the reconstructor used by the unsupervised losses.

mod attention;
mod fusion;
mod losses;
mod transformer;

pub use attention::{
    attention, key_padding_mask, language_guided_attention, multi_head, HeadLayout, MhaLayout,
    MASK_LOGIT,
};
pub use fusion::{fuse_text, sample_captions, sample_indices, text_tokens, FusionLayout};
pub use losses::{
    classification_loss, classification_loss_weighted, combined_loss, diversity_loss,
    keyframe_weight, reconstruct, reconstruction_loss, select_keyframes, LossBreakdown, LossInputs,
    LossSettings, LossWeights, ReconLayout, LOG_FLOOR,
};
pub use transformer::{
    positional_encoding, transformer_forward, unwindow, window_video, DecoderLayer, Dropout,
    EncoderLayer, FfnLayout, NormLayout, PaddedWindow, TransformerLayout, WindowOutput,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, FeatureKind, TextMode};
use crate::numerics::{ModelParams, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    pub fusion: FusionLayout,
    pub lga: MhaLayout,
    pub transformer: TransformerLayout,
    pub recon: ReconLayout,
}

/// Parameters plus the config that shaped them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: ModelParams,
    pub layout: ModelLayout,
}

/// Text mode implied by the kind of text file supplied.
pub fn mode_for_kind(kind: FeatureKind) -> Result<TextMode> {
    match kind {
        FeatureKind::Captions => Ok(TextMode::Generic),
        FeatureKind::Query => Ok(TextMode::Query),
        FeatureKind::Frames => Err(Error::Usage("frame features given as text".into())),
    }
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ModelParams::new();
        let layout = ModelLayout {
            fusion: FusionLayout::init(&mut params, config.m_fixed, d, &mut rng)?,
            lga: MhaLayout::init(&mut params, "lga", d, config.lga_heads, &mut rng)?,
            transformer: TransformerLayout::init(
                &mut params,
                d,
                config.tf_heads,
                config.tf_enc_layers,
                config.tf_dec_layers,
                &mut rng,
            )?,
            recon: ReconLayout::init(&mut params, d, &mut rng)?,
        };
        Ok(Model {
            config: config.clone(),
            params,
            layout,
        })
    }

    /// Installs stored tensors, which must match the config's parameter names and shapes.
    pub fn from_tensors(config: &RunConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut m = Model::new(config)?;
        if named.len() != m.params.len() {
            return Err(Error::Validation(format!(
                "expected {} tensors, found {}",
                m.params.len(),
                named.len()
            )));
        }
        for (id, (name, t)) in m.params.ids().collect::<Vec<_>>().into_iter().zip(named) {
            let want = m.params.get(id);
            if m.params.name(id) != name || want.shape() != t.shape() {
                return Err(Error::Validation(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    m.params.name(id),
                    want.shape()
                )));
            }
            *m.params.get_mut(id) = t;
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn check_dim(&self, what: &str, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Config(format!(
                "{what} has dimension {d} but the model expects embed_dim={}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn text_tokens(&self, t: &mut Tape, text: &Tensor, kind: FeatureKind) -> Result<Var> {
        let mode = mode_for_kind(kind)?;
        text_tokens(
            t,
            text,
            kind,
            mode,
            self.config.fused_only,
            &self.layout.fusion,
        )
    }

    /// Language-guided attention followed by the transformer on one window.
    pub fn forward_window(
        &self,
        t: &mut Tape,
        window: &PaddedWindow,
        tokens: Var,
        dropout: Option<&mut Dropout>,
    ) -> Result<WindowOutput> {
        let frames = t.constant(window.features.clone());
        let attended = language_guided_attention(
            t,
            frames,
            tokens,
            &self.layout.lga,
            self.config.lga_residual,
        )?;
        if !t.value(attended).is_finite() {
            return Err(Error::Numeric {
                stage: "language_guided_attention".into(),
                layer: 0,
            });
        }
        transformer_forward(
            t,
            attended,
            window.valid_len,
            &self.layout.transformer,
            !self.config.disable_pos_enc,
            dropout,
        )
    }

    /// Per-frame scores in (0, 1) for a whole video.
    pub fn score_frames(
        &self,
        frames: &Tensor,
        text: &Tensor,
        kind: FeatureKind,
    ) -> Result<Vec<f32>> {
        self.check_dim("frame features", frames.cols())?;
        self.check_dim("text features", text.cols())?;
        let mut out = Vec::with_capacity(frames.rows());
        for w in window_video(frames, self.config.window_len)? {
            let mut t = Tape::with_params(&self.params);
            let tokens = self.text_tokens(&mut t, text, kind)?;
            let o = self.forward_window(&mut t, &w, tokens, None)?;
            out.extend_from_slice(&t.value(o.scores).data()[..w.valid_len]);
        }
        Ok(out)
    }

    pub fn score_bundle(&self, b: &FeatureBundle) -> Result<Vec<f32>> {
        self.score_frames(&b.frames, &b.text, b.text_kind)
    }

    pub fn loss_settings(&self) -> LossSettings<'_> {
        LossSettings {
            weights: LossWeights {
                alpha: self.config.alpha,
                beta: self.config.beta,
                lambda: self.config.lambda,
            },
            mode: self.config.mode,
            recon_mode: self.config.recon_mode,
            select_fraction: self.config.select_fraction,
            recon: &self.layout.recon,
        }
    }

    /// Loss of one window on `t`. `labels` cover only the valid positions.
    #[allow(clippy::too_many_arguments)]
    pub fn window_loss(
        &self,
        t: &mut Tape,
        window: &PaddedWindow,
        text: &Tensor,
        kind: FeatureKind,
        labels: Option<&[u8]>,
        key_weight: f32,
        dropout: Option<&mut Dropout>,
        selection: Option<&[usize]>,
    ) -> Result<(Var, LossBreakdown)> {
        let tokens = self.text_tokens(t, text, kind)?;
        let o = self.forward_window(t, window, tokens, dropout)?;
        let l = window.features.rows();
        let (scores, features) = if window.valid_len < l {
            let keep: Vec<usize> = (0..window.valid_len).collect();
            (
                t.gather_rows(o.scores, &keep)?,
                t.gather_rows(o.features, &keep)?,
            )
        } else {
            (o.scores, o.features)
        };
        let originals = if window.valid_len < l {
            window
                .features
                .select_rows(&(0..window.valid_len).collect::<Vec<_>>())?
        } else {
            window.features.clone()
        };
        let inputs = LossInputs {
            scores,
            features,
            originals: &originals,
            labels,
            key_weight,
        };
        combined_loss(t, &inputs, &self.loss_settings(), selection)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    fn tiny() -> RunConfig {
        RunConfig {
            embed_dim: 8,
            m_fixed: 3,
            lga_heads: 2,
            tf_heads: 2,
            tf_enc_layers: 1,
            tf_dec_layers: 1,
            window_len: 8,
            ..Default::default()
        }
    }

    fn inputs(seed: u64, n: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::uniform(&[n, 8], 1.0, &mut rng),
            Tensor::uniform(&[5, 8], 1.0, &mut rng),
        )
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Model::new(&tiny()).unwrap();
        let b = Model::new(&tiny()).unwrap();
        assert_eq!(a.params.tensors(), b.params.tensors());
        let c = Model::new(&RunConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a.params.tensors(), c.params.tensors());
    }

    #[test]
    fn scores_cover_every_frame() {
        let m = Model::new(&tiny()).unwrap();
        for n in [1, 8, 13] {
            let (f, c) = inputs(n as u64, n);
            let s = m.score_frames(&f, &c, FeatureKind::Captions).unwrap();
            assert_eq!(s.len(), n);
            assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let m = Model::new(&tiny()).unwrap();
        let f = Tensor::zeros(&[4, 6]);
        let c = Tensor::zeros(&[2, 6]);
        assert!(m
            .score_frames(&f, &c, FeatureKind::Captions)
            .unwrap_err()
            .is_config_error());
    }

    #[test]
    fn from_tensors_round_trip_and_mismatch() {
        let m = Model::new(&tiny()).unwrap();
        let named: Vec<_> = m
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let back = Model::from_tensors(&tiny(), named.clone()).unwrap();
        assert_eq!(back.params.tensors(), m.params.tensors());
        let mut bad = named;
        bad.pop();
        assert!(Model::from_tensors(&tiny(), bad).is_err());
    }

    #[test]
    fn full_supervised_loss_gradient() {
        let cfg = RunConfig { seed: 3, ..tiny() };
        let m = Model::new(&cfg).unwrap();
        let (f, c) = inputs(9, 8);
        let w = &window_video(&f, 8).unwrap()[0];
        let labels = [1u8, 1, 0, 0, 0, 0, 1, 0];
        let selection = {
            let mut t = Tape::with_params(&m.params);
            let tok = m.text_tokens(&mut t, &c, FeatureKind::Captions).unwrap();
            let o = m.forward_window(&mut t, w, tok, None).unwrap();
            select_keyframes(t.value(o.scores).data(), cfg.select_fraction).unwrap()
        };
        let rep = finite_diff_check(
            |t| {
                let (l, _) = m.window_loss(
                    t,
                    w,
                    &c,
                    FeatureKind::Captions,
                    Some(&labels),
                    keyframe_weight(&labels, false),
                    None,
                    Some(&selection),
                )?;
                Ok(l)
            },
            &m.params,
            1e-3,
            3,
            11,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }
}
