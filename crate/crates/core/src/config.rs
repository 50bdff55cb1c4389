//! Run configuration shared by the model, trainer and CLI.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::TauVariant;
use crate::features::TextMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Supervised,
    Unsupervised,
}

/// Reconstruction loss flavour: mean squared norm, or mean unsquared norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMode {
    #[default]
    Mse,
    L2,
}

/// Every tunable of a run. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub embed_dim: usize,

    // caption fusion
    pub m_fixed: usize,
    pub fused_only: bool,
    pub text_mode: TextMode,

    // language-guided attention
    pub lga_heads: usize,
    pub lga_residual: bool,

    // transformer
    pub tf_heads: usize,
    pub tf_enc_layers: usize,
    pub tf_dec_layers: usize,
    pub window_len: usize,
    pub dropout: f32,
    pub disable_pos_enc: bool,

    // losses
    pub alpha: f32,
    pub beta: f32,
    pub lambda: f32,
    pub recon_mode: ReconMode,
    pub invert_class_weight: bool,
    pub select_fraction: f64,

    // training
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,

    // summaries and evaluation
    pub budget_fraction: f64,
    pub tau_variant: TauVariant,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embed_dim: 512,
            m_fixed: 7,
            fused_only: false,
            text_mode: TextMode::Generic,
            lga_heads: 4,
            lga_residual: true,
            tf_heads: 8,
            tf_enc_layers: 6,
            tf_dec_layers: 6,
            window_len: 256,
            dropout: 0.0,
            disable_pos_enc: false,
            alpha: 0.5,
            beta: 0.3,
            lambda: 0.2,
            recon_mode: ReconMode::Mse,
            invert_class_weight: false,
            select_fraction: 0.15,
            mode: TrainMode::Supervised,
            epochs: 20,
            batch_size: 100,
            lr: 1e-4,
            weight_decay: 1e-3,
            seed: 0,
            budget_fraction: 0.15,
            tau_variant: TauVariant::B,
        }
    }
}

impl RunConfig {
    /// Parses a JSON config file; absent keys take their defaults.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = self.embed_dim;
        if d == 0 || !d.is_multiple_of(2) {
            return bad(format!("embed_dim must be positive and even, got {d}"));
        }
        for (name, h) in [("lga_heads", self.lga_heads), ("tf_heads", self.tf_heads)] {
            if h == 0 || !d.is_multiple_of(h) {
                return bad(format!("{name}={h} must divide embed_dim={d}"));
            }
        }
        if self.m_fixed == 0 {
            return bad("m_fixed must be at least 1".into());
        }
        if self.window_len == 0 {
            return bad("window_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        let w = [self.alpha, self.beta, self.lambda];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|x| *x == 0.0) {
            return bad("loss weights must be nonnegative with at least one positive".into());
        }
        for (name, f) in [
            ("select_fraction", self.select_fraction),
            ("budget_fraction", self.budget_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must be in (0, 1], got {f}"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.lr) || !nonneg(self.weight_decay) {
            return bad("lr and weight_decay must be finite and nonnegative".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_documented() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.tf_heads, c.tf_enc_layers, c.tf_dec_layers), (8, 6, 6));
        assert_eq!((c.alpha, c.beta, c.lambda), (0.5, 0.3, 0.2));
        assert_eq!(c.embed_dim / c.lga_heads, 128);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json_str(r#"{"embed_dim": 32, "tf_heads": 4, "lga_heads": 2}"#)
            .unwrap();
        assert_eq!(c.embed_dim, 32);
        assert_eq!(c.epochs, 20);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        for text in [
            r#"{"embedd_dim": 32}"#,
            r#"{"embed_dim": 33}"#,
            r#"{"embed_dim": 32, "tf_heads": 5}"#,
            r#"{"alpha": 0, "beta": 0, "lambda": 0}"#,
            r#"{"budget_fraction": 0}"#,
            r#"{"epochs": 0}"#,
            r#"{"mode": "semi"}"#,
        ] {
            let e = RunConfig::from_json_str(text).unwrap_err();
            assert!(e.is_config_error(), "{text}: {e}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let back = RunConfig::from_json_str(&a.to_json_pretty()).unwrap();
        assert_eq!(back, a);
    }
}
