//! Checkpoint container: `SUMCKPT1`, u32 LE header length, JSON header, then
//! parameters, Adam first moments and Adam second moments as LE `f32`.

use std::fs;
use std::io::{self, ErrorKind, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SUMCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    /// Completed training epochs.
    pub epoch: usize,
}

fn push_f32s(out: &mut Vec<u8>, ts: &[Tensor]) {
    for t in ts {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: self.model.config.clone(),
            config_hash: self.model.config.hash(),
            epoch: self.epoch,
            adam: self.adam.config,
            adam_step: self.adam.step_count(),
            tensors: self
                .model
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serialises");
        let n = self.model.params.num_scalars();
        let mut out = Vec::with_capacity(12 + header.len() + 12 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        push_f32s(&mut out, self.model.params.tensors());
        push_f32s(&mut out, self.adam.first_moments());
        push_f32s(&mut out, self.adam.second_moments());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |what: &str| {
            Error::io(
                path,
                io::Error::new(ErrorKind::UnexpectedEof, format!("truncated {what}")),
            )
        };
        if bytes.len() < 12 {
            return Err(truncated("preamble"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic, expected SUMCKPT1"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| truncated("header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..body])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        header.config.validate()?;
        if header.config.hash() != header.config_hash {
            return Err(Error::Validation(format!(
                "{}: config hash mismatch",
                path.display()
            )));
        }
        let counts: Vec<usize> = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product())
            .collect();
        let total: usize = counts.iter().sum();
        let payload = &bytes[body..];
        if payload.len() != total * 12 {
            return Err(Error::io(
                path,
                io::Error::new(
                    ErrorKind::InvalidData,
                    format!(
                        "payload is {} bytes, expected {}",
                        payload.len(),
                        total * 12
                    ),
                ),
            ));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut section = || -> Result<Vec<Tensor>> {
            header
                .tensors
                .iter()
                .zip(&counts)
                .map(|(e, &n)| Tensor::new(&e.shape, floats.by_ref().take(n).collect()))
                .collect()
        };
        let params = section()?;
        let first = section()?;
        let second = section()?;
        let named = header
            .tensors
            .iter()
            .map(|e| e.name.clone())
            .zip(params)
            .collect();
        let model = Model::from_tensors(&header.config, named)?;
        if !model.params.all_finite() {
            return Err(Error::Validation(format!(
                "{}: non-finite parameters",
                path.display()
            )));
        }
        model.params.check_congruent(&first)?;
        let adam = AdamState::from_parts(header.adam, header.adam_step, first, second)?;
        Ok(Checkpoint {
            model,
            adam,
            epoch: header.epoch,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Errors unless `config` hashes to the checkpoint's config.
    pub fn check_config(&self, config: &RunConfig) -> Result<()> {
        if config.hash() != self.model.config.hash() {
            return Err(Error::Config(
                "config does not match the checkpoint's config".into(),
            ));
        }
        Ok(())
    }
}

pub fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr as f32,
        weight_decay: cfg.weight_decay as f32,
        ..AdamConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            embed_dim: 4,
            m_fixed: 2,
            lga_heads: 2,
            tf_heads: 2,
            tf_enc_layers: 1,
            tf_dec_layers: 1,
            ..Default::default()
        }
    }

    fn ckpt() -> Checkpoint {
        let model = Model::new(&tiny()).unwrap();
        let adam = AdamState::new(&model.params, adam_config(&tiny()));
        Checkpoint {
            model,
            adam,
            epoch: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = ckpt();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!(back.epoch, 3);
        assert_eq!(back.model.params.tensors(), c.model.params.tensors());
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn corrupted_files_rejected() {
        let c = ckpt();
        let bytes = c.to_bytes();
        let p = Path::new("x");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4], p),
            Err(Error::Io { .. })
        ));
        // tamper with the config but keep the hash
        let needle = b"\"epochs\":20";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let mut t2 = bytes.clone();
        t2[at + needle.len() - 1] = b'1';
        let e = Checkpoint::from_bytes(&t2, p).unwrap_err();
        assert!(e.to_string().contains("hash"), "{e}");
    }

    #[test]
    fn config_check() {
        let c = ckpt();
        c.check_config(&tiny()).unwrap();
        let other = RunConfig { seed: 9, ..tiny() };
        assert!(c.check_config(&other).unwrap_err().is_config_error());
    }
}
