//! `SUMFEAT1` embedding files.
//!
//! Layout: 8-byte magic, `u32` little-endian header length `H`, `H` bytes of
//! UTF-8 JSON `{"video_id","kind","rows","dim","fps"}`, then exactly
//! `rows·dim` little-endian `f32` values in row-major order.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"SUMFEAT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Frames,
    Captions,
    Query,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    video_id: String,
    kind: FeatureKind,
    rows: usize,
    dim: usize,
    fps: f64,
}

/// Contents of one feature file: a single embedding matrix plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub video_id: String,
    pub kind: FeatureKind,
    pub fps: f64,
    pub matrix: Tensor,
}

impl FeatureFile {
    pub fn new(video_id: impl Into<String>, kind: FeatureKind, fps: f64, matrix: Tensor) -> Self {
        FeatureFile {
            video_id: video_id.into(),
            kind,
            fps,
            matrix,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.shape().len() != 2 {
            return Err(Error::Validation(format!(
                "{}: feature matrix must be 2-D, got {:?}",
                self.video_id,
                self.matrix.shape()
            )));
        }
        if !self.matrix.is_finite() {
            return Err(Error::Validation(format!(
                "{}: non-finite embedding values",
                self.video_id
            )));
        }
        if self.kind == FeatureKind::Query && self.matrix.rows() != 1 {
            return Err(Error::Validation(format!(
                "{}: query file must have exactly one row, got {}",
                self.video_id,
                self.matrix.rows()
            )));
        }
        if !self.fps.is_finite() || self.fps < 0.0 {
            return Err(Error::Validation(format!(
                "{}: bad fps {}",
                self.video_id, self.fps
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let (rows, dim) = self.matrix.dims2();
        let header = serde_json::to_vec(&Header {
            video_id: self.video_id.clone(),
            kind: self.kind,
            rows,
            dim,
            fps: self.fps,
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(12 + header.len() + rows * dim * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses bytes; `path` is used only for error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |what: &str| {
            Error::io(
                path,
                io::Error::new(ErrorKind::UnexpectedEof, format!("truncated {what}")),
            )
        };
        if bytes.len() < 8 {
            return Err(truncated("magic"));
        }
        if &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::format(path, "bad magic, expected SUMFEAT1"));
        }
        if bytes.len() < 12 {
            return Err(truncated("header length"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| truncated("header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..body])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.rows == 0 || header.dim == 0 {
            return Err(Error::format(path, "rows and dim must be positive"));
        }
        let expected = header
            .rows
            .checked_mul(header.dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, "rows·dim overflows"))?;
        let payload = &bytes[body..];
        if payload.len() != expected {
            return Err(Error::io(
                path,
                io::Error::new(
                    if payload.len() < expected {
                        ErrorKind::UnexpectedEof
                    } else {
                        ErrorKind::InvalidData
                    },
                    format!(
                        "payload has {} bytes, header declares {}x{} floats ({expected} bytes)",
                        payload.len(),
                        header.rows,
                        header.dim
                    ),
                ),
            ));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let file = FeatureFile {
            video_id: header.video_id,
            kind: header.kind,
            fps: header.fps,
            matrix: Tensor::new(&[header.rows, header.dim], data)?,
        };
        file.validate()?;
        Ok(file)
    }
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::from_bytes(&bytes, path)
}

pub fn write_feature_file(file: &FeatureFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = file.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
