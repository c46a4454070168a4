//! Calibration artifact: per-layer rotations and codebooks.
//!
//! File layout:
//!
//! ```text
//! b"I4KVCAL1" | header_len: u32 LE | JSON header | body: f64 LE values
//! ```
//!
//! The body holds, layer by layer, each learned rotation matrix (row-major,
//! `head_dim²` values) followed by each codebook's centroids (row-major).
//! Shapes come from the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{Pooling, RotationSpec, Targets};
use crate::tensor::FloatMatrix;
use crate::vq::{Codebook, CodebookKind};

const MAGIC: &[u8; 8] = b"I4KVCAL1";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    pub layer: usize,
    pub rotation: RotationSpec,
    pub pooling: Pooling,
    pub codebooks: Vec<Codebook>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationArtifact {
    pub head_dim: usize,
    pub alpha: f64,
    pub seed: u64,
    pub layers: Vec<LayerCalibration>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    head_dim: usize,
    alpha: f64,
    seed: u64,
    layers: Vec<LayerHeader>,
    body_values: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    layer: usize,
    order: usize,
    targets: Targets,
    signs: Option<Vec<i8>>,
    learned_matrices: usize,
    learned_values: bool,
    pooling: Pooling,
    codebooks: Vec<CodebookHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookHeader {
    kind: CodebookKind,
    clusters: usize,
}

impl CalibrationArtifact {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body: Vec<f64> = Vec::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let r = &l.rotation;
            if r.head_dim() != self.head_dim {
                return Err(Error::Format(format!("layer {} rotation has head_dim {}", l.layer, r.head_dim())));
            }
            let learned = r.learned().unwrap_or(&[]);
            for m in learned {
                body.extend_from_slice(m.as_slice());
            }
            for b in &l.codebooks {
                if b.dim() != self.head_dim {
                    return Err(Error::Format(format!("layer {} codebook has dim {}", l.layer, b.dim())));
                }
                body.extend_from_slice(b.centroids().as_slice());
            }
            layers.push(LayerHeader {
                layer: l.layer,
                order: r.order(),
                targets: r.targets(),
                signs: r.signs().map(|s| s.iter().map(|&x| if x < 0.0 { -1 } else { 1 }).collect()),
                learned_matrices: learned.len(),
                learned_values: r.learned_values(),
                pooling: l.pooling,
                codebooks: l.codebooks.iter().map(|b| CodebookHeader { kind: b.kind(), clusters: b.len() }).collect(),
            });
        }
        let header = Header {
            version: ARTIFACT_VERSION,
            head_dim: self.head_dim,
            alpha: self.alpha,
            seed: self.seed,
            layers,
            body_values: body.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in body {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(fmt("not a calibration artifact"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + hlen).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.version != ARTIFACT_VERSION {
            return Err(Error::Format(format!("unsupported artifact version {}", header.version)));
        }
        let body = &bytes[12 + hlen..];
        if body.len() != 8 * header.body_values {
            return Err(fmt("body length does not match header"));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let d = header.head_dim;
        let mut take = |rows: usize| -> Result<FloatMatrix> {
            let data: Vec<f64> = values.by_ref().take(rows * d).collect();
            if data.len() != rows * d {
                return Err(fmt("body ends early"));
            }
            FloatMatrix::new(rows, d, data)
        };
        let mut layers = Vec::with_capacity(header.layers.len());
        for l in header.layers {
            let mut rotation = RotationSpec::hadamard(d, l.order, l.targets)?;
            if let Some(signs) = l.signs {
                rotation = rotation.with_signs(signs.into_iter().map(f64::from).collect())?;
            }
            if l.learned_matrices > 0 {
                let learned = (0..l.learned_matrices).map(|_| take(d)).collect::<Result<Vec<_>>>()?;
                rotation = rotation.with_learned(learned)?;
            }
            rotation = rotation.with_learned_values(l.learned_values);
            let codebooks = l
                .codebooks
                .iter()
                .map(|c| Codebook::new(take(c.clusters)?, c.kind))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerCalibration { layer: l.layer, rotation, pooling: l.pooling, codebooks });
        }
        Ok(Self { head_dim: d, alpha: header.alpha, seed: header.seed, layers })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerCalibration> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}
