//! Single-file weight container.
//!
//! Layout: `u64` little-endian manifest length, the manifest as JSON, then
//! the blob of little-endian `f32` values. Every tensor is a contiguous,
//! row-major byte range of the blob.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{GeluMlpWeights, SwiGluWeights};
use crate::model::{Block, BlockConfig, FfnKind, Model};
use crate::tensor::{DenseMatrix, DenseVector};

pub const DTYPE_F32: &str = "f32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: BlockConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
}

type NamedTensor<'a> = (String, Vec<usize>, &'a [f32]);

fn matrix<'a>(i: usize, name: &str, t: &'a DenseMatrix) -> NamedTensor<'a> {
    (format!("blocks.{i}.{name}"), vec![t.rows(), t.cols()], t.as_slice())
}

fn vector<'a>(i: usize, name: &str, t: &'a DenseVector) -> NamedTensor<'a> {
    (format!("blocks.{i}.{name}"), vec![t.len()], t.as_slice())
}

fn block_tensors(i: usize, block: &Block) -> Vec<NamedTensor<'_>> {
    match block {
        Block::SwiGlu(w) => vec![
            matrix(i, "w_gate", w.w_gate()),
            matrix(i, "w_up", w.w_up()),
            matrix(i, "w_down", w.w_down()),
        ],
        Block::GeluMlp(w) => vec![
            matrix(i, "w_up", w.w_up()),
            vector(i, "b_up", w.b_up()),
            matrix(i, "w_down", w.w_down()),
            vector(i, "b_down", w.b_down()),
        ],
    }
}

/// Assembles container bytes from a manifest and blob as given, without
/// checking them. Useful for producing deliberately broken files.
pub fn encode_container(manifest: &Manifest, blob: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(8 + header.len() + blob.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(blob);
    Ok(out)
}

/// Splits container bytes into the parsed manifest and the blob.
pub fn split_container(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::MalformedManifest("missing manifest length prefix".into()))?;
    let len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::MalformedManifest("manifest length overflows".into()))?;
    let header = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| Error::MalformedManifest(format!("manifest claims {len} bytes, file is shorter")))?;
    let manifest: Manifest =
        serde_json::from_slice(header).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    Ok((manifest, &bytes[8 + len..]))
}

/// Serializes a model. Tensors are laid out in manifest key order.
pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut parts: Vec<NamedTensor<'_>> = model
        .blocks()
        .iter()
        .enumerate()
        .flat_map(|(i, b)| block_tensors(i, b))
        .collect();
    parts.sort_by(|a, b| a.0.cmp(&b.0));
    let mut tensors = BTreeMap::new();
    let mut blob = Vec::new();
    for (name, shape, data) in parts {
        let entry = TensorEntry {
            shape,
            dtype: DTYPE_F32.into(),
            byte_offset: blob.len() as u64,
            byte_len: 4 * data.len() as u64,
        };
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(name, entry);
    }
    let manifest = Manifest {
        config: model.config().clone(),
        tensors,
    };
    encode_container(&manifest, &blob)
}

/// Checks every entry against the blob and returns the decoded tensors.
/// Shape and values of each stored tensor.
type RawTensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn read_tensors(manifest: &Manifest, blob: &[u8]) -> Result<RawTensors> {
    let mut ranges: Vec<(u64, u64, &str)> = Vec::new();
    for (name, e) in &manifest.tensors {
        if e.dtype != DTYPE_F32 {
            return Err(Error::MalformedManifest(format!("`{name}` has dtype `{}`", e.dtype)));
        }
        let count = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if count.and_then(|c| c.checked_mul(4)) != Some(e.byte_len) {
            return Err(Error::MalformedManifest(format!(
                "`{name}`: byte_len {} does not match shape {:?}",
                e.byte_len, e.shape
            )));
        }
        let end = e
            .byte_offset
            .checked_add(e.byte_len)
            .ok_or_else(|| Error::MalformedManifest(format!("`{name}`: offset overflows")))?;
        ranges.push((e.byte_offset, end, name));
    }
    ranges.sort();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::OffsetOverlap {
                first: w[0].2.to_string(),
                second: w[1].2.to_string(),
            });
        }
    }
    if let Some(&(_, end, _)) = ranges.iter().max_by_key(|r| r.1) {
        if end > blob.len() as u64 {
            return Err(Error::TruncatedBlob {
                needed: end as usize,
                found: blob.len(),
            });
        }
    }
    let mut out = BTreeMap::new();
    for (name, e) in &manifest.tensors {
        let bytes = &blob[e.byte_offset as usize..(e.byte_offset + e.byte_len) as usize];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("`{name}` contains NaN or infinite values")));
        }
        out.insert(name.clone(), (e.shape.clone(), data));
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let (manifest, blob) = split_container(bytes)?;
    manifest.config.validate()?;
    let mut tensors = read_tensors(&manifest, blob)?;
    let cfg = &manifest.config;
    let (d, h) = (cfg.d_model, cfg.d_hidden);
    let mut take = |name: String, shape: &[usize]| -> Result<Vec<f32>> {
        let (s, data) = tensors
            .remove(&name)
            .ok_or_else(|| Error::MalformedManifest(format!("missing tensor `{name}`")))?;
        if s != shape {
            return Err(Error::MalformedManifest(format!(
                "`{name}` has shape {s:?}, expected {shape:?}"
            )));
        }
        Ok(data)
    };
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let t = |n: &str| format!("blocks.{i}.{n}");
        let block = match cfg.ffn_kind {
            FfnKind::SwiGlu => Block::SwiGlu(SwiGluWeights::new(
                DenseMatrix::new(d, h, take(t("w_gate"), &[d, h])?)?,
                DenseMatrix::new(d, h, take(t("w_up"), &[d, h])?)?,
                DenseMatrix::new(h, d, take(t("w_down"), &[h, d])?)?,
            )?),
            FfnKind::GeluMlp => Block::GeluMlp(GeluMlpWeights::new(
                DenseMatrix::new(d, h, take(t("w_up"), &[d, h])?)?,
                DenseVector::new(take(t("b_up"), &[h])?),
                DenseMatrix::new(h, d, take(t("w_down"), &[h, d])?)?,
                DenseVector::new(take(t("b_down"), &[d])?),
            )?),
        };
        blocks.push(block);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::MalformedManifest(format!("unexpected tensor `{extra}`")));
    }
    Model::from_blocks(manifest.config.clone(), blocks)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
