//! Flat binary container for full-precision models (`NNW1`).
//!
//! ```text
//! +--------+----------------+-----------------------------+
//! | "NNW1" | u32 LE length  | manifest (UTF-8 JSON)       |
//! +--------+----------------+-----------------------------+
//! | payload tensor 0: f32 LE x n, then u32 LE CRC32       |
//! | payload tensor 1: ...                                 |
//! +--------------------------------------------------------+
//! ```
//!
//! The manifest lists layers in execution order and tensors in canonical
//! role order; payload blocks follow in exactly that order, one per tensor
//! marked `materialized`. Shape-only manifests (no payload blocks at all)
//! are valid containers — that is how full-scale architectures are shipped
//! for parameter accounting. Each payload carries its own CRC32 so a single
//! flipped bit is caught and reported against the tensor it damaged.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, LayerKind, Network, SpatialParams, Tensor, TensorRole};

/// Magic bytes opening every model container.
pub const MODEL_MAGIC: [u8; 4] = *b"NNW1";

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    arch: String,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    spatial: Option<SpatialRecord>,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct SpatialRecord {
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    role: String,
    shape: Vec<usize>,
    materialized: bool,
}

impl From<&SpatialParams> for SpatialRecord {
    fn from(sp: &SpatialParams) -> Self {
        SpatialRecord {
            kernel_h: sp.kernel_h,
            kernel_w: sp.kernel_w,
            stride: sp.stride,
            padding: sp.padding,
            groups: sp.groups,
        }
    }
}

impl From<&SpatialRecord> for SpatialParams {
    fn from(r: &SpatialRecord) -> Self {
        SpatialParams {
            kernel_h: r.kernel_h,
            kernel_w: r.kernel_w,
            stride: r.stride,
            padding: r.padding,
            groups: r.groups,
        }
    }
}

/// Serializes a network to container bytes.
pub fn model_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let manifest = ManifestRecord {
        arch: net.arch().to_owned(),
        layers: net
            .layers()
            .iter()
            .map(|layer| LayerRecord {
                name: layer.name().to_owned(),
                kind: layer.kind().tag().to_owned(),
                spatial: layer.spatial().map(SpatialRecord::from),
                tensors: layer
                    .tensors()
                    .map(|(role, t)| TensorRecord {
                        role: role.tag().to_owned(),
                        shape: t.shape().to_vec(),
                        materialized: t.is_materialized(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Manifest(format!("manifest serialization failed: {e}")))?;
    if manifest_bytes.len() > u32::MAX as usize {
        return Err(Error::Manifest("manifest exceeds 4 GiB".into()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for layer in net.layers() {
        for (_, tensor) in layer.tensors() {
            if let Some(values) = tensor.values() {
                let start = out.len();
                out.reserve(values.len() * 4 + 4);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                let crc = crc32fast::hash(&out[start..]);
                out.extend_from_slice(&crc.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses container bytes back into a network.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MODEL_MAGIC
        )));
    }
    let manifest_len = cur.take_u32("manifest length")? as usize;
    let manifest_bytes = cur.take(manifest_len, "manifest")?;
    let manifest: ManifestRecord = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::Manifest(format!("manifest JSON: {e}")))?;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for lr in &manifest.layers {
        let kind = LayerKind::from_tag(&lr.kind)
            .ok_or_else(|| Error::Manifest(format!("unknown layer kind '{}'", lr.kind)))?;
        let mut tensors = BTreeMap::new();
        for tr in &lr.tensors {
            let role = TensorRole::from_tag(&tr.role)
                .ok_or_else(|| Error::Manifest(format!("unknown tensor role '{}'", tr.role)))?;
            let tensor = if tr.materialized {
                let n = tr
                    .shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .filter(|&n| n > 0)
                    .ok_or_else(|| {
                        Error::Manifest(format!(
                            "layer '{}' {}: bad shape {:?}",
                            lr.name, tr.role, tr.shape
                        ))
                    })?;
                let raw = cur.take(n * 4, &format!("payload of '{}' {}", lr.name, tr.role))?;
                let stored_crc = cur.take_u32(&format!("CRC of '{}' {}", lr.name, tr.role))?;
                let actual_crc = crc32fast::hash(raw);
                if stored_crc != actual_crc {
                    return Err(Error::Corrupt(format!(
                        "CRC mismatch on payload of layer '{}' {} (stored {stored_crc:08x}, computed {actual_crc:08x})",
                        lr.name, tr.role
                    )));
                }
                let values: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::new(tr.shape.clone(), values).map_err(|e| {
                    Error::Manifest(format!("layer '{}' {}: {e}", lr.name, tr.role))
                })?
            } else {
                Tensor::shape_only(tr.shape.clone())
                    .map_err(|e| Error::Manifest(format!("layer '{}' {}: {e}", lr.name, tr.role)))?
            };
            if tensors.insert(role, tensor).is_some() {
                return Err(Error::Manifest(format!(
                    "layer '{}' lists {} twice",
                    lr.name, tr.role
                )));
            }
        }
        let spatial = lr.spatial.as_ref().map(SpatialParams::from);
        layers.push(Layer::from_parts(lr.name.clone(), kind, tensors, spatial)?);
    }
    if !cur.is_empty() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after last payload",
            cur.remaining()
        )));
    }
    Network::new(manifest.arch, layers)
}

/// Writes a network to a file.
pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(net)?)?;
    Ok(())
}

/// Reads a network from a file.
pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    model_from_bytes(&fs::read(path)?)
}

/// Bounds-checked byte reader shared by the container parsers.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Corrupt(format!(
                "truncated container: need {n} bytes for {what}, {} left",
                self.remaining()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn take_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpatialParams;

    fn toy_net() -> Network {
        let w = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as f32 * 0.1 - 0.9).collect())
            .unwrap();
        let b = Tensor::new(vec![2], vec![0.05, -0.05]).unwrap();
        let conv = Layer::conv("c1", w, Some(b), SpatialParams::new(3, 3, 1, 1)).unwrap();
        let relu = Layer::relu("r1");
        Network::new("toy", vec![conv, relu]).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let net = toy_net();
        let bytes = model_to_bytes(&net).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn round_trip_preserves_shape_only_tensors() {
        let w = Tensor::shape_only(vec![96, 3, 5, 5]).unwrap();
        let conv = Layer::conv("c1", w, None, SpatialParams::new(5, 5, 1, 2)).unwrap();
        let net = Network::new("shapes", vec![conv]).unwrap();
        let back = model_from_bytes(&model_to_bytes(&net).unwrap()).unwrap();
        assert_eq!(net, back);
        assert!(!back.layers()[0]
            .tensor(TensorRole::ConvWeight)
            .unwrap()
            .is_materialized());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = model_to_bytes(&toy_net()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_a_corruption_error() {
        let bytes = model_to_bytes(&toy_net()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(model_from_bytes(cut), Err(Error::Corrupt(_))));
    }

    #[test]
    fn single_bit_flip_in_payload_is_caught() {
        let net = toy_net();
        let clean = model_to_bytes(&net).unwrap();
        // Flip one bit in every payload byte position in turn; each must be
        // reported as corruption (either by CRC or by the trailing CRC check).
        let manifest_len = u32::from_le_bytes([clean[4], clean[5], clean[6], clean[7]]) as usize;
        let payload_start = 8 + manifest_len;
        for pos in payload_start..clean.len() {
            let mut bytes = clean.clone();
            bytes[pos] ^= 0x01;
            match model_from_bytes(&bytes) {
                Err(Error::Corrupt(_)) => {}
                // A flipped exponent bit can turn a value into NaN/inf, which
                // the manifest layer rejects before the CRC is even checked --
                // never silently accepted either way.
                Err(Error::Manifest(_)) => {}
                other => panic!("bit flip at {pos} not caught: {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_garbage_is_a_corruption_error() {
        let mut bytes = model_to_bytes(&toy_net()).unwrap();
        bytes.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn nan_payload_is_rejected_at_load() {
        let net = toy_net();
        let mut bytes = model_to_bytes(&net).unwrap();
        let manifest_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let payload_start = 8 + manifest_len;
        // Overwrite the first f32 with a quiet NaN and fix up the CRC so only
        // the value check can object.
        bytes[payload_start..payload_start + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let crc = crc32fast::hash(&bytes[payload_start..payload_start + 18 * 4]);
        let crc_pos = payload_start + 18 * 4;
        bytes[crc_pos..crc_pos + 4].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Manifest(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.nnw");
        let net = toy_net();
        save_model(&net, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), net);
    }
}
