//! The end-to-end compression pipeline and the compressed container format.
//!
//! Compression runs prune -> tie -> quantize, and the result serializes to a
//! binary container: magic `NNZ1`, a version byte, a little-endian u32
//! manifest length, a JSON manifest echoing the full configuration (seed
//! included), then one record per codebook and per coded tensor, each
//! followed by the CRC32 of its payload. Index streams are either
//! fixed-width or canonical-Huffman coded; Huffman tables serialize as one
//! length byte per codebook level ahead of their stream record.
//!
//! Serialization is a pure function of the in-memory model: compressing the
//! same network with the same configuration and seed yields byte-identical
//! files on every platform and thread count.

use serde::{Deserialize, Serialize};

use crate::container::Cursor;
use crate::entropy::{
    build_huffman, decode_fixed, decode_huffman, encode_fixed, encode_huffman, histogram,
    width_for_levels, Bitstream, HuffmanTable,
};
use crate::error::{Error, Result};
use crate::model::{LayerKind, Network, SpatialParams, Tensor, TensorRole};
use crate::quantize::{
    dequantize_network, quantize_network, CodedTensor, IndexTensor, LayerQuantizer,
    QuantizationSpec, QuantizedLayer, QuantizedNetwork, ScalarQuantizer, VectorQuantizer,
};
use crate::transform::{prune_at, tie_blocks, untie, ExpansionStep, TiedNetwork, TyingPlan};

/// Magic bytes opening every compressed container.
pub const COMPRESSED_MAGIC: [u8; 4] = *b"NNZ1";

/// Container format version written by this build.
pub const COMPRESSED_VERSION: u8 = 1;

/// How index streams are entropy coded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coding {
    /// Fixed-width codes at `ceil(log2(levels))` bits.
    Fixed,
    /// Canonical Huffman codes trained per tensor.
    Variable,
}

/// Everything `compress` needs besides the network.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    /// Quantization settings (modes, overrides, batch-norm exemption).
    pub quant: QuantizationSpec,
    /// Index-stream coding.
    pub coding: Coding,
    /// Drop every layer after this one before quantizing.
    pub prune_at: Option<String>,
    /// Deduplicate repeated blocks before quantizing. Overrides in `quant`
    /// refer to the deduplicated network's layer names.
    pub tying: Option<TyingPlan>,
    /// Seed for every codebook training run.
    pub seed: u64,
}

impl Default for CompressionConfig {
    /// 4-bit scalar codebooks, fixed-width coding, no pruning or tying.
    fn default() -> Self {
        CompressionConfig {
            quant: QuantizationSpec::default(),
            coding: Coding::Fixed,
            prune_at: None,
            tying: None,
            seed: 0,
        }
    }
}

/// A compressed network: quantized layers plus the settings that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    /// Architecture tag.
    pub arch: String,
    /// Codebook training seed.
    pub seed: u64,
    /// Index-stream coding.
    pub coding: Coding,
    /// Whether batch-norm tensors were exempted.
    pub bn_exempt: bool,
    /// The prune point, if pruning ran.
    pub pruned_at: Option<String>,
    /// Expansion recipe, present when tying ran.
    pub expansion: Option<Vec<ExpansionStep>>,
    /// Quantized layers of the (deduplicated) network.
    pub layers: Vec<QuantizedLayer>,
}

/// Runs the pipeline: optional prune, optional tie, then per-layer
/// quantization.
pub fn compress(net: &Network, cfg: &CompressionConfig) -> Result<CompressedModel> {
    let pruned;
    let stage1 = match &cfg.prune_at {
        Some(cut) => {
            pruned = prune_at(net, cut)?;
            &pruned
        }
        None => net,
    };
    let (unique, expansion) = match &cfg.tying {
        Some(plan) if !plan.groups.is_empty() => {
            let tied = tie_blocks(stage1, plan)?;
            (tied.unique, Some(tied.expansion))
        }
        _ => (stage1.clone(), None),
    };
    let qnet = quantize_network(&unique, &cfg.quant, cfg.seed)?;
    Ok(CompressedModel {
        arch: qnet.arch,
        seed: cfg.seed,
        coding: cfg.coding,
        bn_exempt: cfg.quant.bn_exempt,
        pruned_at: cfg.prune_at.clone(),
        expansion,
        layers: qnet.layers,
    })
}

/// Rebuilds the full-precision network without expanding tied blocks.
pub fn decompress_tied(model: &CompressedModel) -> Result<Network> {
    dequantize_network(&QuantizedNetwork {
        arch: model.arch.clone(),
        seed: model.seed,
        layers: model.layers.clone(),
    })
}

/// Rebuilds the full-precision network, expanding tied blocks back to the
/// original layer sequence.
pub fn decompress(model: &CompressedModel) -> Result<Network> {
    let unique = decompress_tied(model)?;
    match &model.expansion {
        Some(steps) => untie(&TiedNetwork {
            unique,
            expansion: steps.clone(),
        }),
        None => Ok(unique),
    }
}

// ---------------------------------------------------------------------------
// Manifest records
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ZManifest {
    arch: String,
    seed: u64,
    coding: Coding,
    bn_exempt: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pruned_at: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    expansion: Option<Vec<ZStep>>,
    layers: Vec<ZLayer>,
}

#[derive(Serialize, Deserialize)]
struct ZStep {
    source: String,
    instance: String,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
struct ZSpatial {
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl From<SpatialParams> for ZSpatial {
    fn from(s: SpatialParams) -> Self {
        ZSpatial {
            kernel_h: s.kernel_h,
            kernel_w: s.kernel_w,
            stride: s.stride,
            padding: s.padding,
            groups: s.groups,
        }
    }
}

impl From<ZSpatial> for SpatialParams {
    fn from(z: ZSpatial) -> Self {
        SpatialParams {
            kernel_h: z.kernel_h,
            kernel_w: z.kernel_w,
            stride: z.stride,
            padding: z.padding,
            groups: z.groups,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ZLayer {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    spatial: Option<ZSpatial>,
    quantizers: Vec<ZQuant>,
    tensors: Vec<ZTensor>,
}

#[derive(Serialize, Deserialize)]
struct ZQuant {
    kind: String,
    levels: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ZTensor {
    role: String,
    shape: Vec<usize>,
    coding: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    materialized: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    quantizer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pad_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bit_width: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    stream_bits: Option<usize>,
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Stored-size accounting for one container, all in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeBreakdown {
    /// Entropy-coded index streams.
    pub indices: usize,
    /// Codebook payloads.
    pub codebooks: usize,
    /// Huffman length tables.
    pub tables: usize,
    /// Full-precision (exempt or raw) tensor payloads.
    pub exempt: usize,
    /// Header, JSON manifest, and every record's checksum word.
    pub manifest: usize,
    /// Exact container size; always the sum of the other fields.
    pub total: usize,
}

enum Category {
    Index,
    Codebook,
    Table,
    Exempt,
}

struct Record {
    payload: Vec<u8>,
    category: Category,
}

fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn codebook_values(q: &LayerQuantizer) -> &[f32] {
    match q {
        LayerQuantizer::Scalar(s) => s.centroids(),
        LayerQuantizer::Vector(v) => v.codebook(),
    }
}

fn assemble(model: &CompressedModel) -> Result<(Vec<u8>, SizeBreakdown)> {
    let mut records: Vec<Record> = Vec::new();
    let mut zlayers = Vec::with_capacity(model.layers.len());

    for ql in &model.layers {
        let mut zquants = Vec::with_capacity(ql.quantizers.len());
        for q in &ql.quantizers {
            let (kind, levels, dim) = match q {
                LayerQuantizer::Scalar(s) => ("scalar", s.levels(), 1),
                LayerQuantizer::Vector(v) => ("vector", v.levels(), v.dim()),
            };
            zquants.push(ZQuant {
                kind: kind.into(),
                levels,
                dim,
            });
            records.push(Record {
                payload: f32s_to_le(codebook_values(q)),
                category: Category::Codebook,
            });
        }

        let mut ztensors = Vec::with_capacity(ql.tensors.len());
        for (role, coded) in &ql.tensors {
            match coded {
                CodedTensor::Raw(t) => {
                    if let Some(values) = t.values() {
                        records.push(Record {
                            payload: f32s_to_le(values),
                            category: Category::Exempt,
                        });
                    }
                    ztensors.push(ZTensor {
                        role: role.tag().into(),
                        shape: t.shape().to_vec(),
                        coding: "raw".into(),
                        materialized: Some(t.is_materialized()),
                        quantizer: None,
                        pad_count: None,
                        bit_width: None,
                        stream_bits: None,
                    });
                }
                CodedTensor::Indexed { quantizer, indices } => {
                    let q = ql.quantizers.get(*quantizer).ok_or_else(|| {
                        Error::Argument(format!(
                            "layer '{}' {role} references missing quantizer {quantizer}",
                            ql.name
                        ))
                    })?;
                    let levels = q.levels();
                    let (coding, bit_width, stream) = match model.coding {
                        Coding::Fixed => {
                            let width = width_for_levels(levels);
                            let bs = encode_fixed(&indices.indices, width)?;
                            ("fixed", Some(width), bs)
                        }
                        Coding::Variable => {
                            let freqs = histogram(&indices.indices, levels)?;
                            let table = build_huffman(&freqs)?;
                            let bs = encode_huffman(&indices.indices, &table)?;
                            records.push(Record {
                                payload: table.lengths().to_vec(),
                                category: Category::Table,
                            });
                            ("variable", None, bs)
                        }
                    };
                    ztensors.push(ZTensor {
                        role: role.tag().into(),
                        shape: indices.shape.clone(),
                        coding: coding.into(),
                        materialized: None,
                        quantizer: Some(*quantizer),
                        pad_count: Some(indices.pad_count),
                        bit_width,
                        stream_bits: Some(stream.bit_len()),
                    });
                    records.push(Record {
                        payload: stream.bytes().to_vec(),
                        category: Category::Index,
                    });
                }
            }
        }

        zlayers.push(ZLayer {
            name: ql.name.clone(),
            kind: ql.kind.tag().into(),
            spatial: ql.spatial.map(ZSpatial::from),
            quantizers: zquants,
            tensors: ztensors,
        });
    }

    let manifest = ZManifest {
        arch: model.arch.clone(),
        seed: model.seed,
        coding: model.coding,
        bn_exempt: model.bn_exempt,
        pruned_at: model.pruned_at.clone(),
        expansion: model.expansion.as_ref().map(|steps| {
            steps
                .iter()
                .map(|s| ZStep {
                    source: s.source.clone(),
                    instance: s.instance.clone(),
                })
                .collect()
        }),
        layers: zlayers,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(&COMPRESSED_MAGIC);
    out.push(COMPRESSED_VERSION);
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    let mut sizes = SizeBreakdown {
        indices: 0,
        codebooks: 0,
        tables: 0,
        exempt: 0,
        manifest: 4 + 1 + 4 + manifest_json.len() + 4 * records.len(),
        total: 0,
    };
    for rec in &records {
        out.extend_from_slice(&rec.payload);
        out.extend_from_slice(&crc32fast::hash(&rec.payload).to_le_bytes());
        let slot = match rec.category {
            Category::Index => &mut sizes.indices,
            Category::Codebook => &mut sizes.codebooks,
            Category::Table => &mut sizes.tables,
            Category::Exempt => &mut sizes.exempt,
        };
        *slot += rec.payload.len();
    }
    sizes.total = out.len();
    debug_assert_eq!(
        sizes.total,
        sizes.indices + sizes.codebooks + sizes.tables + sizes.exempt + sizes.manifest
    );
    Ok((out, sizes))
}

/// Serializes a compressed model to container bytes.
pub fn compressed_to_bytes(model: &CompressedModel) -> Result<Vec<u8>> {
    assemble(model).map(|(bytes, _)| bytes)
}

/// Computes the exact stored-size breakdown of a model's container form.
pub fn size_report(model: &CompressedModel) -> Result<SizeBreakdown> {
    assemble(model).map(|(_, sizes)| sizes)
}

fn take_record<'a>(cur: &mut Cursor<'a>, n: usize, what: &str) -> Result<&'a [u8]> {
    let payload = cur.take(n, what)?;
    let stored = cur.take_u32(&format!("{what} checksum"))?;
    if crc32fast::hash(payload) != stored {
        return Err(Error::Corrupt(format!("checksum mismatch in {what}")));
    }
    Ok(payload)
}

/// Parses container bytes back into a compressed model, verifying structure
/// and every record checksum.
pub fn compressed_from_bytes(bytes: &[u8]) -> Result<CompressedModel> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "container magic")?;
    if magic != COMPRESSED_MAGIC {
        return Err(Error::Format(format!(
            "not a compressed-model container (magic {magic:02x?})"
        )));
    }
    let version = cur.take(1, "format version")?[0];
    if version != COMPRESSED_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {COMPRESSED_VERSION})"
        )));
    }
    let manifest_len = cur.take_u32("manifest length")? as usize;
    let manifest_bytes = cur.take(manifest_len, "manifest")?;
    let manifest: ZManifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| Error::Manifest(e.to_string()))?;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for zl in &manifest.layers {
        let kind = LayerKind::from_tag(&zl.kind).ok_or_else(|| {
            Error::Manifest(format!("layer '{}' has unknown kind '{}'", zl.name, zl.kind))
        })?;

        let mut quantizers = Vec::with_capacity(zl.quantizers.len());
        for (qi, zq) in zl.quantizers.iter().enumerate() {
            let what = format!("layer '{}' codebook {qi}", zl.name);
            let payload = take_record(&mut cur, zq.levels * zq.dim * 4, &what)?;
            let values = le_to_f32s(payload);
            let q = match zq.kind.as_str() {
                "scalar" => {
                    if zq.dim != 1 {
                        return Err(Error::Manifest(format!(
                            "{what} declares a scalar codebook of dim {}",
                            zq.dim
                        )));
                    }
                    LayerQuantizer::Scalar(
                        ScalarQuantizer::new(values)
                            .map_err(|e| Error::Manifest(format!("{what}: {e}")))?,
                    )
                }
                "vector" => LayerQuantizer::Vector(
                    VectorQuantizer::new(zq.dim, values)
                        .map_err(|e| Error::Manifest(format!("{what}: {e}")))?,
                ),
                other => {
                    return Err(Error::Manifest(format!(
                        "{what} has unknown codebook kind '{other}'"
                    )))
                }
            };
            quantizers.push(q);
        }

        let mut tensors = Vec::with_capacity(zl.tensors.len());
        for zt in &zl.tensors {
            let role = TensorRole::from_tag(&zt.role).ok_or_else(|| {
                Error::Manifest(format!(
                    "layer '{}' has unknown tensor role '{}'",
                    zl.name, zt.role
                ))
            })?;
            let what = format!("layer '{}' {role}", zl.name);
            let coded = match zt.coding.as_str() {
                "raw" => {
                    let materialized = zt.materialized.unwrap_or(true);
                    let tensor = if materialized {
                        let elems: usize = zt.shape.iter().product();
                        let payload = take_record(&mut cur, elems * 4, &what)?;
                        Tensor::new(zt.shape.clone(), le_to_f32s(payload))
                            .map_err(|e| Error::Manifest(format!("{what}: {e}")))?
                    } else {
                        Tensor::shape_only(zt.shape.clone())
                            .map_err(|e| Error::Manifest(format!("{what}: {e}")))?
                    };
                    CodedTensor::Raw(tensor)
                }
                stream_kind @ ("fixed" | "variable") => {
                    let qi = zt.quantizer.ok_or_else(|| {
                        Error::Manifest(format!("{what} is coded but names no codebook"))
                    })?;
                    let q = quantizers.get(qi).ok_or_else(|| {
                        Error::Manifest(format!("{what} references missing codebook {qi}"))
                    })?;
                    let levels = q.levels();
                    let dim = q.dim();
                    let elems: usize = zt.shape.iter().product();
                    if elems == 0 {
                        return Err(Error::Manifest(format!("{what} has an empty shape")));
                    }
                    let expect_pad = elems.div_ceil(dim) * dim - elems;
                    if zt.pad_count != Some(expect_pad) {
                        return Err(Error::Manifest(format!(
                            "{what} declares padding {:?}, expected {expect_pad}",
                            zt.pad_count
                        )));
                    }
                    let count = (elems + expect_pad) / dim;
                    let stream_bits = zt.stream_bits.ok_or_else(|| {
                        Error::Manifest(format!("{what} declares no stream length"))
                    })?;
                    let indices = if stream_kind == "fixed" {
                        let width = width_for_levels(levels);
                        if zt.bit_width != Some(width) {
                            return Err(Error::Manifest(format!(
                                "{what} declares width {:?}, expected {width} for {levels} levels",
                                zt.bit_width
                            )));
                        }
                        if stream_bits != count * width as usize {
                            return Err(Error::Manifest(format!(
                                "{what} declares {stream_bits} stream bits, expected {}",
                                count * width as usize
                            )));
                        }
                        let payload =
                            take_record(&mut cur, stream_bits.div_ceil(8), &what)?;
                        let bs = Bitstream::from_parts(payload.to_vec(), stream_bits)?;
                        decode_fixed(&bs, width, count)?
                    } else {
                        let table_payload =
                            take_record(&mut cur, levels, &format!("{what} code table"))?;
                        let table = HuffmanTable::from_lengths(table_payload.to_vec())?;
                        let payload =
                            take_record(&mut cur, stream_bits.div_ceil(8), &what)?;
                        let bs = Bitstream::from_parts(payload.to_vec(), stream_bits)?;
                        decode_huffman(&bs, &table, count)?
                    };
                    if let Some(bad) = indices.iter().find(|&&i| i as usize >= levels) {
                        return Err(Error::Manifest(format!(
                            "{what} holds index {bad}, beyond its {levels}-level codebook"
                        )));
                    }
                    CodedTensor::Indexed {
                        quantizer: qi,
                        indices: IndexTensor {
                            shape: zt.shape.clone(),
                            indices,
                            pad_count: expect_pad,
                        },
                    }
                }
                other => {
                    return Err(Error::Manifest(format!(
                        "{what} has unknown coding '{other}'"
                    )))
                }
            };
            tensors.push((role, coded));
        }

        layers.push(QuantizedLayer {
            name: zl.name.clone(),
            kind,
            spatial: zl.spatial.map(SpatialParams::from),
            quantizers,
            tensors,
        });
    }

    if !cur.is_empty() {
        return Err(Error::Corrupt(format!(
            "{} unexpected bytes after the last record",
            cur.remaining()
        )));
    }

    Ok(CompressedModel {
        arch: manifest.arch,
        seed: manifest.seed,
        coding: manifest.coding,
        bn_exempt: manifest.bn_exempt,
        pruned_at: manifest.pruned_at,
        expansion: manifest.expansion.map(|steps| {
            steps
                .into_iter()
                .map(|s| ExpansionStep {
                    source: s.source,
                    instance: s.instance,
                })
                .collect()
        }),
        layers,
    })
}

/// Writes a compressed model to a file.
pub fn save_compressed(model: &CompressedModel, path: &std::path::Path) -> Result<()> {
    Ok(std::fs::write(path, compressed_to_bytes(model)?)?)
}

/// Reads a compressed model from a file.
pub fn load_compressed(path: &std::path::Path) -> Result<CompressedModel> {
    compressed_from_bytes(&std::fs::read(path)?)
}
