//! Weight compression for convolutional networks used as image-retrieval
//! feature extractors.
//!
//! The crate covers the whole pipeline:
//!
//! - a small network model ([`model`]) with a binary container format
//!   ([`container`]) for full-precision weights,
//! - weight statistics and entropy estimates ([`analyze`]),
//! - per-layer scalar and vector codebook training ([`quantize`]),
//! - fixed-width and canonical-Huffman index coding ([`entropy`]),
//! - structural transforms: pruning and repeated-block weight tying
//!   ([`transform`]),
//! - the compressed container and the compress/decompress entry points
//!   ([`pipeline`]),
//! - a deterministic forward pass ([`forward`]), nested-invariance-pooling
//!   descriptors ([`nip`]), and retrieval metrics ([`retrieval`]),
//! - size/fidelity sweeps ([`tradeoff`]), plain-text configuration dialects
//!   ([`config`]), and synthetic fixtures ([`synthetic`]).
//!
//! Everything is deterministic: a fixed seed produces byte-identical
//! containers and descriptors on every run, with or without the `parallel`
//! feature.

pub mod analyze;
pub mod config;
pub mod container;
pub mod entropy;
pub mod error;
pub mod forward;
pub mod model;
pub mod nip;
pub(crate) mod par;
pub mod pipeline;
pub mod quantize;
pub mod retrieval;
pub mod synthetic;
pub mod tradeoff;
pub mod transform;

pub use error::{Error, Result};
pub use model::{Layer, LayerKind, Network, SpatialParams, Tensor, TensorRole};
pub use pipeline::{
    compress, compressed_from_bytes, compressed_to_bytes, decompress, decompress_tied,
    load_compressed, save_compressed, size_report, Coding, CompressedModel, CompressionConfig,
    SizeBreakdown,
};
pub use quantize::{LayerMode, QuantizationSpec};
