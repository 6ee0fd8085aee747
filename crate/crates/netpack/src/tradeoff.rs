//! Sweeps the size/fidelity trade-off over codebook bit widths and prune
//! points.
//!
//! Each cell of the sweep prunes the network at one cut, quantizes every
//! remaining conv layer with one uniform scalar bit width, and measures both
//! the exact container size and the descriptor drift against the
//! full-precision pruned network on a shared set of synthetic probe images.
//! Results come back as rows that render to CSV with stable formatting, so
//! repeated sweeps with the same options are byte-identical.

use crate::error::{Error, Result};
use crate::forward::Image;
use crate::model::{LayerKind, Network, TensorRole};
use crate::nip::{descriptor_drift, NipConfig};
use crate::par;
use crate::pipeline::{compress, decompress, size_report, Coding, CompressionConfig};
use crate::quantize::QuantizationSpec;
use crate::synthetic::synthetic_image;
use crate::transform::prune_at;

/// Settings for one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffOptions {
    /// Scalar codebook widths to try, in bits.
    pub bits: Vec<u8>,
    /// Prune points to try; `None` keeps the whole network.
    pub cuts: Vec<Option<String>>,
    /// Index-stream coding for the size measurement.
    pub coding: Coding,
    /// Number of synthetic probe images.
    pub images: usize,
    /// Probe image height and width in pixels.
    pub image_size: usize,
    /// Seed for probe image synthesis and codebook training.
    pub seed: u64,
    /// Descriptor settings. Leave `layer` unset so each cell's descriptor
    /// is taken at the end of its own pruned network.
    pub nip: NipConfig,
}

impl Default for TradeoffOptions {
    /// Widths 2/4/6/8 on the unpruned network, fixed-width coding, four
    /// 32-pixel probe images.
    fn default() -> Self {
        TradeoffOptions {
            bits: vec![2, 4, 6, 8],
            cuts: vec![None],
            coding: Coding::Fixed,
            images: 4,
            image_size: 32,
            seed: 0,
            nip: NipConfig::default(),
        }
    }
}

/// One measured cell of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    /// Codebook width in bits.
    pub bits: u8,
    /// Prune point, or `None` for the full network.
    pub cut: Option<String>,
    /// Exact compressed container size in bytes.
    pub bytes: usize,
    /// `log10` of the container size.
    pub log10_bytes: f64,
    /// Mean cosine similarity between reference and compressed descriptors.
    pub mean_cosine: f64,
    /// Mean L2 distance between reference and compressed descriptors.
    pub mean_l2: f64,
}

fn input_channels(net: &Network) -> Result<usize> {
    for layer in net.layers() {
        if layer.kind() != LayerKind::Conv {
            continue;
        }
        let weight = layer.tensor(TensorRole::ConvWeight).ok_or_else(|| {
            Error::Shape(format!("conv layer '{}' has no weight tensor", layer.name()))
        })?;
        let groups = layer.spatial().map_or(1, |s| s.groups);
        return Ok(weight.shape()[1] * groups);
    }
    Err(Error::Argument(
        "the network has no conv layer to probe".into(),
    ))
}

/// Runs the full sweep and returns one row per (bits, cut) cell, widths
/// outermost.
pub fn tradeoff_sweep(net: &Network, options: &TradeoffOptions) -> Result<Vec<TradeoffRow>> {
    if options.bits.is_empty() {
        return Err(Error::Argument("the sweep needs at least one bit width".into()));
    }
    if options.cuts.is_empty() {
        return Err(Error::Argument("the sweep needs at least one cut".into()));
    }
    if options.images == 0 {
        return Err(Error::Argument("the sweep needs at least one probe image".into()));
    }
    if options.image_size == 0 {
        return Err(Error::Argument("probe images need a positive size".into()));
    }
    options.nip.validate()?;

    let channels = input_channels(net)?;
    let images: Vec<Image> = (0..options.images)
        .map(|i| {
            synthetic_image(
                options.seed.wrapping_add(i as u64),
                channels,
                options.image_size,
                options.image_size,
            )
        })
        .collect();

    let cells = options.bits.len() * options.cuts.len();
    let rows = par::map_range(cells, |i| -> Result<TradeoffRow> {
        let bits = options.bits[i / options.cuts.len()];
        let cut = &options.cuts[i % options.cuts.len()];
        let reference = match cut {
            Some(name) => prune_at(net, name)?,
            None => net.clone(),
        };
        let config = CompressionConfig {
            quant: QuantizationSpec::scalar(bits),
            coding: options.coding,
            prune_at: None,
            tying: None,
            seed: options.seed,
        };
        let model = compress(&reference, &config)?;
        let sizes = size_report(&model)?;
        let restored = decompress(&model)?;
        let drift = descriptor_drift(&reference, &restored, &images, &options.nip)?;
        Ok(TradeoffRow {
            bits,
            cut: cut.clone(),
            bytes: sizes.total,
            log10_bytes: (sizes.total as f64).log10(),
            mean_cosine: drift.mean_cosine,
            mean_l2: drift.mean_l2,
        })
    });
    rows.into_iter().collect()
}

/// Renders sweep rows as CSV, header included. The cut column shows `full`
/// for rows measured on the unpruned network.
pub fn rows_to_csv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from("bits,cut,bytes,log10_bytes,mean_cosine,mean_l2\n");
    for row in rows {
        let cut = row.cut.as_deref().unwrap_or("full");
        out.push_str(&format!(
            "{},{},{},{:.6},{:.9},{:.9}\n",
            row.bits, cut, row.bytes, row.log10_bytes, row.mean_cosine, row.mean_l2
        ));
    }
    out
}
