//! Command-line front end for the netpack toolkit.
//!
//! Subcommands map one-to-one onto the library's pipeline stages: compress /
//! decompress move between the NNW1 weight container and the NNZ1 compressed
//! container, inspect reports statistics or size accounting, prune and tie
//! apply the structural transforms, extract and evaluate drive the descriptor
//! and retrieval paths, and tradeoff emits the size/fidelity sweep as CSV.
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed invariant),
//! 2 usage error (unknown flags, missing input files). All randomness is
//! seeded, so identical invocations write identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use netpack::analyze::layer_stats;
use netpack::config::{parse_quant_spec, parse_tying_plan};
use netpack::container::{load_model, save_model, MODEL_MAGIC};
use netpack::forward::load_image;
use netpack::model::param_accounting;
use netpack::nip::{nip_descriptor, NipConfig};
use netpack::pipeline::COMPRESSED_MAGIC;
use netpack::retrieval::{
    mean_average_precision, mean_recall_at_4, DescriptorSet, GroundTruth, Metric,
};
use netpack::synthetic::synthetic_image;
use netpack::tradeoff::{rows_to_csv, tradeoff_sweep, TradeoffOptions};
use netpack::transform::{prune_at, shared_param_count, tie_blocks};
use netpack::{
    compress, decompress, decompress_tied, load_compressed, save_compressed, size_report, Coding,
    CompressionConfig, Network,
};

#[derive(Parser)]
#[command(
    name = "netpack",
    version,
    about = "Weight compression and retrieval evaluation for small conv nets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize and entropy-code a weight container.
    Compress(CompressArgs),
    /// Rebuild a full-precision weight container.
    Decompress(DecompressArgs),
    /// Report per-layer statistics (weights) or size accounting (compressed).
    Inspect(InspectArgs),
    /// Drop every layer after a chosen one.
    Prune(PruneArgs),
    /// Deduplicate repeated blocks and report the parameter savings.
    Tie(TieArgs),
    /// Extract one image descriptor and append it to a descriptor list.
    Extract(ExtractArgs),
    /// Score a retrieval run: mean average precision and 4xRecall@4.
    Evaluate(EvaluateArgs),
    /// Sweep codebook widths and prune points into a size/drift CSV.
    Tradeoff(TradeoffArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CodingArg {
    /// Fixed-width indices.
    #[value(alias = "flc")]
    Fixed,
    /// Canonical Huffman indices.
    #[value(alias = "variable")]
    Vlc,
}

impl From<CodingArg> for Coding {
    fn from(c: CodingArg) -> Coding {
        match c {
            CodingArg::Fixed => Coding::Fixed,
            CodingArg::Vlc => Coding::Variable,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    L2,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::L2 => Metric::L2,
        }
    }
}

#[derive(Args)]
struct CompressArgs {
    /// Input weight container (NNW1).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output compressed container (NNZ1).
    #[arg(long)]
    out: PathBuf,
    /// Quantization settings file; defaults to 4-bit scalar, batch norm exempt.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Index-stream coding.
    #[arg(long, value_enum, default_value = "fixed")]
    coding: CodingArg,
    /// Drop every layer after this one before quantizing.
    #[arg(long)]
    prune_at: Option<String>,
    /// Tying plan file; deduplicates repeated blocks before quantizing.
    #[arg(long)]
    tie: Option<PathBuf>,
    /// Codebook training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DecompressArgs {
    /// Input compressed container (NNZ1).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output weight container (NNW1).
    #[arg(long)]
    out: PathBuf,
    /// Keep tied blocks deduplicated instead of expanding them.
    #[arg(long)]
    tied: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// A weight (NNW1) or compressed (NNZ1) container.
    input: PathBuf,
    /// Also write the report as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    /// Input weight container (NNW1).
    #[arg(long = "in")]
    input: PathBuf,
    /// Last layer to keep.
    #[arg(long)]
    at: String,
    /// Output weight container (NNW1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TieArgs {
    /// Input weight container (NNW1).
    #[arg(long = "in")]
    input: PathBuf,
    /// Tying plan file.
    #[arg(long)]
    plan: PathBuf,
    /// Write the deduplicated network here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Weight container (NNW1) to run the image through.
    #[arg(long = "in")]
    input: PathBuf,
    /// Image file (binary P5 graymap or P6 pixmap).
    #[arg(long, conflicts_with = "synthetic")]
    image: Option<PathBuf>,
    /// Generate the probe image from this seed instead of reading a file.
    #[arg(long)]
    synthetic: Option<u64>,
    /// Synthetic image height and width in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Id for the emitted descriptor line.
    #[arg(long, default_value_t = 0)]
    id: u64,
    /// Read feature maps at this layer instead of the network output.
    #[arg(long)]
    layer: Option<String>,
    /// Rotation angles in degrees (multiples of 90).
    #[arg(long, value_delimiter = ',')]
    rotations: Option<Vec<u32>>,
    /// Crop scales as fractions of the shorter image side.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Regions of interest per (rotation, scale).
    #[arg(long)]
    rois: Option<usize>,
    /// Append the descriptor line to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Query descriptors, one `id v1 v2 ...` line each.
    #[arg(long)]
    queries: PathBuf,
    /// Database descriptors in the same line format.
    #[arg(long)]
    db: PathBuf,
    /// Relevance judgments, one `query-id relevant-id ...` line each.
    #[arg(long)]
    truth: PathBuf,
    /// Ranking metric.
    #[arg(long, value_enum, default_value = "cosine")]
    metric: MetricArg,
}

#[derive(Args)]
struct TradeoffArgs {
    /// Input weight container (NNW1).
    #[arg(long = "in")]
    input: PathBuf,
    /// Scalar codebook widths to sweep, in bits.
    #[arg(long, value_delimiter = ',', required = true)]
    bits: Vec<u8>,
    /// Prune points to sweep; `full` keeps the whole network.
    #[arg(long, value_delimiter = ',')]
    cuts: Option<Vec<String>>,
    /// Index-stream coding for the size measurement.
    #[arg(long, value_enum, default_value = "fixed")]
    coding: CodingArg,
    /// Number of synthetic probe images.
    #[arg(long, default_value_t = 4)]
    images: usize,
    /// Probe image height and width in pixels.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Seed for probe synthesis and codebook training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rotation angles for the probe descriptors.
    #[arg(long, value_delimiter = ',')]
    rotations: Option<Vec<u32>>,
    /// Crop scales for the probe descriptors.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Regions of interest per (rotation, scale).
    #[arg(long)]
    rois: Option<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
enum AppError {
    /// Bad invocation: flags that point at nothing. Exit 2.
    Usage(String),
    /// The work itself failed. Exit 1.
    Domain(netpack::Error),
}

impl From<netpack::Error> for AppError {
    fn from(e: netpack::Error) -> Self {
        AppError::Domain(e)
    }
}

type AppResult<T> = Result<T, AppError>;

/// Input files are checked before any work starts; a missing path is a
/// usage error, not a domain error.
fn require_file(path: &Path) -> AppResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(AppError::Usage(format!(
            "no such file: {}",
            path.display()
        )))
    }
}

fn read_text(path: &Path) -> AppResult<String> {
    std::fs::read_to_string(path).map_err(|e| AppError::Domain(e.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> AppResult<()> {
    match command {
        Command::Compress(args) => run_compress(args),
        Command::Decompress(args) => run_decompress(args),
        Command::Inspect(args) => run_inspect(args),
        Command::Prune(args) => run_prune(args),
        Command::Tie(args) => run_tie(args),
        Command::Extract(args) => run_extract(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Tradeoff(args) => run_tradeoff(args),
    }
}

fn run_compress(args: CompressArgs) -> AppResult<()> {
    require_file(&args.input)?;
    let mut cfg = CompressionConfig {
        coding: args.coding.into(),
        prune_at: args.prune_at,
        seed: args.seed,
        ..CompressionConfig::default()
    };
    if let Some(spec) = &args.spec {
        require_file(spec)?;
        cfg.quant = parse_quant_spec(&read_text(spec)?)?;
    }
    if let Some(plan) = &args.tie {
        require_file(plan)?;
        cfg.tying = Some(parse_tying_plan(&read_text(plan)?)?);
    }
    let net = load_model(&args.input)?;
    let model = compress(&net, &cfg)?;
    save_compressed(&model, &args.out)?;
    let sizes = size_report(&model)?;
    println!(
        "wrote {}: {} bytes (indices {}, codebooks {}, tables {}, exempt {}, manifest {})",
        args.out.display(),
        sizes.total,
        sizes.indices,
        sizes.codebooks,
        sizes.tables,
        sizes.exempt,
        sizes.manifest
    );
    Ok(())
}

fn run_decompress(args: DecompressArgs) -> AppResult<()> {
    require_file(&args.input)?;
    let model = load_compressed(&args.input)?;
    let net = if args.tied {
        decompress_tied(&model)?
    } else {
        decompress(&model)?
    };
    save_model(&net, &args.out)?;
    println!("wrote {}: {} layers", args.out.display(), net.layers().len());
    Ok(())
}

fn run_inspect(args: InspectArgs) -> AppResult<()> {
    require_file(&args.input)?;
    let bytes = std::fs::read(&args.input).map_err(netpack::Error::from)?;
    let magic = bytes.get(..4).unwrap_or_default();
    let (report, csv) = if magic == MODEL_MAGIC {
        inspect_weights(&netpack::container::model_from_bytes(&bytes)?)?
    } else if magic == COMPRESSED_MAGIC {
        inspect_compressed(&netpack::compressed_from_bytes(&bytes)?)?
    } else {
        return Err(netpack::Error::Format(format!(
            "{} is neither a weight nor a compressed container",
            args.input.display()
        ))
        .into());
    };
    print!("{report}");
    if let Some(path) = &args.csv {
        std::fs::write(path, csv).map_err(netpack::Error::from)?;
    }
    Ok(())
}

/// Per-layer stats table plus parameter totals for a weight container.
fn inspect_weights(net: &Network) -> AppResult<(String, String)> {
    let stats = layer_stats(net)?;
    let mut report = format!(
        "{:<16} {:>10} {:>13} {:>13} {:>13} {:>13}\n",
        "layer", "params", "mean", "variance", "laplace-b", "kurtosis"
    );
    let mut csv = String::from("layer,params,mean,variance,laplace_b,excess_kurtosis\n");
    for s in &stats {
        let _ = writeln!(
            report,
            "{:<16} {:>10} {:>13.6e} {:>13.6e} {:>13.6e} {:>13.6e}",
            s.layer, s.count, s.mean, s.variance, s.laplace_b, s.excess_kurtosis
        );
        let _ = writeln!(
            csv,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            s.layer, s.count, s.mean, s.variance, s.laplace_b, s.excess_kurtosis
        );
    }
    let totals = param_accounting(net);
    let _ = writeln!(
        report,
        "params: conv {}, bn {}, total {}",
        totals.conv_total, totals.bn_total, totals.total
    );
    Ok((report, csv))
}

/// Settings echo plus stored-size accounting for a compressed container.
fn inspect_compressed(model: &netpack::CompressedModel) -> AppResult<(String, String)> {
    let sizes = size_report(model)?;
    let mut report = format!(
        "arch {}, seed {}, coding {}, bn {}, pruned at {}, {} layers\n",
        model.arch,
        model.seed,
        match model.coding {
            Coding::Fixed => "fixed",
            Coding::Variable => "vlc",
        },
        if model.bn_exempt { "exempt" } else { "quantized" },
        model.pruned_at.as_deref().unwrap_or("-"),
        model.layers.len()
    );
    let rows = [
        ("indices", sizes.indices),
        ("codebooks", sizes.codebooks),
        ("tables", sizes.tables),
        ("exempt", sizes.exempt),
        ("manifest", sizes.manifest),
        ("total", sizes.total),
    ];
    let mut csv = String::from("category,bytes\n");
    for (name, bytes) in rows {
        let _ = writeln!(report, "{name:<10} {bytes:>12}");
        let _ = writeln!(csv, "{name},{bytes}");
    }
    Ok((report, csv))
}

fn run_prune(args: PruneArgs) -> AppResult<()> {
    require_file(&args.input)?;
    let net = load_model(&args.input)?;
    let pruned = prune_at(&net, &args.at)?;
    save_model(&pruned, &args.out)?;
    println!(
        "wrote {}: kept {} of {} layers",
        args.out.display(),
        pruned.layers().len(),
        net.layers().len()
    );
    Ok(())
}

fn run_tie(args: TieArgs) -> AppResult<()> {
    require_file(&args.input)?;
    require_file(&args.plan)?;
    let net = load_model(&args.input)?;
    let plan = parse_tying_plan(&read_text(&args.plan)?)?;
    let tied = tie_blocks(&net, &plan)?;
    let counts = shared_param_count(&tied)?;
    println!(
        "unique   conv {:>12} bn {:>10} total {:>12}",
        counts.unique_conv, counts.unique_bn, counts.unique_total
    );
    println!(
        "expanded conv {:>12} bn {:>10} total {:>12}",
        counts.expanded_conv, counts.expanded_bn, counts.expanded_total
    );
    if let Some(out) = &args.out {
        save_model(&tied.unique, out)?;
        println!("wrote {}: {} layers", out.display(), tied.unique.layers().len());
    }
    Ok(())
}

/// Applies the rotation/scale/roi overrides shared by extract and tradeoff.
fn nip_from_flags(
    rotations: Option<Vec<u32>>,
    scales: Option<Vec<f64>>,
    rois: Option<usize>,
) -> NipConfig {
    let mut nip = NipConfig::default();
    if let Some(rotations) = rotations {
        nip.rotations = rotations;
    }
    if let Some(scales) = scales {
        nip.scales = scales;
    }
    if let Some(rois) = rois {
        nip.rois_per_scale = rois;
    }
    nip
}

fn run_extract(args: ExtractArgs) -> AppResult<()> {
    require_file(&args.input)?;
    let image = match (&args.image, args.synthetic) {
        (Some(path), None) => {
            require_file(path)?;
            load_image(path)?
        }
        (None, Some(seed)) => synthetic_image(seed, 3, args.size, args.size),
        (None, None) => {
            return Err(AppError::Usage(
                "either --image or --synthetic is required".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let net = load_model(&args.input)?;
    let mut nip = nip_from_flags(args.rotations, args.scales, args.rois);
    nip.layer = args.layer;
    let descriptor = nip_descriptor(&net, &image, &nip)?;
    let mut set = DescriptorSet::empty();
    set.push(args.id, descriptor.values)?;
    let line = set.to_lines();
    match &args.out {
        Some(path) => {
            use std::io::Write as _;
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(netpack::Error::from)?;
            file.write_all(line.as_bytes()).map_err(netpack::Error::from)?;
        }
        None => print!("{line}"),
    }
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> AppResult<()> {
    require_file(&args.queries)?;
    require_file(&args.db)?;
    require_file(&args.truth)?;
    let queries = DescriptorSet::from_lines(&read_text(&args.queries)?)?;
    let db = DescriptorSet::from_lines(&read_text(&args.db)?)?;
    let truth = GroundTruth::from_lines(&read_text(&args.truth)?)?;
    let metric = args.metric.into();
    let map = mean_average_precision(&queries, &db, &truth, metric)?;
    let recall = mean_recall_at_4(&queries, &db, &truth, metric)?;
    println!("mAP {map:.6}");
    println!("4xRecall@4 {recall:.6}");
    Ok(())
}

fn run_tradeoff(args: TradeoffArgs) -> AppResult<()> {
    require_file(&args.input)?;
    let net = load_model(&args.input)?;
    let cuts = match args.cuts {
        None => vec![None],
        Some(cuts) => cuts
            .into_iter()
            .map(|c| if c == "full" { None } else { Some(c) })
            .collect(),
    };
    let options = TradeoffOptions {
        bits: args.bits,
        cuts,
        coding: args.coding.into(),
        images: args.images,
        image_size: args.image_size,
        seed: args.seed,
        nip: nip_from_flags(args.rotations, args.scales, args.rois),
    };
    let rows = tradeoff_sweep(&net, &options)?;
    let csv = rows_to_csv(&rows);
    match &args.out {
        Some(path) => std::fs::write(path, csv).map_err(netpack::Error::from)?,
        None => print!("{csv}"),
    }
    Ok(())
}
