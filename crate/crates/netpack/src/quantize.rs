//! Codebook quantization: scalar Lloyd-Max, vector LBG, and whole-network
//! application.
//!
//! Both trainers alternate nearest-codeword assignment with cell-mean
//! updates until the mean squared error stops moving (relative tolerance) or
//! an iteration cap is hit. All training arithmetic runs in f64 with fixed
//! sequential reduction order — identical inputs and seed produce identical
//! codebooks on every platform and thread count. Stored codebooks are f32,
//! like the tensors they quantize.
//!
//! The scalar and vector trainers are deliberately separate implementations
//! (binary-search assignment against sorted centroids vs. linear scan over
//! codebook rows); with one-dimensional blocks, the same samples, and the
//! same seed and initialization they produce identical output, which the
//! test suite uses as a cross-check.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Layer, LayerKind, Network, SpatialParams, Tensor, TensorRole};
use crate::par;

/// Most levels any codebook may hold (indices must fit a 16-bit fixed-width
/// code).
pub const MAX_LEVELS: usize = 1 << 16;

/// Cap on training-set size; larger inputs are subsampled with the seeded
/// RNG before training (documented, deterministic).
pub const TRAIN_SAMPLE_CAP: usize = 1_000_000;

/// How codebooks are seeded before Lloyd iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Evenly spaced quantiles of the distinct-value set (scalar default).
    /// Guarantees a strictly increasing, duplicate-free starting codebook.
    Quantile,
    /// `k` distinct samples drawn by the seeded RNG (vector default).
    RandomDistinct,
}

/// Knobs for codebook training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Iteration cap.
    pub max_iter: usize,
    /// Stop once the relative MSE improvement falls at or below this.
    pub rel_tol: f64,
    /// Seed for subsampling and random initialization.
    pub seed: u64,
    /// Initialization override; `None` uses each trainer's default
    /// ([`Init::Quantile`] for scalar, [`Init::RandomDistinct`] for vector).
    pub init: Option<Init>,
    /// Training-set size cap (seeded subsampling beyond it).
    pub sample_cap: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_iter: 200,
            rel_tol: 1e-8,
            seed: 0,
            init: None,
            sample_cap: TRAIN_SAMPLE_CAP,
        }
    }
}

impl TrainOptions {
    /// Default options with a specific seed.
    pub fn seeded(seed: u64) -> Self {
        TrainOptions {
            seed,
            ..TrainOptions::default()
        }
    }
}

/// Diagnostics from one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Lloyd iterations executed (0 when the distinct-value shortcut fired).
    pub iterations: usize,
    /// MSE measured after each assignment step, in f64 training arithmetic.
    /// Non-increasing up to float rounding (and up to the documented epsilon
    /// when an empty-cell split occurred).
    pub mse_trace: Vec<f64>,
    /// True when the relative tolerance was reached before the iteration cap.
    pub converged: bool,
    /// MSE of the finished (f32) codebook over the full, unsubsampled input.
    pub final_mse: f64,
}

/// Quantized tensor contents: codeword indices plus the original shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTensor {
    /// Original tensor shape.
    pub shape: Vec<usize>,
    /// One index per block (per value for scalar codebooks).
    pub indices: Vec<u32>,
    /// Zero-padding appended to fill the final block (0 for scalar).
    pub pad_count: usize,
}

// ---------------------------------------------------------------------------
// Scalar quantizer
// ---------------------------------------------------------------------------

/// A scalar codebook: strictly increasing centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarQuantizer {
    centroids: Vec<f32>,
}

impl ScalarQuantizer {
    /// Validates and wraps a centroid list (nonempty, finite, strictly
    /// increasing).
    pub fn new(centroids: Vec<f32>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Argument("scalar codebook must hold at least one centroid".into()));
        }
        if centroids.len() > MAX_LEVELS {
            return Err(Error::Argument(format!(
                "scalar codebook holds {} centroids, max is {MAX_LEVELS}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Argument("centroids must be finite".into()));
        }
        if centroids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("centroids must be strictly increasing".into()));
        }
        Ok(ScalarQuantizer { centroids })
    }

    /// The centroids, ascending.
    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Number of levels.
    pub fn levels(&self) -> usize {
        self.centroids.len()
    }

    /// Index of the nearest centroid (ties toward the lower index).
    pub fn encode_value(&self, v: f32) -> u32 {
        nearest_scalar(&self.centroids, v as f64) as u32
    }

    /// Encodes a full tensor's values. `shape` must describe `values`.
    pub fn encode(&self, values: &[f32], shape: &[usize]) -> Result<IndexTensor> {
        let n: usize = shape.iter().product();
        if n != values.len() || shape.is_empty() {
            return Err(Error::Shape(format!(
                "shape {:?} does not describe {} values",
                shape,
                values.len()
            )));
        }
        Ok(IndexTensor {
            shape: shape.to_vec(),
            indices: values.iter().map(|&v| self.encode_value(v)).collect(),
            pad_count: 0,
        })
    }

    /// Maps indices back to centroid values.
    pub fn decode(&self, it: &IndexTensor) -> Result<Vec<f32>> {
        if it.pad_count != 0 {
            return Err(Error::Argument(
                "scalar index tensors carry no padding".into(),
            ));
        }
        let n: usize = it.shape.iter().product();
        if n != it.indices.len() {
            return Err(Error::Shape(format!(
                "shape {:?} does not describe {} indices",
                it.shape,
                it.indices.len()
            )));
        }
        it.indices
            .iter()
            .map(|&i| {
                self.centroids
                    .get(i as usize)
                    .copied()
                    .ok_or_else(|| Error::Argument(format!("index {i} out of range for {} levels", self.levels())))
            })
            .collect()
    }

    /// Mean squared error of quantizing `values` with this codebook.
    pub fn mse(&self, values: &[f32]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0f64;
        for &v in values {
            let c = self.centroids[nearest_scalar(&self.centroids, v as f64)] as f64;
            let d = v as f64 - c;
            sum += d * d;
        }
        sum / values.len() as f64
    }
}

/// Nearest centroid in a sorted f32 list, computed with the same f64
/// squared-distance comparisons the vector path uses (ties toward the lower
/// index).
fn nearest_scalar(centroids: &[f32], v: f64) -> usize {
    // Binary search gets within one cell of the answer; the midpoint
    // arithmetic can round differently from the squared-distance comparison
    // right at a boundary, so the final word goes to the same strict-less
    // scan rule the vector quantizer applies, restricted to the three
    // candidate cells.
    let guess = centroids.partition_point(|&c| (c as f64) < v);
    let lo = guess.saturating_sub(1);
    let hi = (guess + 1).min(centroids.len() - 1);
    let mut best = lo;
    let mut best_d = {
        let d = v - centroids[lo] as f64;
        d * d
    };
    for (off, &c) in centroids[lo..=hi].iter().enumerate().skip(1) {
        let d = v - c as f64;
        let d2 = d * d;
        if d2 < best_d {
            best = lo + off;
            best_d = d2;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Vector quantizer
// ---------------------------------------------------------------------------

/// Block dimensions supported for vector codebooks.
pub const VQ_DIMS: [usize; 3] = [1, 2, 4];

/// A vector codebook: `levels` rows of `dim` values, rows strictly
/// increasing in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorQuantizer {
    dim: usize,
    codebook: Vec<f32>,
}

impl VectorQuantizer {
    /// Validates and wraps a row-major codebook.
    pub fn new(dim: usize, codebook: Vec<f32>) -> Result<Self> {
        if !VQ_DIMS.contains(&dim) {
            return Err(Error::Argument(format!(
                "block dimension {dim} unsupported (expected one of {VQ_DIMS:?})"
            )));
        }
        if codebook.is_empty() || codebook.len() % dim != 0 {
            return Err(Error::Argument(format!(
                "codebook length {} is not a positive multiple of dim {dim}",
                codebook.len()
            )));
        }
        let levels = codebook.len() / dim;
        if levels > MAX_LEVELS {
            return Err(Error::Argument(format!(
                "vector codebook holds {levels} rows, max is {MAX_LEVELS}"
            )));
        }
        if codebook.iter().any(|c| !c.is_finite()) {
            return Err(Error::Argument("codewords must be finite".into()));
        }
        for pair in codebook.chunks_exact(dim).collect::<Vec<_>>().windows(2) {
            if lex_cmp_f32(pair[0], pair[1]) != std::cmp::Ordering::Less {
                return Err(Error::Argument(
                    "codebook rows must be strictly increasing in lex order".into(),
                ));
            }
        }
        Ok(VectorQuantizer { dim, codebook })
    }

    /// Block dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of codewords.
    pub fn levels(&self) -> usize {
        self.codebook.len() / self.dim
    }

    /// Row-major codebook values.
    pub fn codebook(&self) -> &[f32] {
        &self.codebook
    }

    /// One codeword row.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.codebook[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest codeword to a block (f64 squared Euclidean
    /// distance, ties toward the lower index).
    pub fn nearest(&self, block: &[f64]) -> u32 {
        debug_assert_eq!(block.len(), self.dim);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, row) in self.codebook.chunks_exact(self.dim).enumerate() {
            let mut d2 = 0.0f64;
            for (b, c) in block.iter().zip(row) {
                let d = b - *c as f64;
                d2 += d * d;
            }
            if d2 < best_d {
                best = i;
                best_d = d2;
            }
        }
        best as u32
    }

    /// Splits values into `dim`-blocks (zero-padding the tail) and encodes
    /// each. `shape` must describe `values`.
    pub fn encode(&self, values: &[f32], shape: &[usize]) -> Result<IndexTensor> {
        let n: usize = shape.iter().product();
        if n != values.len() || shape.is_empty() {
            return Err(Error::Shape(format!(
                "shape {:?} does not describe {} values",
                shape,
                values.len()
            )));
        }
        let (blocks, pad_count) = block_values(values, self.dim);
        let indices = blocks
            .chunks_exact(self.dim)
            .map(|b| {
                let block: Vec<f64> = b.iter().map(|&v| v as f64).collect();
                self.nearest(&block)
            })
            .collect();
        Ok(IndexTensor {
            shape: shape.to_vec(),
            indices,
            pad_count,
        })
    }

    /// Maps block indices back to values, stripping the tail padding.
    pub fn decode(&self, it: &IndexTensor) -> Result<Vec<f32>> {
        let n: usize = it.shape.iter().product();
        let expect_blocks = n.div_ceil(self.dim);
        if it.indices.len() != expect_blocks || expect_blocks * self.dim - n != it.pad_count {
            return Err(Error::Shape(format!(
                "shape {:?} with pad {} does not match {} blocks of dim {}",
                it.shape,
                it.pad_count,
                it.indices.len(),
                self.dim
            )));
        }
        let mut out = Vec::with_capacity(n);
        for &i in &it.indices {
            let row = self
                .codebook
                .get(i as usize * self.dim..(i as usize + 1) * self.dim)
                .ok_or_else(|| {
                    Error::Argument(format!("index {i} out of range for {} levels", self.levels()))
                })?;
            out.extend_from_slice(row);
        }
        out.truncate(n);
        Ok(out)
    }

    /// Mean squared error per block component (padding included, matching
    /// the training objective).
    pub fn distortion(&self, values: &[f32]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        let (blocks, _) = block_values(values, self.dim);
        let mut sum = 0.0f64;
        for b in blocks.chunks_exact(self.dim) {
            let block: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let row = self.row(self.nearest(&block) as usize);
            for (v, c) in block.iter().zip(row) {
                let d = v - *c as f64;
                sum += d * d;
            }
        }
        sum / blocks.len() as f64
    }
}

/// Row-major blocking with zero padding; returns the padded blocks and the
/// number of padding elements appended (0 when `dim` divides the length).
pub fn block_values(values: &[f32], dim: usize) -> (Vec<f32>, usize) {
    let n_blocks = values.len().div_ceil(dim);
    let padded = n_blocks * dim;
    let mut blocks = Vec::with_capacity(padded);
    blocks.extend_from_slice(values);
    blocks.resize(padded, 0.0);
    (blocks, padded - values.len())
}

fn lex_cmp_f32(a: &[f32], b: &[f32]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).expect("finite by invariant") {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

fn lex_cmp_f64(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).expect("finite by invariant") {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn validate_training_input(values: &[f32], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("codebook size must be at least 1".into()));
    }
    if k > MAX_LEVELS {
        return Err(Error::Argument(format!(
            "codebook size {k} exceeds the maximum of {MAX_LEVELS}"
        )));
    }
    if values.is_empty() {
        return Err(Error::Argument("cannot train a codebook on no samples".into()));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Argument(format!(
            "training sample at index {pos} is not finite"
        )));
    }
    Ok(())
}

/// Draws `cap` distinct item indices (ascending) when `n` exceeds the cap.
fn subsample_indices(rng: &mut ChaCha8Rng, n: usize, cap: usize) -> Option<Vec<usize>> {
    if n <= cap {
        return None;
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, n, cap).into_vec();
    picked.sort_unstable();
    Some(picked)
}

fn converged(prev: f64, cur: f64, rel_tol: f64) -> bool {
    prev - cur <= rel_tol * prev
}

/// Perturbation magnitude for empty-cell splits: a millionth of the data
/// span. A split can transiently bump the objective by O(epsilon), which is
/// why the monotonicity guarantee carries that caveat.
fn split_epsilon(span: f64) -> f64 {
    span * 1e-6
}

/// Trains a scalar Lloyd-Max codebook.
///
/// Initialization defaults to evenly spaced quantiles of the distinct-value
/// set. When the input holds no more than `k` distinct values the codebook
/// is exactly that set (zero distortion) and no iterations run — the
/// requested level count is an upper bound, never padded to.
pub fn train_lloyd_max(
    samples: &[f32],
    k: usize,
    opts: &TrainOptions,
) -> Result<(ScalarQuantizer, TrainingReport)> {
    validate_training_input(samples, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let work: Vec<f64> = match subsample_indices(&mut rng, samples.len(), opts.sample_cap.max(1)) {
        Some(idx) => idx.into_iter().map(|i| samples[i] as f64).collect(),
        None => samples.iter().map(|&v| v as f64).collect(),
    };

    let mut distinct: Vec<f64> = work.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();

    if distinct.len() <= k {
        let centroids: Vec<f32> = dedup_sorted_f32(distinct.iter().map(|&c| c as f32).collect());
        let q = ScalarQuantizer::new(centroids)?;
        let trace_mse = q.mse(samples);
        return Ok((
            q.clone(),
            TrainingReport {
                iterations: 0,
                mse_trace: vec![scalar_cost(&work, &distinct) / work.len() as f64],
                converged: true,
                final_mse: trace_mse,
            },
        ));
    }

    let mut centroids: Vec<f64> = match opts.init.unwrap_or(Init::Quantile) {
        Init::Quantile => (0..k)
            .map(|i| distinct[(2 * i + 1) * distinct.len() / (2 * k)])
            .collect(),
        Init::RandomDistinct => {
            let mut picks: Vec<f64> = rand::seq::index::sample(&mut rng, distinct.len(), k)
                .into_iter()
                .map(|i| distinct[i])
                .collect();
            picks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            picks
        }
    };

    let span = distinct[distinct.len() - 1] - distinct[0];
    let mut trace = Vec::new();
    let mut report_converged = false;

    for _ in 0..opts.max_iter {
        // Assignment + cost against the current (sorted) centroids.
        let mut assign = vec![0usize; work.len()];
        let mut cost = 0.0f64;
        for (i, &v) in work.iter().enumerate() {
            let cell = nearest_scalar_f64(&centroids, v);
            assign[i] = cell;
            let d = v - centroids[cell];
            cost += d * d;
        }
        let mse = cost / work.len() as f64;
        if let Some(&prev) = trace.last() {
            trace.push(mse);
            if converged(prev, mse, opts.rel_tol) {
                report_converged = true;
                break;
            }
        } else {
            trace.push(mse);
        }

        // Cell means in fixed input order.
        let kk = centroids.len();
        let mut sums = vec![0.0f64; kk];
        let mut counts = vec![0usize; kk];
        let mut sse = vec![0.0f64; kk];
        for (i, &v) in work.iter().enumerate() {
            let c = assign[i];
            sums[c] += v;
            counts[c] += 1;
            let d = v - centroids[c];
            sse[c] += d * d;
        }
        for c in 0..kk {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        repair_empty_scalar(&mut centroids, &counts, &mut sse, span);
        centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }

    let final_centroids = dedup_sorted_f32(centroids.iter().map(|&c| c as f32).collect());
    let q = ScalarQuantizer::new(final_centroids)?;
    let final_mse = q.mse(samples);
    Ok((
        q,
        TrainingReport {
            iterations: trace.len(),
            mse_trace: trace,
            converged: report_converged,
            final_mse,
        },
    ))
}

fn scalar_cost(work: &[f64], centroids: &[f64]) -> f64 {
    let mut cost = 0.0;
    for &v in work {
        let c = centroids[nearest_scalar_f64(centroids, v)];
        let d = v - c;
        cost += d * d;
    }
    cost
}

fn nearest_scalar_f64(centroids: &[f64], v: f64) -> usize {
    let guess = centroids.partition_point(|&c| c < v);
    let lo = guess.saturating_sub(1);
    let hi = (guess + 1).min(centroids.len() - 1);
    let mut best = lo;
    let mut best_d = {
        let d = v - centroids[lo];
        d * d
    };
    for (off, &c) in centroids[lo..=hi].iter().enumerate().skip(1) {
        let d = v - c;
        let d2 = d * d;
        if d2 < best_d {
            best = lo + off;
            best_d = d2;
        }
    }
    best
}

fn repair_empty_scalar(centroids: &mut [f64], counts: &[usize], sse: &mut [f64], span: f64) {
    let empties: Vec<usize> = (0..centroids.len()).filter(|&c| counts[c] == 0).collect();
    let mut splits = vec![0usize; centroids.len()];
    for e in empties {
        let (worst, _) = sse
            .iter()
            .enumerate()
            .filter(|&(c, _)| counts[c] > 0)
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (c, &s)| {
                if s > acc.1 {
                    (c, s)
                } else {
                    acc
                }
            });
        debug_assert!(worst != usize::MAX, "some cell always holds samples");
        let eps = split_epsilon(span) * (1 + splits[worst]) as f64;
        centroids[e] = centroids[worst] + eps;
        centroids[worst] -= eps;
        sse[worst] /= 2.0;
        splits[worst] += 1;
    }
}

fn dedup_sorted_f32(mut values: Vec<f32>) -> Vec<f32> {
    values.dedup();
    values
}

/// Trains a vector LBG codebook on row-major `dim`-blocks.
///
/// Initialization defaults to `k` distinct blocks drawn by the seeded RNG.
/// Inputs with no more than `k` distinct blocks short-circuit to that
/// distinct set (zero distortion). The finished codebook's rows are sorted
/// lexicographically, so identical inputs yield identical codebooks however
/// the iteration happened to label clusters.
pub fn train_lbg(
    blocks: &[f32],
    dim: usize,
    k: usize,
    opts: &TrainOptions,
) -> Result<(VectorQuantizer, TrainingReport)> {
    if !VQ_DIMS.contains(&dim) {
        return Err(Error::Argument(format!(
            "block dimension {dim} unsupported (expected one of {VQ_DIMS:?})"
        )));
    }
    if blocks.len() % dim != 0 {
        return Err(Error::Argument(format!(
            "{} values do not form whole blocks of dim {dim}",
            blocks.len()
        )));
    }
    validate_training_input(blocks, k)?;
    let n = blocks.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let work: Vec<f64> = match subsample_indices(&mut rng, n, opts.sample_cap.max(1)) {
        Some(idx) => idx
            .into_iter()
            .flat_map(|i| blocks[i * dim..(i + 1) * dim].iter().map(|&v| v as f64))
            .collect(),
        None => blocks.iter().map(|&v| v as f64).collect(),
    };
    let n_work = work.len() / dim;

    let mut distinct: Vec<Vec<f64>> = work.chunks_exact(dim).map(|b| b.to_vec()).collect();
    distinct.sort_by(|a, b| lex_cmp_f64(a, b));
    distinct.dedup();

    if distinct.len() <= k {
        let flat: Vec<f32> = distinct.iter().flatten().map(|&v| v as f32).collect();
        let q = VectorQuantizer::new(dim, dedup_rows_f32(flat, dim))?;
        let centroids: Vec<Vec<f64>> = distinct;
        let cost = vector_cost(&work, dim, &centroids);
        let final_mse = q.distortion(blocks);
        return Ok((
            q,
            TrainingReport {
                iterations: 0,
                mse_trace: vec![cost / work.len() as f64],
                converged: true,
                final_mse,
            },
        ));
    }

    let mut centroids: Vec<Vec<f64>> = match opts.init.unwrap_or(Init::RandomDistinct) {
        Init::Quantile => (0..k)
            .map(|i| distinct[(2 * i + 1) * distinct.len() / (2 * k)].clone())
            .collect(),
        Init::RandomDistinct => {
            let mut picks: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, distinct.len(), k)
                .into_iter()
                .map(|i| distinct[i].clone())
                .collect();
            picks.sort_by(|a, b| lex_cmp_f64(a, b));
            picks
        }
    };

    let span = {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &work {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        hi - lo
    };

    let mut trace = Vec::new();
    let mut report_converged = false;

    for _ in 0..opts.max_iter {
        let mut assign = vec![0usize; n_work];
        let mut cost = 0.0f64;
        for (i, block) in work.chunks_exact(dim).enumerate() {
            let (cell, d2) = nearest_row(&centroids, block);
            assign[i] = cell;
            cost += d2;
        }
        let mse = cost / work.len() as f64;
        if let Some(&prev) = trace.last() {
            trace.push(mse);
            if converged(prev, mse, opts.rel_tol) {
                report_converged = true;
                break;
            }
        } else {
            trace.push(mse);
        }

        let kk = centroids.len();
        let mut sums = vec![vec![0.0f64; dim]; kk];
        let mut counts = vec![0usize; kk];
        let mut sse = vec![0.0f64; kk];
        for (i, block) in work.chunks_exact(dim).enumerate() {
            let c = assign[i];
            counts[c] += 1;
            for (t, &v) in block.iter().enumerate() {
                sums[c][t] += v;
                let d = v - centroids[c][t];
                sse[c] += d * d;
            }
        }
        for c in 0..kk {
            if counts[c] > 0 {
                for t in 0..dim {
                    centroids[c][t] = sums[c][t] / counts[c] as f64;
                }
            }
        }
        repair_empty_rows(&mut centroids, &counts, &mut sse, span);
        centroids.sort_by(|a, b| lex_cmp_f64(a, b));
    }

    let flat: Vec<f32> = centroids.iter().flatten().map(|&v| v as f32).collect();
    let q = VectorQuantizer::new(dim, dedup_rows_f32(flat, dim))?;
    let final_mse = q.distortion(blocks);
    Ok((
        q,
        TrainingReport {
            iterations: trace.len(),
            mse_trace: trace,
            converged: report_converged,
            final_mse,
        },
    ))
}

fn nearest_row(centroids: &[Vec<f64>], block: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, row) in centroids.iter().enumerate() {
        let mut d2 = 0.0f64;
        for (b, c) in block.iter().zip(row) {
            let d = b - c;
            d2 += d * d;
        }
        if d2 < best_d {
            best = i;
            best_d = d2;
        }
    }
    (best, best_d)
}

fn vector_cost(work: &[f64], dim: usize, centroids: &[Vec<f64>]) -> f64 {
    work.chunks_exact(dim)
        .map(|b| nearest_row(centroids, b).1)
        .sum()
}

fn repair_empty_rows(centroids: &mut [Vec<f64>], counts: &[usize], sse: &mut [f64], span: f64) {
    let empties: Vec<usize> = (0..centroids.len()).filter(|&c| counts[c] == 0).collect();
    let mut splits = vec![0usize; centroids.len()];
    for e in empties {
        let (worst, _) = sse
            .iter()
            .enumerate()
            .filter(|&(c, _)| counts[c] > 0)
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (c, &s)| {
                if s > acc.1 {
                    (c, s)
                } else {
                    acc
                }
            });
        debug_assert!(worst != usize::MAX, "some cell always holds samples");
        let eps = split_epsilon(span) * (1 + splits[worst]) as f64;
        let base = centroids[worst].clone();
        for t in 0..base.len() {
            centroids[e][t] = base[t] + eps;
            centroids[worst][t] = base[t] - eps;
        }
        sse[worst] /= 2.0;
        splits[worst] += 1;
    }
}

fn dedup_rows_f32(flat: Vec<f32>, dim: usize) -> Vec<f32> {
    let mut out: Vec<f32> = Vec::with_capacity(flat.len());
    for row in flat.chunks_exact(dim) {
        let duplicate = out
            .chunks_exact(dim)
            .last()
            .map(|prev| prev == row)
            .unwrap_or(false);
        if !duplicate {
            out.extend_from_slice(row);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Whole-network quantization
// ---------------------------------------------------------------------------

/// How one layer's tensors are coded.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerMode {
    /// Scalar codebook with `2^bits` levels.
    Scalar {
        /// Index width in bits, 1..=16.
        bits: u8,
    },
    /// Vector codebook.
    Vector {
        /// Codeword count.
        levels: usize,
        /// Block dimension (1, 2, or 4).
        dim: usize,
    },
    /// Leave the layer's tensors at full precision.
    Exempt,
}

impl LayerMode {
    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            LayerMode::Scalar { bits } => {
                if bits == 0 || bits > 16 {
                    return Err(Error::Config(format!(
                        "scalar mode needs 1..=16 bits, got {bits}"
                    )));
                }
            }
            LayerMode::Vector { levels, dim } => {
                if levels == 0 || levels > MAX_LEVELS {
                    return Err(Error::Config(format!(
                        "vector mode needs 1..={MAX_LEVELS} levels, got {levels}"
                    )));
                }
                if !VQ_DIMS.contains(&dim) {
                    return Err(Error::Config(format!(
                        "vector mode block dim must be one of {VQ_DIMS:?}, got {dim}"
                    )));
                }
            }
            LayerMode::Exempt => {}
        }
        Ok(())
    }
}

/// Network-wide quantization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationSpec {
    /// Mode for layers without an override.
    pub default_mode: LayerMode,
    /// Keep all batch-norm tensors at full precision (default true).
    pub bn_exempt: bool,
    /// Per-layer overrides by layer name.
    pub overrides: BTreeMap<String, LayerMode>,
}

impl Default for QuantizationSpec {
    /// 4-bit scalar codebooks on conv layers, batch norm exempt.
    fn default() -> Self {
        QuantizationSpec {
            default_mode: LayerMode::Scalar { bits: 4 },
            bn_exempt: true,
            overrides: BTreeMap::new(),
        }
    }
}

impl QuantizationSpec {
    /// Uniform scalar quantization at `bits`, batch norm exempt.
    pub fn scalar(bits: u8) -> Self {
        QuantizationSpec {
            default_mode: LayerMode::Scalar { bits },
            ..QuantizationSpec::default()
        }
    }

    /// Uniform vector quantization, batch norm exempt.
    pub fn vector(levels: usize, dim: usize) -> Self {
        QuantizationSpec {
            default_mode: LayerMode::Vector { levels, dim },
            ..QuantizationSpec::default()
        }
    }

    /// Validates modes and checks overrides against a network's layer names.
    pub fn validate_for(&self, net: &Network) -> Result<()> {
        self.default_mode.validate()?;
        for (name, mode) in &self.overrides {
            mode.validate()?;
            if net.index_of(name).is_none() {
                return Err(Error::Config(format!(
                    "quantization override names unknown layer '{name}'"
                )));
            }
        }
        Ok(())
    }

    fn mode_for(&self, layer: &str) -> &LayerMode {
        self.overrides.get(layer).unwrap_or(&self.default_mode)
    }
}

/// A trained codebook attached to a quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerQuantizer {
    /// Scalar codebook.
    Scalar(ScalarQuantizer),
    /// Vector codebook.
    Vector(VectorQuantizer),
}

impl LayerQuantizer {
    /// Number of levels in the codebook.
    pub fn levels(&self) -> usize {
        match self {
            LayerQuantizer::Scalar(q) => q.levels(),
            LayerQuantizer::Vector(q) => q.levels(),
        }
    }

    /// Block dimension (1 for scalar).
    pub fn dim(&self) -> usize {
        match self {
            LayerQuantizer::Scalar(_) => 1,
            LayerQuantizer::Vector(q) => q.dim(),
        }
    }
}

/// One tensor inside a quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub enum CodedTensor {
    /// Stored at full precision (exempt tensors, batch norm, shape-only
    /// declarations).
    Raw(Tensor),
    /// Codeword indices against one of the layer's quantizers.
    Indexed {
        /// Index into [`QuantizedLayer::quantizers`].
        quantizer: usize,
        /// The encoded indices.
        indices: IndexTensor,
    },
}

/// A layer after quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    /// Layer name.
    pub name: String,
    /// Layer kind.
    pub kind: LayerKind,
    /// Spatial hyperparameters (conv/pool).
    pub spatial: Option<SpatialParams>,
    /// Trained codebooks for this layer. Conv layers train one codebook over
    /// kernel and bias values together; quantized batch-norm layers train
    /// one per tensor so that, e.g., variances snap to centroids derived
    /// from variances alone and stay positive.
    pub quantizers: Vec<LayerQuantizer>,
    /// Tensors in canonical role order.
    pub tensors: Vec<(TensorRole, CodedTensor)>,
}

/// A network after quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    /// Architecture tag carried over from the source network.
    pub arch: String,
    /// Seed the codebooks were trained with.
    pub seed: u64,
    /// Layers in execution order.
    pub layers: Vec<QuantizedLayer>,
}

/// Quantizes every non-exempt layer of a network.
///
/// Conv layers train a single codebook on kernel plus bias values and encode
/// both against it. Batch-norm layers are skipped entirely while
/// `spec.bn_exempt` is set; otherwise each of their four tensors trains its
/// own codebook. Layers are processed independently (in parallel when the
/// `parallel` feature is on) with the same seed, so the result does not
/// depend on scheduling.
pub fn quantize_network(
    net: &Network,
    spec: &QuantizationSpec,
    seed: u64,
) -> Result<QuantizedNetwork> {
    spec.validate_for(net)?;
    let results = par::map_slice(net.layers(), |layer| quantize_layer(layer, spec, seed));
    let mut layers = Vec::with_capacity(results.len());
    for r in results {
        layers.push(r?);
    }
    Ok(QuantizedNetwork {
        arch: net.arch().to_owned(),
        seed,
        layers,
    })
}

fn quantize_layer(layer: &Layer, spec: &QuantizationSpec, seed: u64) -> Result<QuantizedLayer> {
    let mode = spec.mode_for(layer.name());
    let exempt = matches!(mode, LayerMode::Exempt)
        || (layer.kind() == LayerKind::BatchNorm && spec.bn_exempt);

    let mut quantizers = Vec::new();
    let mut tensors = Vec::new();

    if exempt || layer.kind().is_activation() {
        for (role, t) in layer.tensors() {
            tensors.push((role, CodedTensor::Raw(t.clone())));
        }
    } else {
        match layer.kind() {
            LayerKind::Conv => {
                let weight = layer
                    .tensor(TensorRole::ConvWeight)
                    .expect("validated conv layer");
                let w_values = weight.require_values(&format!(
                    "layer '{}' conv_weight",
                    layer.name()
                ))?;
                let bias = layer.tensor(TensorRole::ConvBias);
                let b_values = match bias {
                    Some(b) => {
                        Some(b.require_values(&format!("layer '{}' conv_bias", layer.name()))?)
                    }
                    None => None,
                };
                let mut samples = Vec::with_capacity(
                    w_values.len() + b_values.map_or(0, |b| b.len()),
                );
                samples.extend_from_slice(w_values);
                if let Some(b) = b_values {
                    samples.extend_from_slice(b);
                }
                let q = train_for_mode(&samples, mode, seed)?;
                let w_indices = encode_with(&q, w_values, weight.shape())?;
                tensors.push((
                    TensorRole::ConvWeight,
                    CodedTensor::Indexed {
                        quantizer: 0,
                        indices: w_indices,
                    },
                ));
                if let (Some(b), Some(bv)) = (bias, b_values) {
                    let b_indices = encode_with(&q, bv, b.shape())?;
                    tensors.push((
                        TensorRole::ConvBias,
                        CodedTensor::Indexed {
                            quantizer: 0,
                            indices: b_indices,
                        },
                    ));
                }
                quantizers.push(q);
            }
            LayerKind::BatchNorm => {
                for (role, t) in layer.tensors() {
                    let values =
                        t.require_values(&format!("layer '{}' {role}", layer.name()))?;
                    let q = train_for_mode(values, mode, seed)?;
                    let indices = encode_with(&q, values, t.shape())?;
                    tensors.push((
                        role,
                        CodedTensor::Indexed {
                            quantizer: quantizers.len(),
                            indices,
                        },
                    ));
                    quantizers.push(q);
                }
            }
            _ => {}
        }
    }

    Ok(QuantizedLayer {
        name: layer.name().to_owned(),
        kind: layer.kind(),
        spatial: layer.spatial().copied(),
        quantizers,
        tensors,
    })
}

fn train_for_mode(samples: &[f32], mode: &LayerMode, seed: u64) -> Result<LayerQuantizer> {
    let opts = TrainOptions::seeded(seed);
    match *mode {
        LayerMode::Scalar { bits } => {
            let (q, _) = train_lloyd_max(samples, 1usize << bits, &opts)?;
            Ok(LayerQuantizer::Scalar(q))
        }
        LayerMode::Vector { levels, dim } => {
            let (blocks, _) = block_values(samples, dim);
            let (q, _) = train_lbg(&blocks, dim, levels, &opts)?;
            Ok(LayerQuantizer::Vector(q))
        }
        LayerMode::Exempt => unreachable!("exempt layers are never trained"),
    }
}

fn encode_with(q: &LayerQuantizer, values: &[f32], shape: &[usize]) -> Result<IndexTensor> {
    match q {
        LayerQuantizer::Scalar(q) => q.encode(values, shape),
        LayerQuantizer::Vector(q) => q.encode(values, shape),
    }
}

/// Rebuilds a full-precision network by mapping indices through codebooks.
/// Quantized tensors come back as their codeword values; raw tensors are
/// untouched.
pub fn dequantize_network(qnet: &QuantizedNetwork) -> Result<Network> {
    let mut layers = Vec::with_capacity(qnet.layers.len());
    for ql in &qnet.layers {
        let mut tensors = BTreeMap::new();
        for (role, coded) in &ql.tensors {
            let tensor = match coded {
                CodedTensor::Raw(t) => t.clone(),
                CodedTensor::Indexed { quantizer, indices } => {
                    let q = ql.quantizers.get(*quantizer).ok_or_else(|| {
                        Error::Manifest(format!(
                            "layer '{}' {role} references missing quantizer {quantizer}",
                            ql.name
                        ))
                    })?;
                    let values = match q {
                        LayerQuantizer::Scalar(q) => q.decode(indices)?,
                        LayerQuantizer::Vector(q) => q.decode(indices)?,
                    };
                    Tensor::new(indices.shape.clone(), values)?
                }
            };
            tensors.insert(*role, tensor);
        }
        layers.push(Layer::from_parts(
            ql.name.clone(),
            ql.kind,
            tensors,
            ql.spatial,
        )?);
    }
    Network::new(qnet.arch.clone(), layers)
}
