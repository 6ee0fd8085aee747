//! Independent reference implementations used to cross-check the library.
//!
//! Everything here is written from the definitions, on purpose with
//! different algorithms and data layouts than the crate itself: dynamic
//! programming instead of iterative refinement, nested `Vec`s instead of
//! flat planes, two-queue merging instead of a heap. Agreement between the
//! two code paths is the evidence the tests are after.

#![allow(dead_code)]

use std::collections::BTreeSet;

use netpack::forward::{Image, Volume};
use netpack::model::{LayerKind, Network, TensorRole};
use netpack::nip::{Moment, PoolStage, TransformGroup};
use netpack::retrieval::Metric;

// ---------------------------------------------------------------------------
// Scalar quantization references
// ---------------------------------------------------------------------------

/// Globally MSE-optimal `k`-level scalar codebook by dynamic programming
/// over contiguous partitions of the sorted sample multiset. Returns the
/// centroids (sorted) and the optimal MSE. O(n^2 k) — small inputs only.
pub fn optimal_scalar_codebook(values: &[f32], k: usize) -> (Vec<f64>, f64) {
    let mut xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    assert!(n > 0 && k > 0, "oracle needs data and at least one level");

    let mut sum = vec![0.0f64; n + 1];
    let mut sumsq = vec![0.0f64; n + 1];
    for (i, &x) in xs.iter().enumerate() {
        sum[i + 1] = sum[i] + x;
        sumsq[i + 1] = sumsq[i] + x * x;
    }
    // Sum of squared deviations of xs[i..j] around its own mean.
    let sse = |i: usize, j: usize| -> f64 {
        let cnt = (j - i) as f64;
        let s = sum[j] - sum[i];
        ((sumsq[j] - sumsq[i]) - s * s / cnt).max(0.0)
    };

    let cells = k.min(n);
    let mut cost = vec![vec![f64::INFINITY; n + 1]; cells + 1];
    let mut split = vec![vec![0usize; n + 1]; cells + 1];
    cost[0][0] = 0.0;
    for m in 1..=cells {
        for j in m..=n {
            for i in (m - 1)..j {
                if cost[m - 1][i].is_finite() {
                    let c = cost[m - 1][i] + sse(i, j);
                    if c < cost[m][j] {
                        cost[m][j] = c;
                        split[m][j] = i;
                    }
                }
            }
        }
    }

    let mut bounds = vec![n];
    let mut j = n;
    for m in (1..=cells).rev() {
        j = split[m][j];
        bounds.push(j);
    }
    bounds.reverse();
    let mut centroids = Vec::with_capacity(cells);
    for w in bounds.windows(2) {
        let (i, j) = (w[0], w[1]);
        centroids.push((sum[j] - sum[i]) / (j - i) as f64);
    }
    (centroids, cost[cells][n] / n as f64)
}

/// A plain textbook Lloyd iteration in f64: centroids start uniformly
/// spaced over the sample range, cells are the midpoint intervals, empty
/// cells keep their centroid. Returns the fixed-point MSE at relative
/// tolerance 1e-12.
pub fn reference_lloyd_mse(values: &[f32], k: usize) -> f64 {
    let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo.is_finite() && hi > lo, "oracle needs a nondegenerate range");

    let mut centroids: Vec<f64> = (0..k)
        .map(|i| lo + (hi - lo) * (2 * i + 1) as f64 / (2 * k) as f64)
        .collect();
    let mut prev = f64::INFINITY;
    for _ in 0..2000 {
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0u64; k];
        let mut sse = 0.0f64;
        for &x in &xs {
            // Nearest centroid through the midpoint boundaries.
            let mut cell = 0;
            while cell + 1 < k && x > (centroids[cell] + centroids[cell + 1]) / 2.0 {
                cell += 1;
            }
            sums[cell] += x;
            counts[cell] += 1;
            sse += (x - centroids[cell]) * (x - centroids[cell]);
        }
        let mse = sse / xs.len() as f64;
        for i in 0..k {
            if counts[i] > 0 {
                centroids[i] = sums[i] / counts[i] as f64;
            }
        }
        centroids.sort_by(f64::total_cmp);
        if prev.is_finite() && prev - mse <= 1e-12 * prev {
            return mse;
        }
        prev = mse;
    }
    prev
}

// ---------------------------------------------------------------------------
// Prefix-code references
// ---------------------------------------------------------------------------

/// Minimal total weighted code length over all binary prefix codes for the
/// positive weights in `freqs`, by the sorted two-queue merge. Weight-zero
/// symbols are ignored; a single positive symbol costs its weight (one bit
/// per occurrence).
pub fn optimal_prefix_cost(freqs: &[u64]) -> u64 {
    let mut leaves: Vec<u64> = freqs.iter().copied().filter(|&f| f > 0).collect();
    leaves.sort_unstable();
    match leaves.len() {
        0 => return 0,
        1 => return leaves[0],
        _ => {}
    }
    let mut merged = std::collections::VecDeque::new();
    let mut li = 0usize;
    let mut cost = 0u64;
    let take = |li: &mut usize, merged: &mut std::collections::VecDeque<u64>, leaves: &[u64]| {
        match (leaves.get(*li), merged.front()) {
            (Some(&l), Some(&m)) if l <= m => {
                *li += 1;
                l
            }
            (Some(&l), None) => {
                *li += 1;
                l
            }
            (_, Some(_)) => merged.pop_front().unwrap(),
            (None, None) => unreachable!("both queues empty mid-merge"),
        }
    };
    let total = leaves.len() + merged.len();
    for _ in 0..total - 1 {
        let a = take(&mut li, &mut merged, &leaves);
        let b = take(&mut li, &mut merged, &leaves);
        cost += a + b;
        merged.push_back(a + b);
    }
    cost
}

/// Shannon entropy in bits per symbol of a frequency histogram.
pub fn shannon_entropy(freqs: &[u64]) -> f64 {
    let total: u64 = freqs.iter().sum();
    assert!(total > 0, "oracle needs a nonempty histogram");
    let mut h = 0.0f64;
    for &f in freqs {
        if f > 0 {
            let p = f as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Forward-pass reference
// ---------------------------------------------------------------------------

type Planes = Vec<Vec<Vec<f64>>>;

fn image_planes(image: &Image) -> Planes {
    let v = image.as_volume();
    (0..v.channels())
        .map(|c| {
            (0..v.height())
                .map(|y| (0..v.width()).map(|x| v.at(c, y, x) as f64).collect())
                .collect()
        })
        .collect()
}

/// Direct-summation forward pass over nested f64 planes, one layer at a
/// time, with explicit bounds checks instead of pre-padding.
pub fn forward_oracle(net: &Network, image: &Image) -> Planes {
    let mut act = image_planes(image);
    for layer in net.layers() {
        act = match layer.kind() {
            LayerKind::Conv => conv_oracle(layer, &act),
            LayerKind::BatchNorm => bn_oracle(layer, &act),
            LayerKind::Relu => act
                .into_iter()
                .map(|p| {
                    p.into_iter()
                        .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
                        .collect()
                })
                .collect(),
            LayerKind::MaxPool => pool_oracle(layer, &act, true),
            LayerKind::AvgPool => pool_oracle(layer, &act, false),
        };
    }
    act
}

fn conv_oracle(layer: &netpack::model::Layer, input: &Planes) -> Planes {
    let sp = layer.spatial().expect("conv has spatial params");
    let w = layer
        .tensor(TensorRole::ConvWeight)
        .and_then(|t| t.values())
        .expect("materialized conv weight");
    let shape = layer.tensor(TensorRole::ConvWeight).unwrap().shape().to_vec();
    let (out_c, in_pg, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
    let bias = layer.tensor(TensorRole::ConvBias).and_then(|t| t.values());

    let in_c = input.len();
    let (h, wid) = (input[0].len(), input[0][0].len());
    assert_eq!(in_pg * sp.groups, in_c, "channel bookkeeping");
    let oh = (h + 2 * sp.padding - kh) / sp.stride + 1;
    let ow = (wid + 2 * sp.padding - kw) / sp.stride + 1;
    let out_pg = out_c / sp.groups;

    let mut out = vec![vec![vec![0.0f64; ow]; oh]; out_c];
    for oc in 0..out_c {
        let g = oc / out_pg;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[oc] as f64);
                for icg in 0..in_pg {
                    let ic = g * in_pg + icg;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sp.stride + ky) as i64 - sp.padding as i64;
                            let ix = (ox * sp.stride + kx) as i64 - sp.padding as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wid as i64 {
                                continue;
                            }
                            let wv = w[((oc * in_pg + icg) * kh + ky) * kw + kx] as f64;
                            acc += wv * input[ic][iy as usize][ix as usize];
                        }
                    }
                }
                out[oc][oy][ox] = acc;
            }
        }
    }
    out
}

fn bn_oracle(layer: &netpack::model::Layer, input: &Planes) -> Planes {
    let get = |role| {
        layer
            .tensor(role)
            .and_then(|t: &netpack::model::Tensor| t.values())
            .expect("materialized bn tensor")
    };
    let (scale, bias, mean, var) = (
        get(TensorRole::BnScale),
        get(TensorRole::BnBias),
        get(TensorRole::BnMean),
        get(TensorRole::BnVar),
    );
    input
        .iter()
        .enumerate()
        .map(|(c, plane)| {
            let gain = scale[c] as f64 / ((var[c] + 1e-5f32) as f64).sqrt();
            plane
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&v| (v - mean[c] as f64) * gain + bias[c] as f64)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn pool_oracle(layer: &netpack::model::Layer, input: &Planes, take_max: bool) -> Planes {
    let sp = layer.spatial().expect("pool has spatial params");
    let (h, w) = (input[0].len(), input[0][0].len());
    let oh = (h + 2 * sp.padding - sp.kernel_h) / sp.stride + 1;
    let ow = (w + 2 * sp.padding - sp.kernel_w) / sp.stride + 1;
    input
        .iter()
        .map(|plane| {
            (0..oh)
                .map(|oy| {
                    (0..ow)
                        .map(|ox| {
                            let mut best = f64::NEG_INFINITY;
                            let mut sum = 0.0f64;
                            let mut taps = 0u32;
                            for ky in 0..sp.kernel_h {
                                for kx in 0..sp.kernel_w {
                                    let iy = (oy * sp.stride + ky) as i64 - sp.padding as i64;
                                    let ix = (ox * sp.stride + kx) as i64 - sp.padding as i64;
                                    if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                        continue;
                                    }
                                    let v = plane[iy as usize][ix as usize];
                                    best = best.max(v);
                                    sum += v;
                                    taps += 1;
                                }
                            }
                            assert!(taps > 0, "window must overlap the frame");
                            if take_max {
                                best
                            } else {
                                sum / taps as f64
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Asserts the engine volume matches oracle planes within `tol`, scaled by
/// magnitude.
pub fn assert_volume_close(got: &Volume, want: &Planes, tol: f64) {
    assert_eq!(got.channels(), want.len(), "channel count");
    assert_eq!(got.height(), want[0].len(), "height");
    assert_eq!(got.width(), want[0][0].len(), "width");
    for c in 0..got.channels() {
        for y in 0..got.height() {
            for x in 0..got.width() {
                let g = got.at(c, y, x) as f64;
                let w = want[c][y][x];
                assert!(
                    (g - w).abs() <= tol * w.abs().max(1.0),
                    "mismatch at ({c},{y},{x}): engine {g} vs reference {w}"
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling reference
// ---------------------------------------------------------------------------

/// Pools one feature stack the slow way: per channel, a dense
/// `[rotation][scale][roi]` cube reduced one whole axis per stage. Std uses
/// the E[x^2] - mean^2 form on purpose (different arithmetic).
pub fn nip_pool_oracle(
    features: &[Vec<f64>],
    n_rotations: usize,
    n_scales: usize,
    n_rois: usize,
    stages: &[PoolStage],
) -> Vec<f64> {
    assert_eq!(features.len(), n_rotations * n_scales * n_rois);
    let channels = features[0].len();
    let mut out = Vec::with_capacity(channels);
    for ch in 0..channels {
        let mut cube = vec![vec![vec![0.0f64; n_rois]; n_scales]; n_rotations];
        for r in 0..n_rotations {
            for s in 0..n_scales {
                for t in 0..n_rois {
                    cube[r][s][t] = features[(r * n_scales + s) * n_rois + t][ch];
                }
            }
        }
        for stage in stages {
            cube = reduce_axis(&cube, stage.group, stage.moment);
        }
        assert_eq!(cube.len() * cube[0].len() * cube[0][0].len(), 1);
        out.push(cube[0][0][0]);
    }
    out
}

fn moment_of(values: &[f64], moment: Moment) -> f64 {
    let n = values.len() as f64;
    match moment {
        Moment::Average => values.iter().sum::<f64>() / n,
        Moment::Std => {
            let mean = values.iter().sum::<f64>() / n;
            let e2 = values.iter().map(|v| v * v).sum::<f64>() / n;
            (e2 - mean * mean).max(0.0).sqrt()
        }
        Moment::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn reduce_axis(cube: &[Vec<Vec<f64>>], group: TransformGroup, moment: Moment) -> Vec<Vec<Vec<f64>>> {
    let (nr, ns, nt) = (cube.len(), cube[0].len(), cube[0][0].len());
    match group {
        TransformGroup::Rotation => {
            let mut out = vec![vec![vec![0.0; nt]; ns]; 1];
            for s in 0..ns {
                for t in 0..nt {
                    let column: Vec<f64> = (0..nr).map(|r| cube[r][s][t]).collect();
                    out[0][s][t] = moment_of(&column, moment);
                }
            }
            out
        }
        TransformGroup::Scale => {
            let mut out = vec![vec![vec![0.0; nt]; 1]; nr];
            for r in 0..nr {
                for t in 0..nt {
                    let column: Vec<f64> = (0..ns).map(|s| cube[r][s][t]).collect();
                    out[r][0][t] = moment_of(&column, moment);
                }
            }
            out
        }
        TransformGroup::Translation => {
            let mut out = vec![vec![vec![0.0; 1]; ns]; nr];
            for r in 0..nr {
                for s in 0..ns {
                    out[r][s][0] = moment_of(&cube[r][s], moment);
                }
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Retrieval references
// ---------------------------------------------------------------------------

fn metric_key(query: &[f32], candidate: &[f32], metric: Metric) -> f64 {
    match metric {
        Metric::L2 => {
            let mut d = 0.0f64;
            for (a, b) in query.iter().zip(candidate) {
                d += (*a as f64 - *b as f64) * (*a as f64 - *b as f64);
            }
            d.sqrt()
        }
        Metric::Cosine => {
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for (a, b) in query.iter().zip(candidate) {
                dot += *a as f64 * *b as f64;
                na += *a as f64 * *a as f64;
                nb += *b as f64 * *b as f64;
            }
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                -(dot / (na.sqrt() * nb.sqrt()))
            }
        }
    }
}

/// Ranks database entries for a query by insertion sort on (key, id).
pub fn rank_oracle(
    query: &[f32],
    ids: &[u64],
    vectors: &[Vec<f32>],
    metric: Metric,
    exclude: Option<u64>,
) -> Vec<u64> {
    let mut scored: Vec<(f64, u64)> = Vec::new();
    for (id, vec) in ids.iter().zip(vectors) {
        if Some(*id) == exclude {
            continue;
        }
        let key = metric_key(query, vec, metric);
        // Insertion keeps the list ordered by key, then id.
        let mut pos = scored.len();
        while pos > 0 && (scored[pos - 1].0, scored[pos - 1].1) > (key, *id) {
            pos -= 1;
        }
        scored.insert(pos, (key, *id));
    }
    scored.into_iter().map(|(_, id)| id).collect()
}

/// Non-interpolated average precision from a ranked id list.
pub fn average_precision_oracle(ranked: &[u64], relevant: &BTreeSet<u64>) -> f64 {
    assert!(!relevant.is_empty(), "oracle needs a nonempty relevant set");
    let mut hits = 0u64;
    let mut acc = 0.0f64;
    for (pos, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            acc += hits as f64 / (pos + 1) as f64;
        }
    }
    acc / relevant.len() as f64
}

/// Count of relevant ids in the first four ranks.
pub fn recall_at_4_oracle(ranked: &[u64], relevant: &BTreeSet<u64>) -> usize {
    ranked
        .iter()
        .take(4)
        .filter(|id| relevant.contains(id))
        .count()
}
