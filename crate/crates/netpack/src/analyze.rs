//! Weight-distribution statistics: Laplacian fits, per-layer summaries, and
//! histogram entropy.
//!
//! Conv-layer weights in trained networks are sharply peaked at zero with
//! heavy tails; a Laplacian is a good two-parameter summary and its fitted
//! scale is what motivates non-uniform codebooks over uniform grids. The
//! maximum-likelihood fit is closed-form: location = sample median, scale =
//! mean absolute deviation from it.

use crate::error::{Error, Result};
use crate::model::{LayerKind, Network, TensorRole};

/// Maximum-likelihood Laplacian parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianFit {
    /// Location (sample median; even-length samples use the midpoint of the
    /// two central order statistics).
    pub mu: f64,
    /// Scale (mean absolute deviation from `mu`), strictly positive.
    pub b: f64,
}

/// Fits a Laplacian by maximum likelihood.
///
/// Fails with [`Error::Degenerate`] when the sample is constant (the scale
/// would be zero and the distribution collapses to a point mass).
pub fn fit_laplacian(values: &[f32]) -> Result<LaplacianFit> {
    if values.is_empty() {
        return Err(Error::Argument("cannot fit a distribution to no samples".into()));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Argument(format!(
            "sample at index {pos} is not finite"
        )));
    }
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mu = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mut abs_dev = 0.0f64;
    for &v in values {
        abs_dev += (v as f64 - mu).abs();
    }
    let b = abs_dev / n as f64;
    if b == 0.0 {
        return Err(Error::Degenerate(
            "all samples are identical; Laplacian scale is undefined".into(),
        ));
    }
    Ok(LaplacianFit { mu, b })
}

/// Summary statistics for one conv layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    /// Layer name.
    pub layer: String,
    /// Number of weight values (kernel + bias).
    pub count: usize,
    /// Sample mean.
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    /// Fitted Laplacian scale.
    pub laplace_b: f64,
    /// Excess kurtosis (`m4 / m2^2 - 3`; a Laplacian scores 3, a Gaussian 0).
    pub excess_kurtosis: f64,
}

/// Per-layer weight statistics for every materialized conv layer, in
/// network order. Shape-only layers are skipped; non-conv layers are not
/// reported.
pub fn layer_stats(net: &Network) -> Result<Vec<LayerStats>> {
    let mut out = Vec::new();
    for layer in net.layers() {
        if layer.kind() != LayerKind::Conv {
            continue;
        }
        let weight = match layer.tensor(TensorRole::ConvWeight).and_then(|t| t.values()) {
            Some(v) => v,
            None => continue,
        };
        let bias = layer
            .tensor(TensorRole::ConvBias)
            .and_then(|t| t.values())
            .unwrap_or(&[]);
        let mut values = Vec::with_capacity(weight.len() + bias.len());
        values.extend_from_slice(weight);
        values.extend_from_slice(bias);

        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut m2 = 0.0f64;
        let mut m4 = 0.0f64;
        for &v in &values {
            let d = v as f64 - mean;
            m2 += d * d;
            m4 += d * d * d * d;
        }
        m2 /= n;
        m4 /= n;
        if m2 == 0.0 {
            return Err(Error::Degenerate(format!(
                "layer '{}' has constant weights; moments are undefined",
                layer.name()
            )));
        }
        let fit = fit_laplacian(&values)?;
        out.push(LayerStats {
            layer: layer.name().to_owned(),
            count: values.len(),
            mean,
            variance: m2,
            laplace_b: fit.b,
            excess_kurtosis: m4 / (m2 * m2) - 3.0,
        });
    }
    Ok(out)
}

/// Shannon entropy of a histogram, in bits per symbol.
///
/// Zero-count bins contribute nothing. Fails on an all-zero histogram
/// (entropy of an empty distribution is undefined).
pub fn empirical_entropy(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Argument("histogram has no mass".into()));
    }
    let total = total as f64;
    let mut h = 0.0f64;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total;
            h -= p * p.log2();
        }
    }
    Ok(h)
}
