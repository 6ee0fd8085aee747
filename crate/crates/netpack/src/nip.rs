//! Invariance-pooled global descriptors over conv feature maps.
//!
//! An image is expanded into a stack of transformed views — every rotation,
//! at every scale, at every region-of-interest position — and each view runs
//! through the network to per-channel feature means. The stack then collapses
//! one transform axis at a time under a configured moment (average, standard
//! deviation, or max), innermost stage first, leaving one value per channel.
//! The result is L2-normalized.
//!
//! Because views are cropped in the rotated frame, rotating the input image
//! only permutes the stack along the rotation axis (when the rotation set is
//! closed under 90-degree shifts, as the default is). Pooling that axis with
//! max makes the descriptor exactly rotation-invariant.

use crate::error::{Error, Result};
use crate::forward::{forward, Image};
use crate::model::Network;
use crate::par;

/// Transform axes of the view stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformGroup {
    /// The 90-degree rotation axis.
    Rotation,
    /// The crop-scale axis.
    Scale,
    /// The region-of-interest position axis.
    Translation,
}

impl std::fmt::Display for TransformGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransformGroup::Rotation => "rotation",
            TransformGroup::Scale => "scale",
            TransformGroup::Translation => "translation",
        })
    }
}

/// Pooling moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moment {
    /// Arithmetic mean.
    Average,
    /// Population standard deviation.
    Std,
    /// Maximum.
    Max,
}

/// One pooling stage: collapse `group` under `moment`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStage {
    /// Axis to collapse.
    pub group: TransformGroup,
    /// Moment to collapse it with.
    pub moment: Moment,
}

/// Descriptor extraction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NipConfig {
    /// Rotation angles in degrees; each must be a multiple of 90.
    pub rotations: Vec<u32>,
    /// Crop scales as fractions of the shorter image side, each in (0, 1].
    pub scales: Vec<f64>,
    /// Regions of interest per (rotation, scale), laid out on a near-square
    /// grid.
    pub rois_per_scale: usize,
    /// Pooling stages, innermost first. Every stack axis of extent > 1 must
    /// be pooled by exactly one stage.
    pub stages: Vec<PoolStage>,
    /// Layer to read feature maps from (`None` = network output).
    pub layer: Option<String>,
}

impl Default for NipConfig {
    /// Four rotations, three scales, 20 regions; average over scales, standard
    /// deviation over positions, max over rotations.
    fn default() -> Self {
        NipConfig {
            rotations: vec![0, 90, 180, 270],
            scales: vec![0.5, 0.75, 1.0],
            rois_per_scale: 20,
            stages: vec![
                PoolStage {
                    group: TransformGroup::Scale,
                    moment: Moment::Average,
                },
                PoolStage {
                    group: TransformGroup::Translation,
                    moment: Moment::Std,
                },
                PoolStage {
                    group: TransformGroup::Rotation,
                    moment: Moment::Max,
                },
            ],
            layer: None,
        }
    }
}

impl NipConfig {
    /// Checks the settings for internal consistency.
    pub fn validate(&self) -> Result<()> {
        if self.rotations.is_empty() {
            return Err(Error::Config("at least one rotation is required".into()));
        }
        if let Some(bad) = self.rotations.iter().find(|r| *r % 90 != 0) {
            return Err(Error::Config(format!(
                "rotation {bad} is not a multiple of 90 degrees"
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if let Some(bad) = self
            .scales
            .iter()
            .find(|s| !s.is_finite() || **s <= 0.0 || **s > 1.0)
        {
            return Err(Error::Config(format!(
                "scale {bad} is outside (0, 1]"
            )));
        }
        if self.rois_per_scale == 0 {
            return Err(Error::Config("at least one region per scale is required".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one pooling stage is required".into()));
        }
        let mut seen = Vec::new();
        for stage in &self.stages {
            if seen.contains(&stage.group) {
                return Err(Error::Config(format!(
                    "the {} axis is pooled more than once",
                    stage.group
                )));
            }
            seen.push(stage.group);
        }
        Ok(())
    }

    /// Views per image under this configuration.
    pub fn stack_size(&self) -> usize {
        self.rotations.len() * self.scales.len() * self.rois_per_scale
    }
}

/// The transformed views of one image, indexed
/// `(rotation * n_scales + scale) * n_rois + roi`.
#[derive(Debug, Clone)]
pub struct TransformedStack {
    /// The views.
    pub images: Vec<Image>,
    /// Rotation-axis extent.
    pub n_rotations: usize,
    /// Scale-axis extent.
    pub n_scales: usize,
    /// Position-axis extent.
    pub n_rois: usize,
}

/// Near-square grid for `n` regions: the tallest row count that divides `n`
/// without exceeding its square root.
pub(crate) fn grid_dims(n: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            rows = d;
        }
        d += 1;
    }
    (rows, n / rows)
}

/// `i`-th of `n` offsets evenly spread over `[0, span]` (centered when
/// `n == 1`).
pub(crate) fn grid_offset(i: usize, n: usize, span: usize) -> usize {
    if n == 1 {
        span / 2
    } else {
        ((i * span) as f64 / (n - 1) as f64).round() as usize
    }
}

/// Builds the view stack: for every rotation the image is turned first, and
/// scales and crop grids are computed in that rotated frame.
pub fn extract_transformed_stack(image: &Image, cfg: &NipConfig) -> Result<TransformedStack> {
    cfg.validate()?;
    let (rows, cols) = grid_dims(cfg.rois_per_scale);
    let mut images = Vec::with_capacity(cfg.stack_size());
    for &deg in &cfg.rotations {
        let rot = image.rotate90(deg / 90);
        let short = rot.height().min(rot.width());
        for &scale in &cfg.scales {
            let side = ((scale * short as f64).round() as usize).clamp(1, short);
            let y_span = rot.height() - side;
            let x_span = rot.width() - side;
            for i in 0..rows {
                for j in 0..cols {
                    let y0 = grid_offset(i, rows, y_span);
                    let x0 = grid_offset(j, cols, x_span);
                    images.push(rot.crop(y0, x0, side, side)?);
                }
            }
        }
    }
    Ok(TransformedStack {
        images,
        n_rotations: cfg.rotations.len(),
        n_scales: cfg.scales.len(),
        n_rois: cfg.rois_per_scale,
    })
}

fn apply_moment(values: &[f64], moment: Moment) -> f64 {
    match moment {
        Moment::Average => values.iter().sum::<f64>() / values.len() as f64,
        Moment::Std => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            var.sqrt()
        }
        Moment::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Collapses a stack of per-view channel vectors down to one vector,
/// applying the stages innermost-first. Every axis of extent > 1 must be
/// covered by a stage.
pub fn nip_pool(
    features: &[Vec<f64>],
    n_rotations: usize,
    n_scales: usize,
    n_rois: usize,
    stages: &[PoolStage],
) -> Result<Vec<f64>> {
    if features.len() != n_rotations * n_scales * n_rois || features.is_empty() {
        return Err(Error::Argument(format!(
            "{} feature vectors do not fill a {n_rotations}x{n_scales}x{n_rois} stack",
            features.len()
        )));
    }
    let channels = features[0].len();
    if features.iter().any(|f| f.len() != channels) {
        return Err(Error::Argument(
            "feature vectors in a stack must share a length".into(),
        ));
    }

    let (mut nr, mut ns, mut nt) = (n_rotations, n_scales, n_rois);
    let mut cur = features.to_vec();
    let mut pooled = Vec::new();
    for stage in stages {
        if pooled.contains(&stage.group) {
            return Err(Error::Config(format!(
                "the {} axis is pooled more than once",
                stage.group
            )));
        }
        pooled.push(stage.group);
        let (rr, ss, tt) = match stage.group {
            TransformGroup::Rotation => (1, ns, nt),
            TransformGroup::Scale => (nr, 1, nt),
            TransformGroup::Translation => (nr, ns, 1),
        };
        let mut next = vec![vec![0.0f64; channels]; rr * ss * tt];
        let extent = match stage.group {
            TransformGroup::Rotation => nr,
            TransformGroup::Scale => ns,
            TransformGroup::Translation => nt,
        };
        let mut gather = vec![0.0f64; extent];
        for r in 0..rr {
            for s in 0..ss {
                for t in 0..tt {
                    let out = &mut next[(r * ss + s) * tt + t];
                    for (ch, slot) in out.iter_mut().enumerate().take(channels) {
                        for (k, g) in gather.iter_mut().enumerate() {
                            let (ri, si, ti) = match stage.group {
                                TransformGroup::Rotation => (k, s, t),
                                TransformGroup::Scale => (r, k, t),
                                TransformGroup::Translation => (r, s, k),
                            };
                            *g = cur[(ri * ns + si) * nt + ti][ch];
                        }
                        *slot = apply_moment(&gather, stage.moment);
                    }
                }
            }
        }
        cur = next;
        nr = rr;
        ns = ss;
        nt = tt;
    }
    if nr * ns * nt != 1 {
        let leftover = [
            (TransformGroup::Rotation, nr),
            (TransformGroup::Scale, ns),
            (TransformGroup::Translation, nt),
        ]
        .into_iter()
        .find(|&(_, e)| e > 1)
        .expect("product > 1 implies an axis > 1");
        return Err(Error::Config(format!(
            "the {} axis has extent {} but no pooling stage",
            leftover.0, leftover.1
        )));
    }
    Ok(cur.remove(0))
}

/// A pooled, L2-normalized descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    /// One value per feature channel; unit norm unless `zero` is set.
    pub values: Vec<f32>,
    /// True when pooling produced the all-zero vector (normalization is then
    /// skipped and matching treats the descriptor specially).
    pub zero: bool,
}

/// Extracts the descriptor of one image under a network.
pub fn nip_descriptor(net: &Network, image: &Image, cfg: &NipConfig) -> Result<Descriptor> {
    let stack = extract_transformed_stack(image, cfg)?;
    let layer = cfg.layer.as_deref();
    let features = par::map_slice(&stack.images, |view| {
        forward(net, view, layer).map(|v| v.channel_means())
    });
    let mut vectors = Vec::with_capacity(features.len());
    for f in features {
        vectors.push(f?);
    }
    let pooled = nip_pool(
        &vectors,
        stack.n_rotations,
        stack.n_scales,
        stack.n_rois,
        &cfg.stages,
    )?;
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(Descriptor {
            values: vec![0.0; pooled.len()],
            zero: true,
        });
    }
    Ok(Descriptor {
        values: pooled.iter().map(|v| (v / norm) as f32).collect(),
        zero: false,
    })
}

/// Mean agreement between two networks' descriptors over a set of images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftStats {
    /// Mean cosine similarity (1.0 = descriptors unchanged).
    pub mean_cosine: f64,
    /// Mean Euclidean distance between descriptors.
    pub mean_l2: f64,
}

/// Compares the descriptors two networks produce for the same images. A pair
/// of zero descriptors counts as perfect agreement; a zero against a nonzero
/// counts as none.
pub fn descriptor_drift(
    reference: &Network,
    candidate: &Network,
    images: &[Image],
    cfg: &NipConfig,
) -> Result<DriftStats> {
    if images.is_empty() {
        return Err(Error::Argument("descriptor drift needs at least one image".into()));
    }
    let mut cos_sum = 0.0f64;
    let mut l2_sum = 0.0f64;
    for image in images {
        let a = nip_descriptor(reference, image, cfg)?;
        let b = nip_descriptor(candidate, image, cfg)?;
        if a.values.len() != b.values.len() {
            return Err(Error::Argument(format!(
                "descriptor lengths differ: {} vs {}",
                a.values.len(),
                b.values.len()
            )));
        }
        let cos = match (a.zero, b.zero) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            (false, false) => a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| *x as f64 * *y as f64)
                .sum::<f64>(),
        };
        let l2 = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        cos_sum += cos;
        l2_sum += l2;
    }
    Ok(DriftStats {
        mean_cosine: cos_sum / images.len() as f64,
        mean_l2: l2_sum / images.len() as f64,
    })
}
