//! In-memory network model: tensors, layers, and parameter accounting.
//!
//! A [`Network`] is an ordered list of named layers. Only the layer kinds
//! needed for convolutional feature extraction exist — there are no fully
//! connected layers here. Tensors may carry a payload or declare a shape
//! only; shape-only manifests are how full-scale architectures are accounted
//! for without materializing hundreds of megabytes of weights.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// What a layer does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// 2-D convolution (cross-correlation) with optional bias.
    Conv,
    /// Per-channel affine normalization with stored statistics.
    BatchNorm,
    /// Elementwise `max(0, x)`.
    Relu,
    /// Spatial max pooling.
    MaxPool,
    /// Spatial average pooling.
    AvgPool,
}

impl LayerKind {
    /// Stable lowercase tag used by container manifests.
    pub fn tag(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "max_pool",
            LayerKind::AvgPool => "avg_pool",
        }
    }

    /// Inverse of [`LayerKind::tag`].
    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "conv" => LayerKind::Conv,
            "batch_norm" => LayerKind::BatchNorm,
            "relu" => LayerKind::Relu,
            "max_pool" => LayerKind::MaxPool,
            "avg_pool" => LayerKind::AvgPool,
            _ => return None,
        })
    }

    /// True for the layers that act as activations/downsamplers and carry no
    /// parameters of their own.
    pub fn is_activation(self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::MaxPool | LayerKind::AvgPool)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which parameter tensor of a layer this is.
///
/// The enum order is the canonical tensor order inside a layer, both in
/// memory and in serialized containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorRole {
    /// Convolution kernel, shape `[out_c, in_c_per_group, k_h, k_w]`, row-major.
    ConvWeight,
    /// Convolution bias, shape `[out_c]`.
    ConvBias,
    /// Batch-norm scale (gamma), shape `[c]`.
    BnScale,
    /// Batch-norm shift (beta), shape `[c]`.
    BnBias,
    /// Batch-norm running mean, shape `[c]`.
    BnMean,
    /// Batch-norm running variance, shape `[c]`, strictly positive.
    BnVar,
}

impl TensorRole {
    /// All roles in canonical order.
    pub const ALL: [TensorRole; 6] = [
        TensorRole::ConvWeight,
        TensorRole::ConvBias,
        TensorRole::BnScale,
        TensorRole::BnBias,
        TensorRole::BnMean,
        TensorRole::BnVar,
    ];

    /// Stable lowercase tag used by container manifests.
    pub fn tag(self) -> &'static str {
        match self {
            TensorRole::ConvWeight => "conv_weight",
            TensorRole::ConvBias => "conv_bias",
            TensorRole::BnScale => "bn_scale",
            TensorRole::BnBias => "bn_bias",
            TensorRole::BnMean => "bn_mean",
            TensorRole::BnVar => "bn_var",
        }
    }

    /// Inverse of [`TensorRole::tag`].
    pub fn from_tag(tag: &str) -> Option<Self> {
        TensorRole::ALL.into_iter().find(|r| r.tag() == tag)
    }

    /// True for the four batch-norm roles.
    pub fn is_bn(self) -> bool {
        matches!(
            self,
            TensorRole::BnScale | TensorRole::BnBias | TensorRole::BnMean | TensorRole::BnVar
        )
    }
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A dense real-valued tensor, or the declaration of one.
///
/// Invariants, enforced on construction:
/// * every dimension is at least 1;
/// * the element count does not overflow;
/// * if a payload is present, its length equals the shape product and every
///   value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    payload: Option<Vec<f32>>,
}

impl Tensor {
    /// A materialized tensor. Fails on shape/payload mismatch or non-finite
    /// values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = checked_elems(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but payload has {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "payload value at index {pos} is not finite"
            )));
        }
        Ok(Tensor {
            shape,
            payload: Some(data),
        })
    }

    /// A shape-only declaration (no payload). Used by accounting manifests.
    pub fn shape_only(shape: Vec<usize>) -> Result<Self> {
        checked_elems(&shape)?;
        Ok(Tensor {
            shape,
            payload: None,
        })
    }

    /// Tensor dimensions.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of elements the shape describes.
    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }

    /// Payload values, if materialized.
    pub fn values(&self) -> Option<&[f32]> {
        self.payload.as_deref()
    }

    /// Payload values, or an error naming the tensor's role and layer.
    pub fn require_values(&self, context: &str) -> Result<&[f32]> {
        self.values().ok_or_else(|| {
            Error::Argument(format!("{context} declares a shape but carries no payload"))
        })
    }

    /// True if a payload is present.
    pub fn is_materialized(&self) -> bool {
        self.payload.is_some()
    }
}

fn checked_elems(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor shape must have at least one dimension".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::Shape(format!("tensor shape {shape:?} has a zero dimension")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("tensor shape {shape:?} overflows element count")))?;
    }
    Ok(n)
}

/// Spatial hyperparameters for convolution and pooling layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialParams {
    /// Kernel height.
    pub kernel_h: usize,
    /// Kernel width.
    pub kernel_w: usize,
    /// Stride, identical in both spatial directions.
    pub stride: usize,
    /// Zero padding on every border.
    pub padding: usize,
    /// Channel groups (convolution only; pooling layers use 1). A grouped
    /// convolution's weight stores `in_c / groups` input channels per filter.
    pub groups: usize,
}

impl SpatialParams {
    /// Ungrouped params with the given kernel/stride/padding.
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize, padding: usize) -> Self {
        SpatialParams {
            kernel_h,
            kernel_w,
            stride,
            padding,
            groups: 1,
        }
    }

    /// Same, with a channel-group count (used by accounting manifests for
    /// classic grouped convolutions).
    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// One named layer: a kind, its parameter tensors, and (for conv/pool) the
/// spatial hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    name: String,
    kind: LayerKind,
    tensors: BTreeMap<TensorRole, Tensor>,
    spatial: Option<SpatialParams>,
}

impl Layer {
    /// A convolution layer. `bias` is optional; kernel dims are read off the
    /// weight shape.
    pub fn conv(
        name: impl Into<String>,
        weight: Tensor,
        bias: Option<Tensor>,
        spatial: SpatialParams,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        tensors.insert(TensorRole::ConvWeight, weight);
        if let Some(b) = bias {
            tensors.insert(TensorRole::ConvBias, b);
        }
        let layer = Layer {
            name: name.into(),
            kind: LayerKind::Conv,
            tensors,
            spatial: Some(spatial),
        };
        layer.validate()?;
        Ok(layer)
    }

    /// A batch-norm layer over `c` channels; all four tensors are required
    /// and must share the channel count.
    pub fn batch_norm(
        name: impl Into<String>,
        scale: Tensor,
        bias: Tensor,
        mean: Tensor,
        var: Tensor,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        tensors.insert(TensorRole::BnScale, scale);
        tensors.insert(TensorRole::BnBias, bias);
        tensors.insert(TensorRole::BnMean, mean);
        tensors.insert(TensorRole::BnVar, var);
        let layer = Layer {
            name: name.into(),
            kind: LayerKind::BatchNorm,
            tensors,
            spatial: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// A ReLU layer.
    pub fn relu(name: impl Into<String>) -> Self {
        Layer {
            name: name.into(),
            kind: LayerKind::Relu,
            tensors: BTreeMap::new(),
            spatial: None,
        }
    }

    /// A max-pooling layer.
    pub fn max_pool(name: impl Into<String>, spatial: SpatialParams) -> Result<Self> {
        Layer::pool(name.into(), LayerKind::MaxPool, spatial)
    }

    /// An average-pooling layer.
    pub fn avg_pool(name: impl Into<String>, spatial: SpatialParams) -> Result<Self> {
        Layer::pool(name.into(), LayerKind::AvgPool, spatial)
    }

    fn pool(name: String, kind: LayerKind, spatial: SpatialParams) -> Result<Self> {
        let layer = Layer {
            name,
            kind,
            tensors: BTreeMap::new(),
            spatial: Some(spatial),
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Rebuilds a layer from parts (container loading path). Validates.
    pub fn from_parts(
        name: String,
        kind: LayerKind,
        tensors: BTreeMap<TensorRole, Tensor>,
        spatial: Option<SpatialParams>,
    ) -> Result<Self> {
        let layer = Layer {
            name,
            kind,
            tensors,
            spatial,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Layer name (unique within a network).
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Layer kind.
    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    /// Spatial hyperparameters (conv/pool layers only).
    pub fn spatial(&self) -> Option<&SpatialParams> {
        self.spatial.as_ref()
    }

    /// Tensor for a role, if the layer has one.
    pub fn tensor(&self, role: TensorRole) -> Option<&Tensor> {
        self.tensors.get(&role)
    }

    /// All tensors in canonical role order.
    pub fn tensors(&self) -> impl Iterator<Item = (TensorRole, &Tensor)> {
        self.tensors.iter().map(|(r, t)| (*r, t))
    }

    /// Replaces the tensor for `role`, which must already exist with the
    /// same shape (used when snapping shared copies onto a template).
    pub fn replace_tensor(&mut self, role: TensorRole, tensor: Tensor) -> Result<()> {
        match self.tensors.get_mut(&role) {
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(Error::Shape(format!(
                        "layer '{}' role {role}: cannot replace shape {:?} with {:?}",
                        self.name,
                        slot.shape(),
                        tensor.shape()
                    )));
                }
                *slot = tensor;
                Ok(())
            }
            None => Err(Error::Argument(format!(
                "layer '{}' has no {role} tensor to replace",
                self.name
            ))),
        }
    }

    /// Output channels of a conv layer (weight shape dim 0).
    pub fn out_channels(&self) -> Option<usize> {
        self.tensor(TensorRole::ConvWeight).map(|w| w.shape()[0])
    }

    fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Manifest(format!("layer '{}': {msg}", self.name)));
        if self.name.is_empty() {
            return err("empty name".into());
        }
        match self.kind {
            LayerKind::Conv => {
                let sp = match self.spatial {
                    Some(sp) => sp,
                    None => return err("conv layer requires spatial params".into()),
                };
                if sp.stride == 0 || sp.groups == 0 {
                    return err("stride and groups must be at least 1".into());
                }
                let w = match self.tensor(TensorRole::ConvWeight) {
                    Some(w) => w,
                    None => return err("conv layer requires a weight tensor".into()),
                };
                if w.shape().len() != 4 {
                    return err(format!("conv weight must be 4-d, got {:?}", w.shape()));
                }
                if w.shape()[2] != sp.kernel_h || w.shape()[3] != sp.kernel_w {
                    return err(format!(
                        "kernel dims {}x{} disagree with weight shape {:?}",
                        sp.kernel_h,
                        sp.kernel_w,
                        w.shape()
                    ));
                }
                if w.shape()[0] % sp.groups != 0 {
                    return err(format!(
                        "output channels {} not divisible by groups {}",
                        w.shape()[0],
                        sp.groups
                    ));
                }
                if let Some(b) = self.tensor(TensorRole::ConvBias) {
                    if b.shape() != [w.shape()[0]] {
                        return err(format!(
                            "bias shape {:?} must be [{}]",
                            b.shape(),
                            w.shape()[0]
                        ));
                    }
                }
                for (role, _) in self.tensors() {
                    if role.is_bn() {
                        return err(format!("conv layer cannot carry {role}"));
                    }
                }
            }
            LayerKind::BatchNorm => {
                if self.spatial.is_some() {
                    return err("batch-norm layer cannot have spatial params".into());
                }
                let mut c = None;
                for role in [
                    TensorRole::BnScale,
                    TensorRole::BnBias,
                    TensorRole::BnMean,
                    TensorRole::BnVar,
                ] {
                    let t = match self.tensor(role) {
                        Some(t) => t,
                        None => return err(format!("batch-norm layer requires {role}")),
                    };
                    if t.shape().len() != 1 {
                        return err(format!("{role} must be 1-d, got {:?}", t.shape()));
                    }
                    match c {
                        None => c = Some(t.shape()[0]),
                        Some(c) if c != t.shape()[0] => {
                            return err("batch-norm tensors disagree on channel count".into())
                        }
                        _ => {}
                    }
                }
                if let Some(vals) = self.tensor(TensorRole::BnVar).and_then(Tensor::values) {
                    if vals.iter().any(|&v| v <= 0.0) {
                        return err("bn_var values must be strictly positive".into());
                    }
                }
                for (role, _) in self.tensors() {
                    if !role.is_bn() {
                        return err(format!("batch-norm layer cannot carry {role}"));
                    }
                }
            }
            LayerKind::Relu => {
                if !self.tensors.is_empty() || self.spatial.is_some() {
                    return err("relu layer carries no tensors or spatial params".into());
                }
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                let sp = match self.spatial {
                    Some(sp) => sp,
                    None => return err("pool layer requires spatial params".into()),
                };
                if sp.stride == 0 {
                    return err("pool stride must be at least 1".into());
                }
                if sp.groups != 1 {
                    return err("pool layers do not support channel groups".into());
                }
                if !self.tensors.is_empty() {
                    return err("pool layer carries no tensors".into());
                }
            }
        }
        Ok(())
    }
}

/// An ordered stack of layers with an architecture tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: String,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds and validates a network: layer names must be unique and each
    /// layer must satisfy its own invariants.
    pub fn new(arch: impl Into<String>, layers: Vec<Layer>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for layer in &layers {
            layer.validate()?;
            if !seen.insert(layer.name().to_owned()) {
                return Err(Error::Manifest(format!(
                    "duplicate layer name '{}'",
                    layer.name()
                )));
            }
        }
        Ok(Network {
            arch: arch.into(),
            layers,
        })
    }

    /// Architecture tag (free-form, e.g. `"toy-cnn"`).
    pub fn arch(&self) -> &str {
        &self.arch
    }

    /// Layers in execution order.
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Index of the layer with this name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == name)
    }

    /// Layer by name.
    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name() == name)
    }

    /// True when every tensor in the network carries a payload.
    pub fn is_materialized(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.tensors().all(|(_, t)| t.is_materialized()))
    }
}

/// Parameter counts for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParamCount {
    /// Layer name.
    pub layer: String,
    /// Convolution parameters (weight + bias elements).
    pub conv: u64,
    /// Batch-norm parameters (scale + bias + mean + var elements).
    pub bn: u64,
}

/// Network-wide parameter accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamAccounting {
    /// One entry per layer, in network order (activation layers report 0).
    pub per_layer: Vec<LayerParamCount>,
    /// Total convolution parameters.
    pub conv_total: u64,
    /// Total batch-norm parameters.
    pub bn_total: u64,
    /// `conv_total + bn_total`.
    pub total: u64,
}

/// Counts parameters from shapes alone; works on shape-only manifests.
///
/// Convolution weights and biases are counted together per layer;
/// batch-norm parameters are accounted separately so normalization overhead
/// is visible next to the conv mass it decorates.
pub fn param_accounting(net: &Network) -> ParamAccounting {
    let mut per_layer = Vec::with_capacity(net.layers().len());
    let mut conv_total = 0u64;
    let mut bn_total = 0u64;
    for layer in net.layers() {
        let mut conv = 0u64;
        let mut bn = 0u64;
        for (role, tensor) in layer.tensors() {
            let n = tensor.elems() as u64;
            if role.is_bn() {
                bn += n;
            } else {
                conv += n;
            }
        }
        conv_total += conv;
        bn_total += bn;
        per_layer.push(LayerParamCount {
            layer: layer.name().to_owned(),
            conv,
            bn,
        });
    }
    ParamAccounting {
        per_layer,
        conv_total,
        bn_total,
        total: conv_total + bn_total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_conv() -> Layer {
        let w = Tensor::new(vec![4, 2, 3, 3], vec![0.25; 72]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        Layer::conv("c1", w, Some(b), SpatialParams::new(3, 3, 1, 1)).unwrap()
    }

    #[test]
    fn conv_param_count_is_weight_plus_bias() {
        // 3x3 kernels over 2 input channels into 4 filters: 72 weights + 4 biases.
        let net = Network::new("toy", vec![toy_conv()]).unwrap();
        let acc = param_accounting(&net);
        assert_eq!(acc.conv_total, 76);
        assert_eq!(acc.bn_total, 0);
        assert_eq!(acc.total, 76);
        assert_eq!(acc.per_layer[0].conv, 76);
    }

    #[test]
    fn tensor_rejects_shape_payload_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tensor_rejects_non_finite_values() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::INFINITY]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn tensor_rejects_zero_dims_and_empty_shape() {
        assert!(matches!(Tensor::shape_only(vec![3, 0]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::shape_only(vec![]), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicate_layer_names_rejected() {
        let l1 = Layer::relu("r");
        let l2 = Layer::relu("r");
        assert!(matches!(
            Network::new("toy", vec![l1, l2]),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn conv_kernel_must_match_weight_shape() {
        let w = Tensor::new(vec![4, 2, 3, 3], vec![0.0; 72]).unwrap();
        assert!(matches!(
            Layer::conv("c", w, None, SpatialParams::new(5, 5, 1, 0)),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn bn_var_must_be_positive() {
        let t = |v: f32| Tensor::new(vec![2], vec![v; 2]).unwrap();
        assert!(matches!(
            Layer::batch_norm("bn", t(1.0), t(0.0), t(0.0), t(0.0)),
            Err(Error::Manifest(_))
        ));
        assert!(Layer::batch_norm("bn", t(1.0), t(0.0), t(0.0), t(0.5)).is_ok());
    }

    #[test]
    fn bn_requires_all_four_tensors() {
        let t = || Tensor::new(vec![2], vec![1.0; 2]).unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert(TensorRole::BnScale, t());
        tensors.insert(TensorRole::BnBias, t());
        assert!(matches!(
            Layer::from_parts("bn".into(), LayerKind::BatchNorm, tensors, None),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn shape_only_accounting_needs_no_payload() {
        let w = Tensor::shape_only(vec![96, 3, 5, 5]).unwrap();
        assert!(!w.is_materialized());
        assert_eq!(w.elems(), 7200);
        let layer = Layer::conv("c1", w, None, SpatialParams::new(5, 5, 1, 2)).unwrap();
        let net = Network::new("shapes", vec![layer]).unwrap();
        assert_eq!(param_accounting(&net).conv_total, 7200);
    }

    #[test]
    fn grouped_conv_counts_per_group_width() {
        // 256 filters seeing 48 of 96 input channels each (2 groups).
        let w = Tensor::shape_only(vec![256, 48, 3, 3]).unwrap();
        let layer = Layer::conv(
            "c2",
            w,
            None,
            SpatialParams::new(3, 3, 1, 1).with_groups(2),
        )
        .unwrap();
        let net = Network::new("shapes", vec![layer]).unwrap();
        assert_eq!(param_accounting(&net).conv_total, 256 * 48 * 9);
    }
}
