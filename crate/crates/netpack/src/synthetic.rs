//! Seeded generators: weight samples, test images, toy networks, and
//! shape-only manifests of well-known convolutional architectures.
//!
//! Everything here is a pure function of its seed (or of nothing), built on
//! a counter-based stream cipher RNG, so fixtures are identical across
//! platforms, runs, and thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::forward::Image;
use crate::model::{Layer, Network, SpatialParams, Tensor};
use crate::transform::{TieGroup, TyingPlan};

/// Draws Laplace(mu, b) samples by inverse-CDF transform.
pub fn laplace_samples(seed: u64, n: usize, mu: f64, b: f64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| laplace_draw(&mut rng, mu, b)).collect()
}

fn laplace_draw(rng: &mut ChaCha8Rng, mu: f64, b: f64) -> f32 {
    // u uniform on (-1/2, 1/2); x = mu - b * sign(u) * ln(1 - 2|u|).
    let mut r: f64 = rng.random();
    while r == 0.0 {
        r = rng.random();
    }
    let u = r - 0.5;
    let x = mu - b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
    x as f32
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f32 {
    (lo + (hi - lo) * rng.random::<f64>()) as f32
}

/// A deterministic test image: uniform noise passed through a 3x3 box blur
/// (averaging over the taps inside the frame), which gives it mild local
/// structure while staying inside `[0, 1]`.
pub fn synthetic_image(seed: u64, channels: usize, height: usize, width: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = (0..channels * height * width)
        .map(|_| rng.random::<f64>() as f32)
        .collect();
    let mut data = Vec::with_capacity(noise.len());
    for c in 0..channels {
        let plane = &noise[c * height * width..(c + 1) * height * width];
        for y in 0..height {
            for x in 0..width {
                let mut sum = 0.0f32;
                let mut taps = 0u32;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy >= 0 && yy < height as i64 && xx >= 0 && xx < width as i64 {
                            sum += plane[(yy as usize) * width + xx as usize];
                            taps += 1;
                        }
                    }
                }
                data.push(sum / taps as f32);
            }
        }
    }
    Image::new(channels, height, width, data).expect("blurred noise stays in range")
}

fn laplace_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, b: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| laplace_draw(rng, 0.0, b)).collect();
    Tensor::new(shape, values).expect("generated values are finite")
}

/// A small materialized CNN: 3x3 stride-1 convs with bias (and optionally a
/// batch-norm after each), relu everywhere, and a 2x2 max pool after every
/// second conv. Weights are Laplace-distributed with a scale that shrinks
/// with depth, roughly how trained conv stacks look.
pub fn toy_cnn(seed: u64, in_channels: usize, widths: &[usize], with_bn: bool) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut prev = in_channels;
    for (i, &out_c) in widths.iter().enumerate() {
        let b = 0.05 * 0.8f64.powi(i as i32);
        let weight = laplace_tensor(&mut rng, vec![out_c, prev, 3, 3], b);
        let bias = laplace_tensor(&mut rng, vec![out_c], b);
        layers.push(Layer::conv(
            format!("conv{}", i + 1),
            weight,
            Some(bias),
            SpatialParams::new(3, 3, 1, 1),
        )?);
        if with_bn {
            let per_channel = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
                Tensor::new(vec![out_c], (0..out_c).map(|_| uniform(rng, lo, hi)).collect())
                    .expect("finite")
            };
            let scale = per_channel(&mut rng, 0.6, 1.6);
            let bias = per_channel(&mut rng, -0.3, 0.3);
            let mean = per_channel(&mut rng, -0.2, 0.2);
            let var = per_channel(&mut rng, 0.4, 1.5);
            layers.push(Layer::batch_norm(format!("bn{}", i + 1), scale, bias, mean, var)?);
        }
        layers.push(Layer::relu(format!("relu{}", i + 1)));
        if (i + 1) % 2 == 0 {
            layers.push(Layer::max_pool(
                format!("pool{}", i + 1),
                SpatialParams::new(2, 2, 2, 0),
            )?);
        }
        prev = out_c;
    }
    Network::new("toy-cnn", layers)
}

/// A randomly shaped small network for property testing: 1-3 conv layers of
/// 1-4 channels with odd kernels, coin-flip batch norm and pooling. Always
/// valid for images of at least 8x8.
pub fn random_toy_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3usize);
    let in_channels = rng.random_range(1..=3usize);
    let mut layers = Vec::new();
    let mut prev = in_channels;
    let mut pools = 0usize;
    for i in 0..depth {
        let out_c = rng.random_range(1..=4usize);
        let k = if rng.random::<bool>() { 3 } else { 1 };
        let b = 0.05 * 0.9f64.powi(i as i32);
        let weight = laplace_tensor(&mut rng, vec![out_c, prev, k, k], b);
        let bias = laplace_tensor(&mut rng, vec![out_c], b);
        layers.push(
            Layer::conv(
                format!("conv{}", i + 1),
                weight,
                Some(bias),
                SpatialParams::new(k, k, 1, k / 2),
            )
            .expect("generated conv is valid"),
        );
        if rng.random::<bool>() {
            let per_channel = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
                Tensor::new(vec![out_c], (0..out_c).map(|_| uniform(rng, lo, hi)).collect())
                    .expect("finite")
            };
            let scale = per_channel(&mut rng, 0.6, 1.6);
            let bias_t = per_channel(&mut rng, -0.3, 0.3);
            let mean = per_channel(&mut rng, -0.2, 0.2);
            let var = per_channel(&mut rng, 0.4, 1.5);
            layers.push(
                Layer::batch_norm(format!("bn{}", i + 1), scale, bias_t, mean, var)
                    .expect("generated bn is valid"),
            );
        }
        layers.push(Layer::relu(format!("relu{}", i + 1)));
        if pools < 2 && rng.random::<bool>() {
            layers.push(
                Layer::max_pool(format!("pool{}", i + 1), SpatialParams::new(2, 2, 2, 0))
                    .expect("generated pool is valid"),
            );
            pools += 1;
        }
        prev = out_c;
    }
    Network::new("random-toy", layers).expect("generated network is valid")
}

/// Fills every shape-only tensor with plausible values: Laplace(0, 0.05)
/// conv weights and biases, and batch-norm tensors in the ranges a trained
/// network would have (positive variances included). Already-materialized
/// tensors are kept as they are.
pub fn materialize_like(net: &Network, seed: u64) -> Result<Network> {
    use crate::model::TensorRole;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let mut filled = layer.clone();
        let roles: Vec<TensorRole> = layer.tensors().map(|(r, _)| r).collect();
        for role in roles {
            let t = layer.tensor(role).expect("role was just listed");
            if t.is_materialized() {
                continue;
            }
            let shape = t.shape().to_vec();
            let n = t.elems();
            let values: Vec<f32> = match role {
                TensorRole::BnScale => (0..n).map(|_| uniform(&mut rng, 0.6, 1.6)).collect(),
                TensorRole::BnBias => (0..n).map(|_| uniform(&mut rng, -0.3, 0.3)).collect(),
                TensorRole::BnMean => (0..n).map(|_| uniform(&mut rng, -0.2, 0.2)).collect(),
                TensorRole::BnVar => (0..n).map(|_| uniform(&mut rng, 0.4, 1.5)).collect(),
                _ => (0..n).map(|_| laplace_draw(&mut rng, 0.0, 0.05)).collect(),
            };
            filled.replace_tensor(role, Tensor::new(shape, values)?)?;
        }
        layers.push(filled);
    }
    Network::new(net.arch().to_owned(), layers)
}

fn conv_decl(
    name: &str,
    out_c: usize,
    in_per_group: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    bias: bool,
) -> Layer {
    let weight = Tensor::shape_only(vec![out_c, in_per_group, k, k]).expect("valid shape");
    let bias = bias.then(|| Tensor::shape_only(vec![out_c]).expect("valid shape"));
    Layer::conv(
        name,
        weight,
        bias,
        SpatialParams::new(k, k, stride, padding).with_groups(groups),
    )
    .expect("declared conv is valid")
}

fn bn_decl(name: &str, channels: usize) -> Layer {
    let t = || Tensor::shape_only(vec![channels]).expect("valid shape");
    Layer::batch_norm(name, t(), t(), t(), t()).expect("declared bn is valid")
}

fn pool_decl(name: &str, padding: usize) -> Layer {
    Layer::max_pool(name, SpatialParams::new(3, 3, 2, padding)).expect("declared pool is valid")
}

/// The compact five-conv stack (shape-only): small first kernel, grouped
/// middle layers, pools after the first two convs and the last.
pub fn alexnet_table_stack() -> Network {
    Network::new(
        "alexnet-table",
        vec![
            conv_decl("conv1", 96, 3, 5, 2, 2, 1, true),
            pool_decl("pool1", 0),
            conv_decl("conv2", 256, 48, 3, 1, 1, 2, true),
            pool_decl("pool2", 0),
            conv_decl("conv3", 384, 256, 3, 1, 1, 1, true),
            Layer::relu("relu3"),
            conv_decl("conv4", 384, 192, 3, 1, 1, 2, true),
            conv_decl("conv5", 256, 192, 3, 1, 1, 2, true),
            pool_decl("pool5", 0),
        ],
    )
    .expect("declared stack is valid")
}

/// The classic five-conv stack (shape-only): 11x11 stride-4 first layer,
/// grouped 5x5 second layer, three 3x3 layers. Conv parameters with biases
/// total 2,334,080.
pub fn alexnet_classic_manifest() -> Network {
    Network::new(
        "alexnet",
        vec![
            conv_decl("conv1", 96, 3, 11, 4, 2, 1, true),
            Layer::relu("relu1"),
            pool_decl("pool1", 0),
            conv_decl("conv2", 256, 48, 5, 1, 2, 2, true),
            Layer::relu("relu2"),
            pool_decl("pool2", 0),
            conv_decl("conv3", 384, 256, 3, 1, 1, 1, true),
            Layer::relu("relu3"),
            conv_decl("conv4", 384, 192, 3, 1, 1, 2, true),
            Layer::relu("relu4"),
            conv_decl("conv5", 256, 192, 3, 1, 1, 2, true),
            Layer::relu("relu5"),
            pool_decl("pool5", 0),
        ],
    )
    .expect("declared stack is valid")
}

/// The 50-layer bottleneck-residual stack (shape-only): biasless convs each
/// followed by batch norm, a global average pool, and the classifier as a
/// 1x1 conv. Conv parameters total 25,503,912; batch-norm tensors add
/// 106,240 stored values.
pub fn resnet50_manifest() -> Network {
    let mut layers = vec![
        conv_decl("conv1", 64, 3, 7, 2, 3, 1, false),
        bn_decl("bn1", 64),
        Layer::relu("relu1"),
        pool_decl("pool1", 1),
    ];
    // (mid, out, blocks); the input width comes from the previous stage.
    let stages: [(usize, usize, usize); 4] =
        [(64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)];
    let mut in_c = 64;
    for (si, &(mid, out, blocks)) in stages.iter().enumerate() {
        let stage = si + 2;
        for b in 1..=blocks {
            let stride = if b == 1 && stage > 2 { 2 } else { 1 };
            let prefix = format!("conv{stage}_{b}");
            layers.push(conv_decl(&format!("{prefix}a"), mid, in_c, 1, 1, 0, 1, false));
            layers.push(bn_decl(&format!("bn{stage}_{b}a"), mid));
            layers.push(Layer::relu(format!("relu{stage}_{b}a")));
            layers.push(conv_decl(&format!("{prefix}b"), mid, mid, 3, stride, 1, 1, false));
            layers.push(bn_decl(&format!("bn{stage}_{b}b"), mid));
            layers.push(Layer::relu(format!("relu{stage}_{b}b")));
            layers.push(conv_decl(&format!("{prefix}c"), out, mid, 1, 1, 0, 1, false));
            layers.push(bn_decl(&format!("bn{stage}_{b}c"), out));
            if b == 1 {
                layers.push(conv_decl(
                    &format!("conv{stage}_proj"),
                    out,
                    in_c,
                    1,
                    stride,
                    0,
                    1,
                    false,
                ));
                layers.push(bn_decl(&format!("bn{stage}_proj"), out));
            }
            layers.push(Layer::relu(format!("relu{stage}_{b}")));
            in_c = out;
        }
    }
    layers.push(
        Layer::avg_pool("pool5", SpatialParams::new(7, 7, 1, 0)).expect("declared pool is valid"),
    );
    layers.push(conv_decl("fc1000", 1000, in_c, 1, 1, 0, 1, true));
    Network::new("resnet50", layers).expect("declared stack is valid")
}

/// A residual-style stack built for weight sharing (shape-only): four stages
/// of repeated two-conv blocks whose repeats are tie-able copies of the
/// first block, per-stage transition convs, a global average pool, and a
/// 1x1-conv classifier. Returns the expanded manifest and the plan that
/// deduplicates it: 29,092,008 declared conv parameters, 8,374,440 once
/// tied.
pub fn shared_resnet_manifest() -> (Network, TyingPlan) {
    let mut layers = vec![
        conv_decl("conv1", 64, 3, 7, 2, 3, 1, false),
        Layer::relu("relu1"),
        pool_decl("pool1", 1),
    ];
    let stages: [(usize, usize); 4] = [(64, 2), (128, 3), (256, 10), (512, 3)];
    let mut groups = Vec::new();
    let mut in_c = 64;
    for (si, &(c, repeats)) in stages.iter().enumerate() {
        let stage = si + 2;
        layers.push(conv_decl(&format!("trans{stage}"), c, in_c, 3, 2, 1, 1, false));
        layers.push(Layer::relu(format!("relu_trans{stage}")));
        for b in 1..=repeats {
            layers.push(conv_decl(&format!("conv{stage}_{b}a"), c, c, 3, 1, 1, 1, false));
            layers.push(Layer::relu(format!("relu{stage}_{b}a")));
            layers.push(conv_decl(&format!("conv{stage}_{b}b"), c, c, 3, 1, 1, 1, false));
            layers.push(Layer::relu(format!("relu{stage}_{b}b")));
        }
        groups.push(TieGroup {
            template: vec![
                format!("conv{stage}_1a"),
                format!("relu{stage}_1a"),
                format!("conv{stage}_1b"),
                format!("relu{stage}_1b"),
            ],
            repeat: repeats,
        });
        in_c = c;
    }
    layers.push(
        Layer::avg_pool("pool5", SpatialParams::new(4, 4, 1, 0)).expect("declared pool is valid"),
    );
    layers.push(conv_decl("fc1000", 1000, in_c, 1, 1, 0, 1, true));
    let net = Network::new("shared-resnet", layers).expect("declared stack is valid");
    (net, TyingPlan { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyze::fit_laplacian;
    use crate::forward::forward;
    use crate::model::param_accounting;
    use crate::transform::{shared_param_count, tie_blocks};

    #[test]
    fn laplace_samples_match_the_target_distribution() {
        let samples = laplace_samples(11, 50_000, 0.0, 0.05);
        let fit = fit_laplacian(&samples).unwrap();
        assert!(fit.mu.abs() < 0.002, "median drifted to {}", fit.mu);
        assert!(
            (fit.b - 0.05).abs() < 0.0025,
            "scale fit {} too far from 0.05",
            fit.b
        );
        // Excess kurtosis of a Laplace distribution is 3.
        let n = samples.len() as f64;
        let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / n;
        let m2 = samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let m4 = samples.iter().map(|&v| (v as f64 - mean).powi(4)).sum::<f64>() / n;
        let excess = m4 / (m2 * m2) - 3.0;
        assert!((excess - 3.0).abs() < 0.5, "excess kurtosis {excess}");
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(laplace_samples(5, 100, 0.0, 0.1), laplace_samples(5, 100, 0.0, 0.1));
        assert_ne!(laplace_samples(5, 100, 0.0, 0.1), laplace_samples(6, 100, 0.0, 0.1));
        assert_eq!(synthetic_image(9, 3, 8, 8), synthetic_image(9, 3, 8, 8));
        assert_eq!(
            toy_cnn(3, 1, &[4, 4], true).unwrap(),
            toy_cnn(3, 1, &[4, 4], true).unwrap()
        );
        assert_eq!(random_toy_net(17), random_toy_net(17));
    }

    #[test]
    fn synthetic_images_stay_in_range() {
        let img = synthetic_image(0, 3, 16, 16);
        assert_eq!((img.channels(), img.height(), img.width()), (3, 16, 16));
        assert!(img
            .as_volume()
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        // Blurred noise is not constant.
        let first = img.as_volume().data()[0];
        assert!(img.as_volume().data().iter().any(|&v| v != first));
    }

    #[test]
    fn toy_cnn_runs_forward() {
        let net = toy_cnn(1, 3, &[4, 6], true).unwrap();
        let img = synthetic_image(2, 3, 16, 16);
        let out = forward(&net, &img, None).unwrap();
        assert_eq!(out.channels(), 6);
        // Two convs means one pool: 16 -> 8.
        assert_eq!(out.height(), 8);
    }

    #[test]
    fn random_toy_nets_run_forward_across_seeds() {
        for seed in 0..30 {
            let net = random_toy_net(seed);
            let in_c = net.layers()[0]
                .tensor(crate::model::TensorRole::ConvWeight)
                .unwrap()
                .shape()[1];
            let img = synthetic_image(seed, in_c, 8, 8);
            forward(&net, &img, None).unwrap();
        }
    }

    #[test]
    fn materialize_fills_every_declared_tensor() {
        let net = resnet50_manifest();
        assert!(!net.is_materialized());
        let filled = materialize_like(&net, 3).unwrap();
        assert!(filled.is_materialized());
        assert_eq!(param_accounting(&filled), param_accounting(&net));
        assert_eq!(
            materialize_like(&net, 3).unwrap().layers()[0],
            filled.layers()[0]
        );
        // Variances must come out positive or the result would not validate.
        let bn = filled.layer("bn1").unwrap();
        assert!(bn
            .tensor(crate::model::TensorRole::BnVar)
            .unwrap()
            .values()
            .unwrap()
            .iter()
            .all(|&v| v > 0.0));
    }

    #[test]
    fn classic_stack_parameter_count_is_frozen() {
        let acc = param_accounting(&alexnet_classic_manifest());
        assert_eq!(acc.conv_total, 2_334_080);
        assert_eq!(acc.bn_total, 0);
        assert_eq!(acc.total, 2_334_080);
    }

    #[test]
    fn table_stack_declares_the_expected_kernels() {
        let net = alexnet_table_stack();
        assert_eq!(net.layers().len(), 9);
        let kernel = |name: &str| {
            let i = net.index_of(name).unwrap();
            net.layers()[i]
                .tensor(crate::model::TensorRole::ConvWeight)
                .unwrap()
                .shape()
                .to_vec()
        };
        assert_eq!(kernel("conv1"), vec![96, 3, 5, 5]);
        assert_eq!(kernel("conv2"), vec![256, 48, 3, 3]);
        assert_eq!(kernel("conv3"), vec![384, 256, 3, 3]);
        assert_eq!(kernel("conv4"), vec![384, 192, 3, 3]);
        assert_eq!(kernel("conv5"), vec![256, 192, 3, 3]);
    }

    #[test]
    fn residual_stack_parameter_count_is_frozen() {
        let acc = param_accounting(&resnet50_manifest());
        // 23,454,912 in the residual trunk plus the 2,049,000-parameter
        // classifier.
        assert_eq!(acc.conv_total, 25_503_912);
        assert_eq!(acc.bn_total, 106_240);
    }

    #[test]
    fn shared_stack_ties_to_the_frozen_counts() {
        let (net, plan) = shared_resnet_manifest();
        let expanded = param_accounting(&net);
        assert_eq!(expanded.total, 29_092_008);
        let tied = tie_blocks(&net, &plan).unwrap();
        let counts = shared_param_count(&tied).unwrap();
        // 7,861,440 in the tied trunk plus the 513,000-parameter classifier.
        assert_eq!(counts.unique_total, 8_374_440);
        assert_eq!(counts.expanded_total, 29_092_008);
    }
}
