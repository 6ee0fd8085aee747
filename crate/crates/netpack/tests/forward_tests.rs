//! Forward-pass agreement with a direct-summation reference implementation.

mod common;

use common::{assert_volume_close, forward_oracle};
use netpack::forward::{forward, Image};
use netpack::synthetic::{random_toy_net, synthetic_image, toy_cnn};
use netpack::transform::prune_at;
use netpack::{Error, Layer, Network, SpatialParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_networks_match_the_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf0);
    for seed in 0..12 {
        let net = random_toy_net(seed);
        let in_c = net.layers()[0]
            .tensor(netpack::TensorRole::ConvWeight)
            .unwrap()
            .shape()[1];
        let side = rng.random_range(8..=14usize);
        let image = synthetic_image(100 + seed, in_c, side, side);
        let got = forward(&net, &image, None).expect("net accepts the image");
        let want = forward_oracle(&net, &image);
        assert_volume_close(&got, &want, 1e-5);
    }
}

fn lone_conv(
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Network {
    let per_group = in_c / groups;
    let n = out_c * per_group * k * k;
    let weight = Tensor::new(
        vec![out_c, per_group, k, k],
        (0..n).map(|i| ((i * 37 % 101) as f32 - 50.0) * 0.013).collect(),
    )
    .unwrap();
    let bias = Tensor::new(
        vec![out_c],
        (0..out_c).map(|i| i as f32 * 0.05 - 0.1).collect(),
    )
    .unwrap();
    let layer = Layer::conv(
        "conv",
        weight,
        Some(bias),
        SpatialParams::new(k, k, stride, padding).with_groups(groups),
    )
    .unwrap();
    Network::new("lone", vec![layer]).unwrap()
}

#[test]
fn edge_geometries_match_the_oracle() {
    struct Case {
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        side: usize,
    }
    let cases = [
        // 1x1 pointwise.
        Case { out_c: 5, in_c: 3, k: 1, stride: 1, padding: 0, groups: 1, side: 6 },
        // Large kernel, stride 2, asymmetric coverage.
        Case { out_c: 4, in_c: 3, k: 5, stride: 2, padding: 2, groups: 1, side: 11 },
        // Grouped convolution.
        Case { out_c: 6, in_c: 4, k: 3, stride: 1, padding: 1, groups: 2, side: 7 },
        // Non-overlapping stride equal to kernel.
        Case { out_c: 2, in_c: 2, k: 3, stride: 3, padding: 0, groups: 1, side: 9 },
        // Stride larger than kernel.
        Case { out_c: 3, in_c: 1, k: 2, stride: 3, padding: 0, groups: 1, side: 8 },
    ];
    for (i, c) in cases.iter().enumerate() {
        let net = lone_conv(c.out_c, c.in_c, c.k, c.stride, c.padding, c.groups);
        let image = synthetic_image(200 + i as u64, c.in_c, c.side, c.side);
        let got = forward(&net, &image, None).expect("geometry is valid");
        let want = forward_oracle(&net, &image);
        assert_volume_close(&got, &want, 1e-5);
    }
}

#[test]
fn pool_windows_use_only_in_bounds_taps() {
    // 2x2 input, 3x3 window, stride 2, padding 1: the single window hangs
    // over every border, so only the four real values participate. The
    // values are dyadic, making the expected mean exact in f32.
    let avg = Network::new(
        "avg",
        vec![Layer::avg_pool("pool", SpatialParams::new(3, 3, 2, 1)).unwrap()],
    )
    .unwrap();
    let image = Image::new(1, 2, 2, vec![0.25, 0.5, 0.75, 1.0]).unwrap();
    let out = forward(&avg, &image, None).unwrap();
    assert_eq!(out.data(), &[0.625], "average over real taps, not padding");

    // A negating 1x1 conv makes every activation negative; a max over
    // padded zeros would then wrongly return 0.
    let negate = Layer::conv(
        "negate",
        Tensor::new(vec![1, 1, 1, 1], vec![-1.0]).unwrap(),
        None,
        SpatialParams::new(1, 1, 1, 0),
    )
    .unwrap();
    let max = Network::new(
        "max",
        vec![
            negate,
            Layer::max_pool("pool", SpatialParams::new(3, 3, 2, 1)).unwrap(),
        ],
    )
    .unwrap();
    let image = Image::new(1, 2, 2, vec![0.25, 0.5, 0.75, 1.0]).unwrap();
    let out = forward(&max, &image, None).unwrap();
    assert_eq!(out.data(), &[-0.25], "max over real taps, not padding");
}

#[test]
fn pooling_agrees_with_the_oracle_on_odd_remainders() {
    // A 7x7 image with 3x3/2 pooling leaves a ragged final window; the
    // oracle clips taps the same way the library must.
    let net = Network::new(
        "pools",
        vec![
            Layer::max_pool("mp", SpatialParams::new(3, 3, 2, 0)).unwrap(),
            Layer::avg_pool("ap", SpatialParams::new(2, 2, 2, 1)).unwrap(),
        ],
    )
    .unwrap();
    for seed in 0..5 {
        let image = synthetic_image(300 + seed, 2, 7, 7);
        let got = forward(&net, &image, None).expect("geometry is valid");
        let want = forward_oracle(&net, &image);
        assert_volume_close(&got, &want, 1e-6);
    }
}

#[test]
fn stopping_early_equals_running_the_pruned_prefix() {
    let net = toy_cnn(21, 3, &[6, 6, 12, 12], true).unwrap();
    let image = synthetic_image(22, 3, 16, 16);
    for cut in ["conv1", "bn2", "pool2", "relu3"] {
        let partial = forward(&net, &image, Some(cut)).expect("cut exists");
        let pruned = prune_at(&net, cut).expect("cut exists");
        let full = forward(&pruned, &image, None).expect("prefix runs");
        assert_eq!(partial.data(), full.data(), "stopped at {cut}");
    }
}

#[test]
fn shape_and_name_errors_are_reported() {
    let net = lone_conv(4, 3, 3, 1, 1, 1);
    let wrong_channels = synthetic_image(1, 2, 8, 8);
    assert!(matches!(
        forward(&net, &wrong_channels, None),
        Err(Error::Shape(_))
    ));

    let image = synthetic_image(1, 3, 8, 8);
    assert!(matches!(
        forward(&net, &image, Some("missing")),
        Err(Error::Argument(_))
    ));

    // An image smaller than the (unpadded) kernel cannot be convolved.
    let tiny = synthetic_image(1, 3, 2, 2);
    let strict = lone_conv(4, 3, 3, 1, 0, 1);
    assert!(forward(&strict, &tiny, None).is_err());
}
