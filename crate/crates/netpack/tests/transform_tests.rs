//! Layer pruning and weight-tying behavior on realistic stacks.

mod common;

use netpack::forward::forward;
use netpack::model::param_accounting;
use netpack::synthetic::{alexnet_table_stack, synthetic_image, toy_cnn};
use netpack::transform::{
    prune_at, shared_param_count, tie_blocks, untie, TieGroup, TyingPlan,
};
use netpack::{Error, Layer, Network, SpatialParams, Tensor};

#[test]
fn deeper_cuts_keep_strictly_more_parameters() {
    let net = alexnet_table_stack();
    let full = param_accounting(&net);
    let mut last_conv = 0u64;
    let mut last_len = 0usize;
    for cut in ["pool1", "pool2", "relu3", "pool5"] {
        let pruned = prune_at(&net, cut).expect("cut point exists");
        assert_eq!(pruned.layers().last().unwrap().name(), cut);
        let count = param_accounting(&pruned);
        assert!(
            count.conv_total > last_conv,
            "cut {cut}: {} conv params, previous cut had {last_conv}",
            count.conv_total
        );
        assert!(pruned.layers().len() > last_len);
        last_conv = count.conv_total;
        last_len = pruned.layers().len();
    }
    // The deepest cut is the last layer, so nothing is dropped.
    assert_eq!(last_conv, full.conv_total);
    assert_eq!(last_len, net.layers().len());
}

#[test]
fn pruning_at_the_last_layer_is_identity() {
    let net = alexnet_table_stack();
    let pruned = prune_at(&net, "pool5").expect("cut point exists");
    assert_eq!(pruned, net);
}

#[test]
fn pruning_keeps_the_prefix_and_its_exact_parameters() {
    let net = toy_cnn(1, 3, &[8, 8, 16, 16, 32], false).unwrap();
    // Layer order: conv1 relu1 conv2 relu2 pool2 conv3 relu3 conv4 relu4
    // pool4 conv5 relu5.
    let pruned = prune_at(&net, "pool2").expect("cut point exists");
    let names: Vec<&str> = pruned.layers().iter().map(|l| l.name()).collect();
    assert_eq!(names, ["conv1", "relu1", "conv2", "relu2", "pool2"]);
    let expected: u64 = [(8, 3), (8, 8)]
        .iter()
        .map(|&(out_c, in_c): &(u64, u64)| out_c * in_c * 9 + out_c)
        .sum();
    assert_eq!(param_accounting(&pruned).conv_total, expected);

    // Every kept layer is bit-identical to the original.
    for (kept, original) in pruned.layers().iter().zip(net.layers()) {
        assert_eq!(kept, original);
    }
}

#[test]
fn unknown_cut_points_are_rejected() {
    let net = alexnet_table_stack();
    assert!(matches!(
        prune_at(&net, "fc7"),
        Err(Error::Argument(_))
    ));
}

/// A materialized stack of `repeat` structurally identical conv+relu blocks
/// (each block's weights differ) for tying tests.
fn repeated_block_net(repeat: usize, differ: bool) -> (Network, TyingPlan) {
    let mut layers = vec![Layer::conv(
        "stem",
        Tensor::new(vec![4, 3, 3, 3], (0..108).map(|i| (i as f32).sin() * 0.1).collect())
            .unwrap(),
        None,
        SpatialParams::new(3, 3, 1, 1),
    )
    .unwrap()];
    for b in 0..repeat {
        let bump = if differ { b as f32 } else { 0.0 };
        let weight = Tensor::new(
            vec![4, 4, 3, 3],
            (0..144)
                .map(|i| ((i as f32) + bump).cos() * 0.1)
                .collect(),
        )
        .unwrap();
        let bias =
            Tensor::new(vec![4], (0..4).map(|i| (i as f32 + bump) * 0.01).collect()).unwrap();
        layers.push(
            Layer::conv(
                format!("block{}_conv", b + 1),
                weight,
                Some(bias),
                SpatialParams::new(3, 3, 1, 1),
            )
            .unwrap(),
        );
        layers.push(Layer::relu(format!("block{}_relu", b + 1)));
    }
    let net = Network::new("repeated", layers).unwrap();
    let plan = TyingPlan {
        groups: vec![TieGroup {
            template: vec!["block1_conv".into(), "block1_relu".into()],
            repeat,
        }],
    };
    (net, plan)
}

#[test]
fn tying_replaces_every_instance_with_the_template() {
    let (net, plan) = repeated_block_net(3, true);
    let tied = tie_blocks(&net, &plan).expect("plan matches");

    // The deduplicated network keeps one copy of the block.
    let unique_names: Vec<&str> = tied.unique.layers().iter().map(|l| l.name()).collect();
    assert_eq!(
        unique_names,
        ["stem", "block1_conv", "block1_relu"]
    );
    // The expansion recipe restores the original length and names.
    assert_eq!(tied.expansion.len(), net.layers().len());
    let expanded = untie(&tied).expect("expansion is consistent");
    let names: Vec<&str> = expanded.layers().iter().map(|l| l.name()).collect();
    let original: Vec<&str> = net.layers().iter().map(|l| l.name()).collect();
    assert_eq!(names, original);

    // Every instance now carries the template's weights exactly, so running
    // block 2 or 3 is the same as running block 1.
    let template = net.layer("block1_conv").unwrap().tensor(
        netpack::TensorRole::ConvWeight,
    );
    for b in 2..=3 {
        let inst = expanded
            .layer(&format!("block{b}_conv"))
            .unwrap()
            .tensor(netpack::TensorRole::ConvWeight);
        assert_eq!(inst, template);
    }
}

#[test]
fn tied_networks_with_equal_blocks_expand_to_the_original() {
    let (net, plan) = repeated_block_net(4, false);
    let tied = tie_blocks(&net, &plan).expect("plan matches");
    let back = untie(&tied).expect("expansion is consistent");
    assert_eq!(back, net);

    // Since all blocks were already identical, the forward pass is unchanged.
    let image = synthetic_image(9, 3, 12, 12);
    let before = forward(&net, &image, None).unwrap();
    let after = forward(&back, &image, None).unwrap();
    assert_eq!(before.data(), after.data());
}

#[test]
fn tying_shrinks_stored_parameters_by_the_repeat_factor() {
    let (net, plan) = repeated_block_net(3, true);
    let tied = tie_blocks(&net, &plan).expect("plan matches");
    let counts = shared_param_count(&tied).expect("consistent expansion");
    let block_params = 4 * 4 * 9 + 4; // one conv's weight + bias
    let stem_params = 4 * 3 * 9;
    assert_eq!(counts.unique_total, (stem_params + block_params) as u64);
    assert_eq!(
        counts.expanded_total,
        (stem_params + 3 * block_params) as u64
    );
    // Executed parameters equal a plain count of the expanded network.
    let expanded = untie(&tied).expect("expansion is consistent");
    assert_eq!(
        param_accounting(&expanded).total,
        counts.expanded_total
    );
}

#[test]
fn trivial_plans_change_nothing() {
    let (net, _) = repeated_block_net(2, true);
    let tied = tie_blocks(&net, &TyingPlan::default()).expect("empty plan");
    assert_eq!(tied.unique, net);
    assert!(tied
        .expansion
        .iter()
        .all(|step| step.source == step.instance));
    assert_eq!(untie(&tied).expect("identity expansion"), net);
}

#[test]
fn mismatched_repeat_blocks_are_rejected() {
    // Instance 2's conv has a different output width than the template.
    let layers = vec![
        Layer::conv(
            "a_conv",
            Tensor::new(vec![4, 3, 3, 3], vec![0.1; 108]).unwrap(),
            None,
            SpatialParams::new(3, 3, 1, 1),
        )
        .unwrap(),
        Layer::conv(
            "b_conv",
            Tensor::new(vec![5, 3, 3, 3], vec![0.1; 135]).unwrap(),
            None,
            SpatialParams::new(3, 3, 1, 1),
        )
        .unwrap(),
    ];
    let net = Network::new("bad", layers).unwrap();
    let plan = TyingPlan {
        groups: vec![TieGroup {
            template: vec!["a_conv".into()],
            repeat: 2,
        }],
    };
    assert!(matches!(tie_blocks(&net, &plan), Err(Error::Plan(_))));
}

#[test]
fn plans_that_overrun_the_network_are_rejected() {
    let (net, _) = repeated_block_net(2, true);
    let plan = TyingPlan {
        groups: vec![TieGroup {
            template: vec!["block1_conv".into(), "block1_relu".into()],
            repeat: 5, // only 2 instances exist
        }],
    };
    assert!(matches!(tie_blocks(&net, &plan), Err(Error::Plan(_))));
}
