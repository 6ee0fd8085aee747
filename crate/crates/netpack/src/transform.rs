//! Structural network transforms: depth pruning and cross-layer weight
//! tying.
//!
//! Pruning keeps a prefix of the layer stack for feature extraction — a
//! network cut below its head still yields descriptors, just cheaper ones.
//! Tying deduplicates repeated blocks (as in residual stacks whose blocks
//! share a shape): one template block keeps its weights, repeat instances
//! become references. The pair of a deduplicated network and its expansion
//! recipe reproduces the original layer sequence exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{param_accounting, Layer, Network};

/// Keeps every layer up to and including `layer` and drops the rest, the
/// named layer's own trailing normalization or activation included. To cut
/// after a conv's post-processing, name the activation itself.
pub fn prune_at(net: &Network, layer: &str) -> Result<Network> {
    let idx = net.index_of(layer).ok_or_else(|| {
        Error::Argument(format!("cannot prune at unknown layer '{layer}'"))
    })?;
    Network::new(net.arch().to_owned(), net.layers()[..=idx].to_vec())
}

/// One tying group: a consecutive template block and how many times it
/// appears in total (template included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TieGroup {
    /// Names of the template block's layers, in network order.
    pub template: Vec<String>,
    /// Total instance count; the `repeat - 1` blocks immediately after the
    /// template become references to it.
    pub repeat: usize,
}

/// A set of tying groups applied together.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TyingPlan {
    /// Groups; their claimed layer ranges must not overlap.
    pub groups: Vec<TieGroup>,
}

/// One layer of the expanded network: which deduplicated layer supplies the
/// weights, and the name the expanded instance carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionStep {
    /// Layer name in the deduplicated network.
    pub source: String,
    /// Layer name in the expanded network.
    pub instance: String,
}

/// A deduplicated network plus the recipe to expand it back.
#[derive(Debug, Clone, PartialEq)]
pub struct TiedNetwork {
    /// The network with repeat blocks removed.
    pub unique: Network,
    /// One step per layer of the original network, in order. Unshared layers
    /// appear as themselves (`source == instance`).
    pub expansion: Vec<ExpansionStep>,
}

/// Applies a tying plan.
///
/// Each group's template must name a consecutive run of layers; the
/// `repeat - 1` runs that follow must match it layer-for-layer in kind,
/// tensor shapes, and spatial hyperparameters (their values need not match —
/// tying is exactly the act of forcing them to the template's). Groups must
/// not claim overlapping layers.
pub fn tie_blocks(net: &Network, plan: &TyingPlan) -> Result<TiedNetwork> {
    let n = net.layers().len();
    // source_of[i] = index of the layer that will own weights for layer i.
    let mut source_of: Vec<usize> = (0..n).collect();
    let mut claimed = vec![false; n];

    for group in &plan.groups {
        if group.template.is_empty() {
            return Err(Error::Plan("tying group has an empty template".into()));
        }
        if group.repeat == 0 {
            return Err(Error::Plan("tying group repeat count must be at least 1".into()));
        }
        let len = group.template.len();
        let start = net.index_of(&group.template[0]).ok_or_else(|| {
            Error::Plan(format!(
                "tying template names unknown layer '{}'",
                group.template[0]
            ))
        })?;
        for (off, name) in group.template.iter().enumerate() {
            let at = start + off;
            let found = net
                .layers()
                .get(at)
                .map(|l| l.name())
                .unwrap_or("<end of network>");
            if found != name {
                return Err(Error::Plan(format!(
                    "template is not consecutive: expected '{name}' at position {at}, found '{found}'"
                )));
            }
        }
        let span = len * group.repeat;
        if start + span > n {
            return Err(Error::Plan(format!(
                "group starting at '{}' wants {} layers but the network ends first",
                group.template[0],
                span
            )));
        }
        for i in start..start + span {
            if claimed[i] {
                return Err(Error::Plan(format!(
                    "layer '{}' is claimed by more than one tying group",
                    net.layers()[i].name()
                )));
            }
            claimed[i] = true;
        }
        for r in 1..group.repeat {
            for off in 0..len {
                let t = &net.layers()[start + off];
                let c = &net.layers()[start + r * len + off];
                check_block_compatible(t, c)?;
                source_of[start + r * len + off] = start + off;
            }
        }
    }

    let mut unique_layers = Vec::new();
    let mut expansion = Vec::with_capacity(n);
    for (i, layer) in net.layers().iter().enumerate() {
        if source_of[i] == i {
            unique_layers.push(layer.clone());
        }
        expansion.push(ExpansionStep {
            source: net.layers()[source_of[i]].name().to_owned(),
            instance: layer.name().to_owned(),
        });
    }
    let unique = Network::new(net.arch().to_owned(), unique_layers)?;
    Ok(TiedNetwork { unique, expansion })
}

fn check_block_compatible(template: &Layer, copy: &Layer) -> Result<()> {
    if template.kind() != copy.kind() {
        return Err(Error::Plan(format!(
            "'{}' is {} but its tied copy '{}' is {}",
            template.name(),
            template.kind(),
            copy.name(),
            copy.kind()
        )));
    }
    if template.spatial() != copy.spatial() {
        return Err(Error::Plan(format!(
            "'{}' and tied copy '{}' differ in spatial hyperparameters",
            template.name(),
            copy.name()
        )));
    }
    let t_shapes: Vec<_> = template.tensors().map(|(r, t)| (r, t.shape().to_vec())).collect();
    let c_shapes: Vec<_> = copy.tensors().map(|(r, t)| (r, t.shape().to_vec())).collect();
    if t_shapes != c_shapes {
        return Err(Error::Plan(format!(
            "'{}' and tied copy '{}' differ in tensor shapes",
            template.name(),
            copy.name()
        )));
    }
    Ok(())
}

/// Expands a deduplicated network back to its full layer sequence, cloning
/// each step's source layer under the instance name.
pub fn untie(tied: &TiedNetwork) -> Result<Network> {
    let mut layers = Vec::with_capacity(tied.expansion.len());
    for step in &tied.expansion {
        let src_idx = tied.unique.index_of(&step.source).ok_or_else(|| {
            Error::Plan(format!(
                "expansion references '{}', which the deduplicated network lacks",
                step.source
            ))
        })?;
        let src = &tied.unique.layers()[src_idx];
        let tensors: BTreeMap<_, _> = src.tensors().map(|(r, t)| (r, t.clone())).collect();
        layers.push(Layer::from_parts(
            step.instance.clone(),
            src.kind(),
            tensors,
            src.spatial().copied(),
        )?);
    }
    Network::new(tied.unique.arch().to_owned(), layers)
}

/// Parameter counts before and after expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedParamCount {
    /// Conv parameters stored once.
    pub unique_conv: u64,
    /// Batch-norm parameters stored once.
    pub unique_bn: u64,
    /// All parameters stored once.
    pub unique_total: u64,
    /// Conv parameters the expanded network executes.
    pub expanded_conv: u64,
    /// Batch-norm parameters the expanded network executes.
    pub expanded_bn: u64,
    /// All parameters the expanded network executes.
    pub expanded_total: u64,
}

/// Counts stored vs. executed parameters for a tied network. Works on
/// shape-only declarations.
pub fn shared_param_count(tied: &TiedNetwork) -> Result<SharedParamCount> {
    let unique = param_accounting(&tied.unique);
    let by_name: BTreeMap<&str, (u64, u64)> = unique
        .per_layer
        .iter()
        .map(|c| (c.layer.as_str(), (c.conv, c.bn)))
        .collect();
    let mut expanded_conv = 0u64;
    let mut expanded_bn = 0u64;
    for step in &tied.expansion {
        let (conv, bn) = by_name.get(step.source.as_str()).ok_or_else(|| {
            Error::Plan(format!(
                "expansion references '{}', which the deduplicated network lacks",
                step.source
            ))
        })?;
        expanded_conv += conv;
        expanded_bn += bn;
    }
    Ok(SharedParamCount {
        unique_conv: unique.conv_total,
        unique_bn: unique.bn_total,
        unique_total: unique.total,
        expanded_conv,
        expanded_bn,
        expanded_total: expanded_conv + expanded_bn,
    })
}
