//! Plain-text settings files for quantization and tying.
//!
//! Both dialects are whitespace-delimited lines with `#` comments. The
//! quantization dialect:
//!
//! ```text
//! default scalar 4          # or: default vector 256 2 | default exempt
//! bn_exempt true            # optional, defaults to true
//! layer conv5 vector 64 2   # per-layer overrides
//! layer conv1 exempt
//! ```
//!
//! The tying dialect lists one group per line, repeat count first:
//!
//! ```text
//! group 3 conv2_1a relu2_1a conv2_1b relu2_1b
//! ```
//!
//! Serialization is deterministic (overrides sorted by layer name), so a
//! parse/serialize round trip is the identity on the parsed value.

use crate::error::{Error, Result};
use crate::quantize::{LayerMode, QuantizationSpec};
use crate::transform::{TieGroup, TyingPlan};

fn at_line(lineno: usize, err: Error) -> Error {
    match err {
        Error::Config(msg) => Error::Config(format!("line {lineno}: {msg}")),
        other => other,
    }
}

fn parse_mode(lineno: usize, tokens: &[&str]) -> Result<LayerMode> {
    let mode = match tokens {
        ["scalar", bits] => {
            let bits: u8 = bits.parse().map_err(|_| {
                Error::Config(format!("line {lineno}: '{bits}' is not a bit width"))
            })?;
            LayerMode::Scalar { bits }
        }
        ["vector", levels, dim] => {
            let levels: usize = levels.parse().map_err(|_| {
                Error::Config(format!("line {lineno}: '{levels}' is not a level count"))
            })?;
            let dim: usize = dim.parse().map_err(|_| {
                Error::Config(format!("line {lineno}: '{dim}' is not a block dimension"))
            })?;
            LayerMode::Vector { levels, dim }
        }
        ["exempt"] => LayerMode::Exempt,
        _ => {
            return Err(Error::Config(format!(
                "line {lineno}: expected 'scalar <bits>', 'vector <levels> <dim>', or 'exempt', got '{}'",
                tokens.join(" ")
            )))
        }
    };
    mode.validate().map_err(|e| at_line(lineno, e))?;
    Ok(mode)
}

/// Parses the quantization dialect. Exactly one `default` line is required.
pub fn parse_quant_spec(text: &str) -> Result<QuantizationSpec> {
    let mut default_mode: Option<LayerMode> = None;
    let mut bn_exempt: Option<bool> = None;
    let mut spec = QuantizationSpec::default();
    spec.overrides.clear();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "default" => {
                if default_mode.is_some() {
                    return Err(Error::Config(format!(
                        "line {lineno}: 'default' appears twice"
                    )));
                }
                default_mode = Some(parse_mode(lineno, &tokens[1..])?);
            }
            "bn_exempt" => {
                if bn_exempt.is_some() {
                    return Err(Error::Config(format!(
                        "line {lineno}: 'bn_exempt' appears twice"
                    )));
                }
                bn_exempt = Some(match tokens[1..] {
                    ["true"] => true,
                    ["false"] => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {lineno}: 'bn_exempt' takes 'true' or 'false'"
                        )))
                    }
                });
            }
            "layer" => {
                if tokens.len() < 3 {
                    return Err(Error::Config(format!(
                        "line {lineno}: 'layer' needs a name and a mode"
                    )));
                }
                let name = tokens[1].to_owned();
                let mode = parse_mode(lineno, &tokens[2..])?;
                if spec.overrides.insert(name.clone(), mode).is_some() {
                    return Err(Error::Config(format!(
                        "line {lineno}: layer '{name}' configured twice"
                    )));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "line {lineno}: unknown directive '{other}'"
                )))
            }
        }
    }

    spec.default_mode = default_mode.ok_or_else(|| {
        Error::Config("a 'default <mode>' line is required".into())
    })?;
    spec.bn_exempt = bn_exempt.unwrap_or(true);
    Ok(spec)
}

fn mode_text(mode: &LayerMode) -> String {
    match mode {
        LayerMode::Scalar { bits } => format!("scalar {bits}"),
        LayerMode::Vector { levels, dim } => format!("vector {levels} {dim}"),
        LayerMode::Exempt => "exempt".into(),
    }
}

/// Serializes a quantization spec to the text dialect.
pub fn quant_spec_to_text(spec: &QuantizationSpec) -> String {
    let mut out = format!(
        "default {}\nbn_exempt {}\n",
        mode_text(&spec.default_mode),
        spec.bn_exempt
    );
    for (name, mode) in &spec.overrides {
        out.push_str(&format!("layer {name} {}\n", mode_text(mode)));
    }
    out
}

/// Parses the tying dialect. An empty file is the empty plan.
pub fn parse_tying_plan(text: &str) -> Result<TyingPlan> {
    let mut plan = TyingPlan::default();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens[0] != "group" {
            return Err(Error::Config(format!(
                "line {lineno}: unknown directive '{}'",
                tokens[0]
            )));
        }
        if tokens.len() < 3 {
            return Err(Error::Config(format!(
                "line {lineno}: 'group' needs a repeat count and at least one layer"
            )));
        }
        let repeat: usize = tokens[1].parse().map_err(|_| {
            Error::Config(format!(
                "line {lineno}: '{}' is not a repeat count",
                tokens[1]
            ))
        })?;
        if repeat == 0 {
            return Err(Error::Config(format!(
                "line {lineno}: repeat count must be at least 1"
            )));
        }
        plan.groups.push(TieGroup {
            template: tokens[2..].iter().map(|s| s.to_string()).collect(),
            repeat,
        });
    }
    Ok(plan)
}

/// Serializes a tying plan to the text dialect.
pub fn tying_plan_to_text(plan: &TyingPlan) -> String {
    let mut out = String::new();
    for group in &plan.groups {
        out.push_str(&format!("group {}", group.repeat));
        for name in &group.template {
            out.push(' ');
            out.push_str(name);
        }
        out.push('\n');
    }
    out
}
