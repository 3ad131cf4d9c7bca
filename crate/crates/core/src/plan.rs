//! Pruning plans: which filters each layer keeps and which input channels
//! remain once producers shrink.
//!
//! Selection happens per prunable conv layer, independently of every other
//! layer. A single topological pass then propagates the surviving channel
//! indices along the edges:
//!
//! * batchnorm, pooling and output layers pass channels through unchanged;
//! * concat stacks its inputs, shifting each branch's indices by the widths of
//!   the branches before it;
//! * the first fc layer after a conv stack sees `channels x positions`
//!   features, so a kept channel `c` keeps features `c * area .. (c + 1) * area`;
//! * residual adds need every input at full width, which is why the last conv
//!   of a residual block is never prunable.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::{select_exemplars, ApOptions};
use crate::arch::{ArchitectureGraph, LayerKind, LayerNode, LayerOp};
use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::tensor::{flatten, FilterMatrix};

/// Settings the exemplar selection ran with, recorded for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionInfo {
    pub beta: f64,
    pub damping: f64,
    pub iterations: usize,
    pub early_exit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub kind: LayerKind,
    pub prunable: bool,
    /// Output channels (filters for conv/fc) before pruning.
    pub baseline_outputs: usize,
    /// Surviving output channels, sorted.
    pub kept_filter_indices: Vec<usize>,
    /// Size of the input index space: channels, stacked channels for concat,
    /// flattened features for fc.
    pub baseline_inputs: usize,
    pub kept_input_channel_indices: Vec<usize>,
    /// Weight shape for conv (`[o, i, kh, kw]`) and fc (`[o, i]`), `[c]` for
    /// batchnorm and `[c, h, w]` activations for everything else.
    pub pruned_shape: Vec<usize>,
}

impl LayerPlan {
    pub fn kept_outputs(&self) -> usize {
        self.kept_filter_indices.len()
    }

    pub fn kept_inputs(&self) -> usize {
        self.kept_input_channel_indices.len()
    }

    pub fn is_identity(&self) -> bool {
        self.kept_outputs() == self.baseline_outputs && self.kept_inputs() == self.baseline_inputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelTotals {
    pub kept: usize,
    pub baseline: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub architecture: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionInfo>,
    pub layers: Vec<LayerPlan>,
    pub totals: ChannelTotals,
}

impl PruningPlan {
    pub fn layer(&self, name: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Plan(format!("malformed plan: {e}")))
    }

    fn by_name(&self) -> HashMap<&str, &LayerPlan> {
        self.layers.iter().map(|l| (l.name.as_str(), l)).collect()
    }
}

/// A broken plan invariant, attributed to one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub layer: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer `{}`: {}", self.layer, self.message)
    }
}

/// Reads a conv/fc layer's weights (and bias) as a filter matrix, checking
/// shapes against the architecture.
pub fn layer_filters(layer: &LayerNode, bundle: &ModelBundle) -> Result<FilterMatrix> {
    let shape = layer.weight_shape().ok_or_else(|| Error::Validation {
        layer: layer.name.clone(),
        message: format!("{} layers have no filters", layer.kind()),
    })?;
    let wrap = |e: Error| Error::Validation {
        layer: layer.name.clone(),
        message: e.to_string(),
    };
    let w = bundle.weight4(&layer.weight_name(), shape).map_err(wrap)?;
    let bias = if layer.has_bias() {
        Some(bundle.vector(&layer.bias_name(), shape.c_out).map_err(wrap)?)
    } else {
        None
    };
    flatten(&w, bias.as_deref()).map_err(wrap)
}

/// Checks that `bundle` holds correctly shaped tensors for every conv and fc
/// layer, and for batchnorm layers whose tensors are present.
pub fn check_bundle(arch: &ArchitectureGraph, bundle: &ModelBundle) -> Result<()> {
    for layer in arch.layers() {
        match layer.kind() {
            LayerKind::Conv | LayerKind::Fc => {
                layer_filters(layer, bundle)?;
            }
            LayerKind::BatchNorm => {
                for suffix in ["weight", "bias", "running_mean", "running_var"] {
                    let name = format!("{}.{suffix}", layer.weights);
                    if bundle.contains(&name) {
                        bundle
                            .vector(&name, layer.output.channels)
                            .map_err(|e| Error::Validation {
                                layer: layer.name.clone(),
                                message: e.to_string(),
                            })?;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Selects exemplars for every prunable layer and propagates the result.
pub fn plan(
    arch: &ArchitectureGraph,
    bundle: &ModelBundle,
    beta: f64,
    opts: &ApOptions,
) -> Result<PruningPlan> {
    opts.validate()?;
    check_bundle(arch, bundle)?;
    let prunable: Vec<&LayerNode> = arch.layers().iter().filter(|l| l.prunable).collect();
    let chosen = prunable
        .par_iter()
        .map(|layer| {
            let m = layer_filters(layer, bundle)?;
            Ok((layer.name.clone(), select_exemplars(&m, beta, opts)?.exemplars))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut plan = propagate(arch, &chosen.into_iter().collect())?;
    plan.selection = Some(SelectionInfo {
        beta,
        damping: opts.damping,
        iterations: opts.iterations,
        early_exit: opts.early_exit,
    });
    Ok(plan)
}

/// The plan that keeps everything.
pub fn identity_plan(arch: &ArchitectureGraph) -> PruningPlan {
    propagate(arch, &HashMap::new()).expect("the identity plan always propagates")
}

/// Builds a plan from explicit filter selections for prunable layers.
/// Prunable layers without an entry keep all filters.
pub fn propagate(
    arch: &ArchitectureGraph,
    selections: &HashMap<String, Vec<usize>>,
) -> Result<PruningPlan> {
    for name in selections.keys() {
        match arch.layer(name) {
            Some(l) if l.prunable => {}
            _ => return Err(Error::Plan(format!("`{name}` is not a prunable layer"))),
        }
    }
    let layers = arch.layers();
    let mut out: Vec<LayerPlan> = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        let (baseline_inputs, kept_in) = expected_inputs(arch, k, |p| &out[p].kept_filter_indices);
        let all_out = || (0..layer.output.channels).collect::<Vec<_>>();
        let kept_out = match layer.kind() {
            LayerKind::Conv if layer.prunable => match selections.get(&layer.name) {
                Some(sel) => {
                    check_index_set(sel, layer.output.channels, false)
                        .map_err(|m| Error::Plan(format!("`{}`: {m}", layer.name)))?;
                    sel.clone()
                }
                None => all_out(),
            },
            LayerKind::Add => {
                for &p in &layer.inputs {
                    if out[p].kept_outputs() != layers[p].output.channels {
                        return Err(Error::Plan(format!(
                            "`{}` feeds residual add `{}` but loses channels",
                            layers[p].name, layer.name
                        )));
                    }
                }
                all_out()
            }
            LayerKind::Conv | LayerKind::Fc | LayerKind::Input => all_out(),
            LayerKind::BatchNorm | LayerKind::Pool | LayerKind::Concat | LayerKind::Output => {
                kept_in.clone()
            }
        };
        let pruned_shape = pruned_shape(layer, kept_out.len(), kept_in.len());
        out.push(LayerPlan {
            name: layer.name.clone(),
            kind: layer.kind(),
            prunable: layer.prunable,
            baseline_outputs: layer.output.channels,
            kept_filter_indices: kept_out,
            baseline_inputs,
            kept_input_channel_indices: kept_in,
            pruned_shape,
        });
    }
    let totals = conv_totals(&out);
    Ok(PruningPlan {
        architecture: arch.name().to_string(),
        selection: None,
        layers: out,
        totals,
    })
}

fn conv_totals(layers: &[LayerPlan]) -> ChannelTotals {
    layers
        .iter()
        .filter(|l| l.kind == LayerKind::Conv)
        .fold(ChannelTotals { kept: 0, baseline: 0 }, |acc, l| ChannelTotals {
            kept: acc.kept + l.kept_outputs(),
            baseline: acc.baseline + l.baseline_outputs,
        })
}

/// Input index space and surviving input indices of layer `k`, given each
/// producer's kept outputs.
fn expected_inputs<'a>(
    arch: &ArchitectureGraph,
    k: usize,
    kept_of: impl Fn(usize) -> &'a Vec<usize>,
) -> (usize, Vec<usize>) {
    let layers = arch.layers();
    let layer = &layers[k];
    match layer.kind() {
        LayerKind::Input => (0, Vec::new()),
        LayerKind::Concat => {
            let mut offset = 0;
            let mut kept = Vec::new();
            for &p in &layer.inputs {
                kept.extend(kept_of(p).iter().map(|&c| c + offset));
                offset += layers[p].output.channels;
            }
            (offset, kept)
        }
        LayerKind::Add => {
            let width = layer.output.channels;
            (width, (0..width).collect())
        }
        LayerKind::Fc => {
            let p = layer.inputs[0];
            let area = layers[p].output.area();
            let kept = kept_of(p)
                .iter()
                .flat_map(|&c| (c * area)..((c + 1) * area))
                .collect();
            (layers[p].output.numel(), kept)
        }
        _ => {
            let p = layer.inputs[0];
            (layers[p].output.channels, kept_of(p).clone())
        }
    }
}

fn pruned_shape(layer: &LayerNode, outputs: usize, inputs: usize) -> Vec<usize> {
    match layer.op {
        LayerOp::Conv(p) => vec![outputs, inputs, p.kernel[0], p.kernel[1]],
        LayerOp::Fc(_) => vec![outputs, inputs],
        LayerOp::BatchNorm(_) => vec![outputs],
        _ => vec![outputs, layer.output.height, layer.output.width],
    }
}

/// Sorted, duplicate-free, in `0..bound`, and non-empty unless `allow_empty`.
fn check_index_set(set: &[usize], bound: usize, allow_empty: bool) -> Result<(), String> {
    if set.is_empty() && !allow_empty {
        return Err("keeps no indices".into());
    }
    if let Some(&bad) = set.iter().find(|&&i| i >= bound) {
        return Err(format!("index {bad} is out of range for {bound} channels"));
    }
    if set.windows(2).any(|w| w[0] >= w[1]) {
        return Err("indices are not strictly increasing".into());
    }
    Ok(())
}

/// Lists every broken invariant, at most one per layer. An empty list means
/// the plan is consistent with `arch`.
pub fn validate(plan: &PruningPlan, arch: &ArchitectureGraph) -> Vec<Violation> {
    let mut violations = Vec::new();
    let by_name = plan.by_name();
    let empty = Vec::new();
    let kept_of = |p: usize| -> &Vec<usize> {
        by_name
            .get(arch.layers()[p].name.as_str())
            .map_or(&empty, |l| &l.kept_filter_indices)
    };
    for (k, layer) in arch.layers().iter().enumerate() {
        let Some(lp) = by_name.get(layer.name.as_str()) else {
            violations.push(Violation {
                layer: layer.name.clone(),
                message: "missing from plan".into(),
            });
            continue;
        };
        if let Err(message) = check_layer(arch, k, lp, &kept_of) {
            violations.push(Violation {
                layer: layer.name.clone(),
                message,
            });
        }
    }
    let mut seen = HashMap::new();
    for lp in &plan.layers {
        if arch.layer(&lp.name).is_none() {
            violations.push(Violation {
                layer: lp.name.clone(),
                message: "not a layer of the architecture".into(),
            });
        } else if seen.insert(lp.name.as_str(), ()).is_some() {
            violations.push(Violation {
                layer: lp.name.clone(),
                message: "listed more than once".into(),
            });
        }
    }
    if plan.totals != conv_totals(&plan.layers) {
        violations.push(Violation {
            layer: "<totals>".into(),
            message: format!(
                "totals {:?} disagree with the per-layer counts {:?}",
                plan.totals,
                conv_totals(&plan.layers)
            ),
        });
    }
    violations
}

fn check_layer<'a>(
    arch: &ArchitectureGraph,
    k: usize,
    lp: &LayerPlan,
    kept_of: &impl Fn(usize) -> &'a Vec<usize>,
) -> Result<(), String> {
    let layer = &arch.layers()[k];
    if lp.kind != layer.kind() {
        return Err(format!("kind {} does not match {}", lp.kind, layer.kind()));
    }
    if lp.prunable != layer.prunable {
        return Err("prunable flag does not match the architecture".into());
    }
    if lp.baseline_outputs != layer.output.channels {
        return Err(format!(
            "baseline outputs {} != {}",
            lp.baseline_outputs, layer.output.channels
        ));
    }
    let (baseline_inputs, expected_in) = expected_inputs(arch, k, kept_of);
    if lp.baseline_inputs != baseline_inputs {
        return Err(format!(
            "baseline inputs {} != {baseline_inputs}",
            lp.baseline_inputs
        ));
    }
    check_index_set(&lp.kept_filter_indices, lp.baseline_outputs, false)
        .map_err(|m| format!("kept filters: {m}"))?;
    check_index_set(
        &lp.kept_input_channel_indices,
        lp.baseline_inputs,
        layer.kind() == LayerKind::Input,
    )
    .map_err(|m| format!("kept input channels: {m}"))?;
    match layer.kind() {
        LayerKind::Conv if layer.prunable => {}
        LayerKind::Conv | LayerKind::Fc | LayerKind::Input | LayerKind::Add => {
            if lp.kept_outputs() != lp.baseline_outputs {
                return Err("non-prunable layer drops filters".into());
            }
        }
        _ => {
            if lp.kept_filter_indices != lp.kept_input_channel_indices {
                return Err("pass-through layer changes its channels".into());
            }
        }
    }
    if layer.kind() == LayerKind::Add {
        for &p in &layer.inputs {
            if kept_of(p).len() != arch.layers()[p].output.channels {
                return Err(format!(
                    "input `{}` does not keep all channels",
                    arch.layers()[p].name
                ));
            }
        }
    } else if lp.kept_input_channel_indices != expected_in {
        return Err("kept input channels do not match the producers' kept filters".into());
    }
    let shape = pruned_shape(layer, lp.kept_outputs(), lp.kept_inputs());
    if lp.pruned_shape != shape {
        return Err(format!("pruned shape {:?} != {shape:?}", lp.pruned_shape));
    }
    Ok(())
}
