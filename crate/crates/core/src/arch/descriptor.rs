//! JSON architecture descriptors.
//!
//! ```json
//! {
//!   "name": "toy",
//!   "layers": [
//!     {"name": "input", "kind": "input", "params": {"channels": 3, "height": 8, "width": 8}},
//!     {"name": "conv1", "kind": "conv", "prunable": true, "inputs": ["input"],
//!      "params": {"in_channels": 3, "out_channels": 4, "kernel": 3, "padding": 1, "bias": true}}
//!   ]
//! }
//! ```
//!
//! The full schema lives in `descriptors/schema.json`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{
    ArchitectureGraph, BatchNormParams, ConvParams, FcParams, InputParams, LayerKind, LayerOp,
    LayerSpec, PoolMode, PoolParams,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub layers: Vec<LayerDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub prunable: bool,
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Tensor name prefix in the bundle; defaults to the layer name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
}

/// A kernel/stride/padding value: either one number for both axes or `[h, w]`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
enum Pair {
    Same(usize),
    Each([usize; 2]),
}

impl Pair {
    fn get(self) -> [usize; 2] {
        match self {
            Pair::Same(v) => [v, v],
            Pair::Each(v) => v,
        }
    }
}

fn pair_one() -> Pair {
    Pair::Same(1)
}

fn pair_zero() -> Pair {
    Pair::Same(0)
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConv {
    in_channels: usize,
    out_channels: usize,
    kernel: Pair,
    #[serde(default = "pair_one")]
    stride: Pair,
    #[serde(default = "pair_zero")]
    padding: Pair,
    #[serde(default)]
    bias: bool,
    #[serde(default = "one")]
    groups: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFc {
    in_features: usize,
    out_features: usize,
    #[serde(default)]
    bias: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBatchNorm {
    #[allow(dead_code)]
    channels: Option<usize>,
    #[serde(default = "yes")]
    affine: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPool {
    mode: PoolMode,
    kernel: Option<Pair>,
    stride: Option<Pair>,
    #[serde(default = "pair_zero")]
    padding: Pair,
    #[serde(default)]
    global: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

impl Descriptor {
    /// Parses descriptor text. Syntax and schema errors carry the line reported
    /// by the JSON parser; semantic errors carry the line of the offending
    /// layer's `name`.
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Descriptor {
            line: Some(e.line()),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("descriptor serializes");
        s.push('\n');
        s
    }

    /// Builds and resolves the graph. `text`, when given, is the source the
    /// descriptor was parsed from and is used only to locate errors.
    pub fn build(&self, text: Option<&str>) -> Result<ArchitectureGraph> {
        let locate = |name: &str| text.and_then(|t| find_layer_line(t, name));
        let mut specs = Vec::with_capacity(self.layers.len());
        let mut bn_channels = Vec::new();
        for layer in &self.layers {
            let op = parse_op(layer).map_err(|message| Error::Descriptor {
                line: locate(&layer.name),
                message: format!("layer `{}`: {message}", layer.name),
            })?;
            if layer.kind == LayerKind::BatchNorm {
                if let Some(Value::Number(n)) = layer.params.get("channels") {
                    bn_channels.push((layer.name.clone(), n.as_u64()));
                }
            }
            specs.push(LayerSpec {
                name: layer.name.clone(),
                op,
                prunable: layer.prunable,
                inputs: layer.inputs.clone(),
                weights: layer.weights.clone(),
            });
        }
        let graph = ArchitectureGraph::new(self.name.clone(), specs).map_err(|e| match e {
            Error::Validation { layer, message } => Error::Descriptor {
                line: locate(&layer),
                message: format!("layer `{layer}`: {message}"),
            },
            other => other,
        })?;
        for (name, declared) in bn_channels {
            let actual = graph.layer(&name).expect("built").output.channels;
            if declared != Some(actual as u64) {
                return Err(Error::Descriptor {
                    line: locate(&name),
                    message: format!(
                        "layer `{name}`: channels is {declared:?} but the input carries {actual}"
                    ),
                });
            }
        }
        Ok(graph)
    }

    pub fn from_graph(graph: &ArchitectureGraph) -> Self {
        let layers = graph
            .layers()
            .iter()
            .map(|l| LayerDescriptor {
                name: l.name.clone(),
                kind: l.kind(),
                params: op_params(&l.op, l.output.channels),
                prunable: l.prunable,
                inputs: l.inputs.iter().map(|&i| graph.layers()[i].name.clone()).collect(),
                weights: (l.weights != l.name).then(|| l.weights.clone()),
            })
            .collect();
        Self {
            name: graph.name().to_string(),
            description: None,
            layers,
        }
    }
}

/// Parses and builds in one go.
pub fn parse_graph(text: &str) -> Result<ArchitectureGraph> {
    Descriptor::parse(text)?.build(Some(text))
}

fn from_params<T: for<'de> Deserialize<'de>>(params: &Map<String, Value>) -> Result<T, String> {
    serde_json::from_value(Value::Object(params.clone())).map_err(|e| format!("params: {e}"))
}

fn parse_op(layer: &LayerDescriptor) -> Result<LayerOp, String> {
    let p = &layer.params;
    Ok(match layer.kind {
        LayerKind::Input => {
            let raw: InputParams = from_params(p)?;
            LayerOp::Input(raw)
        }
        LayerKind::Conv => {
            let raw: RawConv = from_params(p)?;
            if raw.groups != 1 {
                return Err("grouped convolutions are not supported".into());
            }
            LayerOp::Conv(ConvParams {
                in_channels: raw.in_channels,
                out_channels: raw.out_channels,
                kernel: raw.kernel.get(),
                stride: raw.stride.get(),
                padding: raw.padding.get(),
                bias: raw.bias,
            })
        }
        LayerKind::Fc => {
            let raw: RawFc = from_params(p)?;
            LayerOp::Fc(FcParams {
                in_features: raw.in_features,
                out_features: raw.out_features,
                bias: raw.bias,
            })
        }
        LayerKind::BatchNorm => {
            // `channels` is checked against the resolved input in `build`.
            let raw: RawBatchNorm = from_params(p)?;
            LayerOp::BatchNorm(BatchNormParams { affine: raw.affine })
        }
        LayerKind::Pool => {
            let raw: RawPool = from_params(p)?;
            let kernel = match (raw.global, raw.kernel) {
                (true, None) => None,
                (true, Some(_)) => return Err("global pooling takes no kernel".into()),
                (false, Some(k)) => Some(k.get()),
                (false, None) => return Err("pool needs a kernel unless global".into()),
            };
            LayerOp::Pool(PoolParams {
                mode: raw.mode,
                kernel,
                stride: raw.stride.map(Pair::get).or(kernel).unwrap_or([1, 1]),
                padding: raw.padding.get(),
            })
        }
        LayerKind::Add | LayerKind::Concat | LayerKind::Output => {
            let _: NoParams = from_params(p)?;
            match layer.kind {
                LayerKind::Add => LayerOp::Add,
                LayerKind::Concat => LayerOp::Concat,
                _ => LayerOp::Output,
            }
        }
    })
}

fn op_params(op: &LayerOp, channels: usize) -> Map<String, Value> {
    let v = match *op {
        LayerOp::Input(p) => json!(p),
        LayerOp::Conv(p) => json!(p),
        LayerOp::Fc(p) => json!(p),
        LayerOp::BatchNorm(p) => json!({"channels": channels, "affine": p.affine}),
        LayerOp::Pool(p) => match p.kernel {
            Some(kernel) => json!({
                "mode": p.mode,
                "kernel": kernel,
                "stride": p.stride,
                "padding": p.padding,
            }),
            None => json!({"mode": p.mode, "global": true}),
        },
        LayerOp::Add | LayerOp::Concat | LayerOp::Output => json!({}),
    };
    match v {
        Value::Object(m) => m,
        _ => unreachable!("params serialize to objects"),
    }
}

/// 1-based line of the `"name": "<name>"` entry for a layer.
fn find_layer_line(text: &str, name: &str) -> Option<usize> {
    let quoted = serde_json::to_string(name).ok()?;
    text.lines().enumerate().find_map(|(i, line)| {
        let at = line.find("\"name\"")?;
        let rest = line[at + 6..].trim_start().strip_prefix(':')?.trim_start();
        rest.starts_with(&quoted).then_some(i + 1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
  "name": "toy",
  "layers": [
    {"name": "input", "kind": "input", "params": {"channels": 3, "height": 8, "width": 8}},
    {"name": "conv1", "kind": "conv", "prunable": true, "inputs": ["input"],
     "params": {"in_channels": 3, "out_channels": 4, "kernel": 3, "padding": 1, "bias": true}},
    {"name": "bn1", "kind": "batchnorm", "inputs": ["conv1"], "params": {"channels": 4}},
    {"name": "pool", "kind": "pool", "inputs": ["bn1"], "params": {"mode": "avg", "global": true}},
    {"name": "fc", "kind": "fc", "inputs": ["pool"], "params": {"in_features": 4, "out_features": 2}},
    {"name": "output", "kind": "output", "inputs": ["fc"]}
  ]
}"#;

    #[test]
    fn parses_toy() {
        let g = parse_graph(TOY).unwrap();
        assert_eq!(g.layers().len(), 6);
        let conv = g.layer("conv1").unwrap();
        assert!(conv.prunable && conv.has_bias());
        assert_eq!(conv.output.height, 8);
        assert_eq!(g.layer("pool").unwrap().output.area(), 1);
    }

    #[test]
    fn round_trips_through_json() {
        let g = parse_graph(TOY).unwrap();
        let text = g.to_descriptor().to_json();
        assert_eq!(parse_graph(&text).unwrap(), g);
    }

    #[test]
    fn syntax_errors_have_lines() {
        let broken = TOY.replace("\"kind\": \"batchnorm\",", "\"kind\": \"batchnorm\"");
        match parse_graph(&broken) {
            Err(Error::Descriptor { line: Some(7), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_has_line() {
        let broken = TOY.replace("\"kind\": \"pool\"", "\"kind\": \"pooling\"");
        assert!(matches!(
            parse_graph(&broken),
            Err(Error::Descriptor { line: Some(8), .. })
        ));
    }

    #[test]
    fn semantic_errors_point_at_layer() {
        let broken = TOY.replace("\"in_features\": 4", "\"in_features\": 5");
        match parse_graph(&broken) {
            Err(Error::Descriptor { line: Some(9), message }) => {
                assert!(message.contains("`fc`"), "{message}")
            }
            other => panic!("unexpected {other:?}"),
        }
        let broken = TOY.replace("\"channels\": 4}", "\"channels\": 5}");
        assert!(matches!(
            parse_graph(&broken),
            Err(Error::Descriptor { line: Some(7), .. })
        ));
    }

    #[test]
    fn bad_params_point_at_layer() {
        let broken = TOY.replace("\"padding\": 1,", "\"padding\": 1, \"dilation\": 2,");
        assert!(matches!(
            parse_graph(&broken),
            Err(Error::Descriptor { line: Some(5), .. })
        ));
        let grouped = TOY.replace("\"padding\": 1,", "\"padding\": 1, \"groups\": 3,");
        assert!(parse_graph(&grouped).is_err());
    }
}
