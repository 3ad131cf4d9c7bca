//! Network topology: layer nodes, channel flow and resolved shapes.
//!
//! An [`ArchitectureGraph`] is an ordered list of layers; every layer may only
//! consume layers listed before it, so the order is a topological order and
//! the graph is acyclic by construction. Shapes (channels and spatial size)
//! are resolved once at construction from the `input` layer's dimensions.

mod builtin;
mod descriptor;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builtin::{builtin, resnet56_cifar, vgg16_cifar, BUILTIN_NAMES};
pub use descriptor::{parse_graph, Descriptor, LayerDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
    BatchNorm,
    Pool,
    Add,
    Concat,
    Input,
    Output,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Pool => "pool",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::Input => "input",
            LayerKind::Output => "output",
        }
    }

    /// Conv and fc layers own a weight matrix with one row per output unit.
    pub fn has_filters(&self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Fc)
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputParams {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcParams {
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub affine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub mode: PoolMode,
    /// `None` means global pooling over the whole input.
    pub kernel: Option<[usize; 2]>,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

/// Kind-specific parameters of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Input(InputParams),
    Conv(ConvParams),
    Fc(FcParams),
    BatchNorm(BatchNormParams),
    Pool(PoolParams),
    /// Residual sum. Narrower inputs are zero-padded and spatially larger ones
    /// subsampled to the smallest input.
    Add,
    /// Channel concatenation in input order.
    Concat,
    Output,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Input(_) => LayerKind::Input,
            LayerOp::Conv(_) => LayerKind::Conv,
            LayerOp::Fc(_) => LayerKind::Fc,
            LayerOp::BatchNorm(_) => LayerKind::BatchNorm,
            LayerOp::Pool(_) => LayerKind::Pool,
            LayerOp::Add => LayerKind::Add,
            LayerOp::Concat => LayerKind::Concat,
            LayerOp::Output => LayerKind::Output,
        }
    }
}

/// Activation shape flowing along an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.channels * self.area()
    }
}

/// A layer with its resolved input and output shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub op: LayerOp,
    pub prunable: bool,
    /// Producers, as indices into [`ArchitectureGraph::layers`].
    pub inputs: Vec<usize>,
    /// Prefix of this layer's tensors in a bundle (`<prefix>.weight`, ...).
    pub weights: String,
    pub output: FeatureShape,
}

impl LayerNode {
    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.weights)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.weights)
    }

    pub fn has_bias(&self) -> bool {
        match self.op {
            LayerOp::Conv(p) => p.bias,
            LayerOp::Fc(p) => p.bias,
            _ => false,
        }
    }

    /// Weight shape as `(out, in, kh, kw)`; fc layers use a `1 x 1` kernel.
    pub fn weight_shape(&self) -> Option<crate::tensor::Shape4> {
        use crate::tensor::Shape4;
        match self.op {
            LayerOp::Conv(p) => Some(Shape4::new(
                p.out_channels,
                p.in_channels,
                p.kernel[0],
                p.kernel[1],
            )),
            LayerOp::Fc(p) => Some(Shape4::new(p.out_features, p.in_features, 1, 1)),
            _ => None,
        }
    }
}

/// Layer nodes in topological order plus the channel-flow edges between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureGraph {
    name: String,
    layers: Vec<LayerNode>,
    consumers: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

/// A layer before shape resolution, referring to producers by name.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    pub prunable: bool,
    pub inputs: Vec<String>,
    pub weights: Option<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, op: LayerOp, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            op,
            prunable: false,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weights: None,
        }
    }

    pub fn prunable(mut self, prunable: bool) -> Self {
        self.prunable = prunable;
        self
    }
}

fn spatial_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// A prunable conv whose channels flow into layer `k` unchanged, looking
/// back through batchnorm, pool, concat and output layers.
fn prunable_source(layers: &[LayerNode], k: usize) -> Option<usize> {
    let layer = &layers[k];
    match layer.kind() {
        LayerKind::Conv if layer.prunable => Some(k),
        LayerKind::BatchNorm | LayerKind::Pool | LayerKind::Concat | LayerKind::Output => {
            layer.inputs.iter().find_map(|&p| prunable_source(layers, p))
        }
        _ => None,
    }
}

impl ArchitectureGraph {
    /// Resolves shapes and checks the channel flow. The error for a bad layer
    /// is [`Error::Validation`] naming it.
    pub fn new(name: impl Into<String>, specs: Vec<LayerSpec>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut layers: Vec<LayerNode> = Vec::with_capacity(specs.len());
        for spec in specs {
            let fail = |message: String| Error::Validation {
                layer: spec.name.clone(),
                message,
            };
            if index.contains_key(&spec.name) {
                return Err(fail("duplicate layer name".into()));
            }
            let mut inputs = Vec::with_capacity(spec.inputs.len());
            for producer in &spec.inputs {
                match index.get(producer) {
                    Some(&i) => inputs.push(i),
                    None => {
                        return Err(fail(format!(
                            "input `{producer}` is not a layer defined earlier"
                        )))
                    }
                }
            }
            let kind = spec.op.kind();
            if spec.prunable && kind != LayerKind::Conv {
                return Err(fail(format!("only conv layers can be prunable, not {kind}")));
            }
            let arity_ok = match kind {
                LayerKind::Input => inputs.is_empty(),
                LayerKind::Add => inputs.len() >= 2,
                LayerKind::Concat => !inputs.is_empty(),
                _ => inputs.len() == 1,
            };
            if !arity_ok {
                return Err(fail(format!(
                    "{kind} layer cannot take {} input(s)",
                    inputs.len()
                )));
            }
            if kind == LayerKind::Add {
                if let Some(conv) = inputs.iter().find_map(|&i| prunable_source(&layers, i)) {
                    return Err(fail(format!(
                        "prunable conv `{}` reaches this residual add, which needs all its channels",
                        layers[conv].name
                    )));
                }
            }
            let shapes: Vec<FeatureShape> = inputs.iter().map(|&i: &usize| layers[i].output).collect();
            let output = resolve_output(&spec.op, &shapes).map_err(fail)?;
            let weights = spec.weights.clone().unwrap_or_else(|| spec.name.clone());
            index.insert(spec.name.clone(), layers.len());
            layers.push(LayerNode {
                name: spec.name,
                op: spec.op,
                prunable: spec.prunable,
                inputs,
                weights,
                output,
            });
        }
        if !layers.iter().any(|l| l.kind() == LayerKind::Input) {
            return Err(Error::Descriptor {
                line: None,
                message: "architecture has no input layer".into(),
            });
        }
        let mut consumers = vec![Vec::new(); layers.len()];
        for (k, layer) in layers.iter().enumerate() {
            for &p in &layer.inputs {
                consumers[p].push(k);
            }
        }
        Ok(Self {
            name: name.into(),
            layers,
            consumers,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerNode> {
        self.index.get(name).map(|&i| &self.layers[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Layers consuming the output of layer `k`.
    pub fn consumers(&self, k: usize) -> &[usize] {
        &self.consumers[k]
    }

    /// Input activation shape of layer `k`. Concat inputs are stacked; for
    /// add the widest input is reported.
    pub fn input_shape(&self, k: usize) -> Option<FeatureShape> {
        let layer = &self.layers[k];
        let mut shapes = layer.inputs.iter().map(|&i| self.layers[i].output);
        let first = shapes.next()?;
        Some(match layer.kind() {
            LayerKind::Concat => shapes.fold(first, |acc, s| FeatureShape {
                channels: acc.channels + s.channels,
                ..acc
            }),
            LayerKind::Add => shapes.fold(first, |acc, s| if s.channels > acc.channels { s } else { acc }),
            _ => first,
        })
    }

    pub fn to_descriptor(&self) -> Descriptor {
        Descriptor::from_graph(self)
    }
}

fn resolve_output(op: &LayerOp, inputs: &[FeatureShape]) -> Result<FeatureShape, String> {
    let first = inputs.first().copied();
    let shape = match *op {
        LayerOp::Input(p) => {
            if p.channels == 0 || p.height == 0 || p.width == 0 {
                return Err("input dimensions must be positive".into());
            }
            FeatureShape {
                channels: p.channels,
                height: p.height,
                width: p.width,
            }
        }
        LayerOp::Conv(p) => {
            let x = first.expect("arity checked");
            if p.in_channels != x.channels {
                return Err(format!(
                    "in_channels is {} but the input carries {} channels",
                    p.in_channels, x.channels
                ));
            }
            if p.out_channels == 0 {
                return Err("out_channels must be positive".into());
            }
            let h = spatial_out(x.height, p.kernel[0], p.stride[0], p.padding[0]);
            let w = spatial_out(x.width, p.kernel[1], p.stride[1], p.padding[1]);
            let (Some(height), Some(width)) = (h, w) else {
                return Err(format!(
                    "kernel {:?} does not fit a {}x{} input",
                    p.kernel, x.height, x.width
                ));
            };
            FeatureShape {
                channels: p.out_channels,
                height,
                width,
            }
        }
        LayerOp::Fc(p) => {
            let x = first.expect("arity checked");
            if p.in_features != x.numel() {
                return Err(format!(
                    "in_features is {} but the input flattens to {} ({}x{}x{})",
                    p.in_features,
                    x.numel(),
                    x.channels,
                    x.height,
                    x.width
                ));
            }
            if p.out_features == 0 {
                return Err("out_features must be positive".into());
            }
            FeatureShape {
                channels: p.out_features,
                height: 1,
                width: 1,
            }
        }
        LayerOp::BatchNorm(_) | LayerOp::Output => first.expect("arity checked"),
        LayerOp::Pool(p) => {
            let x = first.expect("arity checked");
            let Some(kernel) = p.kernel else {
                return Ok(FeatureShape {
                    channels: x.channels,
                    height: 1,
                    width: 1,
                });
            };
            let h = spatial_out(x.height, kernel[0], p.stride[0], p.padding[0]);
            let w = spatial_out(x.width, kernel[1], p.stride[1], p.padding[1]);
            let (Some(height), Some(width)) = (h, w) else {
                return Err(format!(
                    "pool window {kernel:?} does not fit a {}x{} input",
                    x.height, x.width
                ));
            };
            FeatureShape {
                channels: x.channels,
                height,
                width,
            }
        }
        LayerOp::Add => {
            let channels = inputs.iter().map(|s| s.channels).max().expect("arity checked");
            let height = inputs.iter().map(|s| s.height).min().expect("arity checked");
            let width = inputs.iter().map(|s| s.width).min().expect("arity checked");
            for s in inputs {
                if s.height % height != 0 || s.width % width != 0 {
                    return Err(format!(
                        "cannot subsample a {}x{} input to {height}x{width}",
                        s.height, s.width
                    ));
                }
            }
            FeatureShape {
                channels,
                height,
                width,
            }
        }
        LayerOp::Concat => {
            let x = first.expect("arity checked");
            if inputs.iter().any(|s| s.height != x.height || s.width != x.width) {
                return Err("concat inputs must share spatial dimensions".into());
            }
            FeatureShape {
                channels: inputs.iter().map(|s| s.channels).sum(),
                ..x
            }
        }
    };
    Ok(shape)
}
