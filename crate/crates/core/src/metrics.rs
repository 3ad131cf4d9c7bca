//! Channel, FLOP and parameter counts.
//!
//! FLOPs count one per multiply-accumulate. Per layer:
//!
//! | layer     | FLOPs                                              | parameters                 |
//! |-----------|----------------------------------------------------|----------------------------|
//! | conv      | `o * i * kh * kw * H * W` (+ `o * H * W` if bias)  | `o * i * kh * kw` (+ `o`)  |
//! | fc        | `i * o` (+ `o` if bias)                            | `i * o` (+ `o`)            |
//! | batchnorm | `2 * c * H * W`                                    | `2 * c` if affine          |
//! | pool      | `kh * kw * c * H * W` (window per output)          | 0                          |
//! | add       | `(inputs - 1) * c * H * W`                         | 0                          |
//!
//! `H x W` is the layer's output size; for global pooling the window is the
//! whole input. Batchnorm running statistics are not parameters. Channels are
//! the sum of conv output channels.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureGraph, LayerKind, LayerOp};
use crate::error::{Error, Result};
use crate::plan::{validate, PruningPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Complexity {
    pub channels: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningRates {
    pub channels: f64,
    pub flops: f64,
    pub params: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerComplexity {
    pub name: String,
    pub kind: LayerKind,
    pub channels: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub architecture: String,
    pub channels: u64,
    pub flops: u64,
    pub params: u64,
    /// Unpruned counts; present when the report describes a plan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Complexity>,
    /// `1 - pruned / baseline` per metric; present with `baseline`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruning_rate: Option<PruningRates>,
    pub layers: Vec<LayerComplexity>,
}

impl ComplexityReport {
    pub fn totals(&self) -> Complexity {
        Complexity {
            channels: self.channels,
            flops: self.flops,
            params: self.params,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned text table: one row per conv/fc layer, then totals.
    pub fn to_table(&self) -> String {
        let rows: Vec<&LayerComplexity> = self
            .layers
            .iter()
            .filter(|l| l.kind.has_filters())
            .collect();
        let width = rows
            .iter()
            .map(|l| l.name.len())
            .chain(["layer".len(), "total".len()])
            .max()
            .unwrap_or(5);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>14}  {:>12}\n",
            "layer", "channels", "FLOPs", "params"
        );
        for l in rows {
            out += &format!(
                "{:<width$}  {:>8}  {:>14}  {:>12}\n",
                l.name, l.channels, l.flops, l.params
            );
        }
        out += &format!("{}\n", "-".repeat(width + 40));
        out += &format!(
            "{:<width$}  {:>8}  {:>13.2}M  {:>11.2}M\n",
            "total",
            self.channels,
            self.flops as f64 / 1e6,
            self.params as f64 / 1e6
        );
        if let (Some(base), Some(rate)) = (self.baseline, self.pruning_rate) {
            out += &format!(
                "{:<width$}  {:>8}  {:>13.2}M  {:>11.2}M\n",
                "baseline",
                base.channels,
                base.flops as f64 / 1e6,
                base.params as f64 / 1e6
            );
            out += &format!(
                "{:<width$}  {:>7.2}%  {:>13.2}%  {:>11.2}%\n",
                "pruned",
                rate.channels * 100.0,
                rate.flops * 100.0,
                rate.params * 100.0
            );
        }
        out
    }
}

fn rate(pruned: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - pruned as f64 / baseline as f64
    }
}

/// Counts the architecture as is, or as pruned by `plan`.
pub fn count(arch: &ArchitectureGraph, plan: Option<&PruningPlan>) -> Result<ComplexityReport> {
    let baseline_layers = count_layers(arch, None);
    let (layers, baseline) = match plan {
        None => (baseline_layers, None),
        Some(plan) => {
            let violations = validate(plan, arch);
            if let Some(v) = violations.first() {
                return Err(Error::Plan(format!(
                    "plan does not fit `{}` ({} violations, first: {v})",
                    arch.name(),
                    violations.len()
                )));
            }
            (count_layers(arch, Some(plan)), Some(sum(&baseline_layers)))
        }
    };
    let totals = sum(&layers);
    let pruning_rate = baseline.map(|b| PruningRates {
        channels: rate(totals.channels, b.channels),
        flops: rate(totals.flops, b.flops),
        params: rate(totals.params, b.params),
    });
    Ok(ComplexityReport {
        architecture: arch.name().to_string(),
        channels: totals.channels,
        flops: totals.flops,
        params: totals.params,
        baseline,
        pruning_rate,
        layers,
    })
}

fn sum(layers: &[LayerComplexity]) -> Complexity {
    layers.iter().fold(Complexity::default(), |acc, l| Complexity {
        channels: acc.channels + l.channels,
        flops: acc.flops + l.flops,
        params: acc.params + l.params,
    })
}

fn count_layers(arch: &ArchitectureGraph, plan: Option<&PruningPlan>) -> Vec<LayerComplexity> {
    arch.layers()
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let lp = plan.and_then(|p| p.layer(&layer.name));
            let outs = lp.map_or(layer.output.channels, |l| l.kept_outputs()) as u64;
            let ins = match lp {
                Some(l) => l.kept_inputs(),
                None => arch.input_shape(k).map_or(0, |s| match layer.kind() {
                    LayerKind::Fc => s.numel(),
                    _ => s.channels,
                }),
            } as u64;
            let area = layer.output.area() as u64;
            let (mut channels, mut flops, mut params) = (0, 0, 0);
            match layer.op {
                LayerOp::Conv(p) => {
                    let window = (p.kernel[0] * p.kernel[1]) as u64;
                    channels = outs;
                    flops = outs * ins * window * area;
                    params = outs * ins * window;
                    if p.bias {
                        flops += outs * area;
                        params += outs;
                    }
                }
                LayerOp::Fc(p) => {
                    flops = outs * ins;
                    params = outs * ins;
                    if p.bias {
                        flops += outs;
                        params += outs;
                    }
                }
                LayerOp::BatchNorm(p) => {
                    flops = 2 * outs * area;
                    if p.affine {
                        params = 2 * outs;
                    }
                }
                LayerOp::Pool(p) => {
                    let window = match p.kernel {
                        Some(k) => (k[0] * k[1]) as u64,
                        None => arch.input_shape(k).map_or(1, |s| s.area() as u64),
                    };
                    flops = window * outs * area;
                }
                LayerOp::Add => {
                    flops = (layer.inputs.len() as u64 - 1) * outs * area;
                }
                LayerOp::Concat | LayerOp::Input(_) | LayerOp::Output => {}
            }
            LayerComplexity {
                name: layer.name.clone(),
                kind: layer.kind(),
                channels,
                flops,
                params,
            }
        })
        .collect()
}
