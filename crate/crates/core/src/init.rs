//! Initial weights for the pruned network.
//!
//! Four strategies are supported:
//!
//! * [`InitStrategy::Exemplar`] (default): keep the exemplar filters and drop
//!   the input channels whose producers were pruned;
//! * [`InitStrategy::RandomProjection`]: keep the exemplar filters but map each
//!   one to the smaller input dimension with a sparse random projection;
//! * [`InitStrategy::L1Norm`]: keep as many filters per layer as the plan does,
//!   but choose the ones with the largest l1 norm (bias included), and rewire
//!   input channels by that same choice in the producer;
//! * [`InitStrategy::RandomGaussian`]: fresh fan-in scaled Gaussian weights,
//!   zero biases and default batchnorm state.
//!
//! Stochastic strategies are seeded per layer: layer `k` of the architecture
//! draws from ChaCha8 stream `k` of the user seed, so the output is fixed by
//! the seed alone.

use std::collections::HashMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureGraph, LayerKind, LayerNode};
use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::plan::{check_bundle, layer_filters, propagate, validate, LayerPlan, PruningPlan};
use crate::tensor::{flatten, FilterMatrix, Shape4, WeightTensor4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Exemplar,
    RandomProjection,
    L1Norm,
    RandomGaussian,
}

impl InitStrategy {
    /// Short name used on the command line.
    pub fn as_str(&self) -> &'static str {
        match self {
            InitStrategy::Exemplar => "exemplar",
            InitStrategy::RandomProjection => "proj",
            InitStrategy::L1Norm => "l1",
            InitStrategy::RandomGaussian => "random",
        }
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "exemplar" => InitStrategy::Exemplar,
            "proj" | "random_projection" => InitStrategy::RandomProjection,
            "l1" | "l1_norm" => InitStrategy::L1Norm,
            "random" | "random_gaussian" => InitStrategy::RandomGaussian,
            other => {
                return Err(Error::Parameter(format!(
                    "unknown init strategy `{other}` (exemplar, proj, l1, random)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InitConfig {
    pub strategy: InitStrategy,
    pub seed: u64,
    /// Sparsity `s` of the random projection: entries are non-zero with
    /// probability `1 / s`. Defaults to `sqrt(source dimension)`.
    pub projection_density: Option<f64>,
}

/// Pruned weights (and bias) of one conv or fc layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedLayer {
    pub weight: WeightTensor4D,
    pub bias: Option<Vec<f64>>,
}

fn layer_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_indices(layer: &LayerPlan, shape: Shape4) -> Result<()> {
    let bad_out = layer.kept_filter_indices.iter().find(|&&i| i >= shape.c_out);
    let bad_in = layer.kept_input_channel_indices.iter().find(|&&i| i >= shape.c_in);
    if let Some(i) = bad_out.or(bad_in) {
        return Err(Error::Plan(format!(
            "`{}`: index {i} does not fit weight shape {:?}",
            layer.name,
            shape.dims()
        )));
    }
    Ok(())
}

/// Copies the given filters, keeping only `kept_inputs` of each one's input
/// channels.
fn slice(
    w: &WeightTensor4D,
    bias: Option<&[f64]>,
    filters: &[usize],
    kept_inputs: &[usize],
) -> Result<PrunedLayer> {
    let shape = w.shape();
    let out_shape = Shape4::new(filters.len(), kept_inputs.len(), shape.h, shape.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for &f in filters {
        for &c in kept_inputs {
            data.extend_from_slice(w.kernel(f, c));
        }
    }
    Ok(PrunedLayer {
        weight: WeightTensor4D::new(w.name(), out_shape, data)?,
        bias: bias.map(|b| filters.iter().map(|&f| b[f]).collect()),
    })
}

/// Keeps the exemplar filters and removes pruned input channels from them.
pub fn init_exemplar(
    w: &WeightTensor4D,
    bias: Option<&[f64]>,
    layer: &LayerPlan,
) -> Result<PrunedLayer> {
    check_indices(layer, w.shape())?;
    slice(
        w,
        bias,
        &layer.kept_filter_indices,
        &layer.kept_input_channel_indices,
    )
}

/// Very sparse random projection from `source` to `target` dimensions.
///
/// Entries are `+sqrt(s / target)` and `-sqrt(s / target)` with probability
/// `1 / (2s)` each and zero otherwise, so squared norms are preserved in
/// expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRandomProjection {
    source: usize,
    target: usize,
    /// Non-zero entries per source dimension: `(target column, value)`.
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRandomProjection {
    pub fn new(source: usize, target: usize, density: Option<f64>, rng: &mut impl Rng) -> Result<Self> {
        if source == 0 || target == 0 {
            return Err(Error::dim("projection dimensions must be positive"));
        }
        let s = density.unwrap_or((source as f64).sqrt());
        if !(s >= 1.0 && s.is_finite()) {
            return Err(Error::Parameter(format!("projection density must be >= 1, got {s}")));
        }
        let value = (s / target as f64).sqrt();
        let half = 1.0 / (2.0 * s);
        let rows = (0..source)
            .map(|_| {
                (0..target)
                    .filter_map(|col| {
                        let u: f64 = rng.random();
                        if u < half {
                            Some((col, value))
                        } else if u < 2.0 * half {
                            Some((col, -value))
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            source,
            target,
            rows,
        })
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// `x * R` for a row vector `x` of length `source`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.source, "projection input has the wrong length");
        let mut out = vec![0.0; self.target];
        for (xi, row) in x.iter().zip(&self.rows) {
            for &(col, v) in row {
                out[col] += xi * v;
            }
        }
        out
    }
}

/// Projects each exemplar filter (bias included) onto the pruned input
/// dimension. Falls back to [`init_exemplar`] when no input channel was
/// removed, since there is nothing to project.
pub fn init_random_projection(
    w: &WeightTensor4D,
    bias: Option<&[f64]>,
    layer: &LayerPlan,
    seed: u64,
    density: Option<f64>,
) -> Result<PrunedLayer> {
    let shape = w.shape();
    check_indices(layer, shape)?;
    let m = flatten(w, bias)?;
    let extra = usize::from(m.has_bias());
    let target = layer.kept_inputs() * shape.kernel_area() + extra;
    if target >= m.cols() {
        return init_exemplar(w, bias, layer);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = SparseRandomProjection::new(m.cols(), target, density, &mut rng)?;
    let data = layer
        .kept_filter_indices
        .iter()
        .flat_map(|&f| proj.project(m.row(f)))
        .collect();
    let out = FilterMatrix::from_rows(layer.kept_outputs(), target, data, m.has_bias())?;
    let (weight, bias) = out.unflatten(
        w.name(),
        Shape4::new(layer.kept_outputs(), layer.kept_inputs(), shape.h, shape.w),
    )?;
    Ok(PrunedLayer { weight, bias })
}

/// Indices of the `keep` rows with the largest l1 norm, lowest index first on
/// ties, returned in ascending order.
pub fn l1_select(m: &FilterMatrix, keep: usize) -> Vec<usize> {
    let norms: Vec<f64> = m.iter_rows().map(|r| r.iter().map(|v| v.abs()).sum()).collect();
    let mut order: Vec<usize> = (0..m.rows()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Keeps the `layer.kept_outputs()` filters with the largest l1 norm and the
/// input channels listed in `layer`.
pub fn init_l1(w: &WeightTensor4D, bias: Option<&[f64]>, layer: &LayerPlan) -> Result<PrunedLayer> {
    check_indices(layer, w.shape())?;
    let filters = l1_select(&flatten(w, bias)?, layer.kept_outputs());
    slice(w, bias, &filters, &layer.kept_input_channel_indices)
}

/// Fresh weights of the pruned shape drawn from `N(0, 2 / fan_in)` with
/// `fan_in = kept inputs * kh * kw`; biases are zero.
pub fn init_random(
    name: &str,
    layer: &LayerPlan,
    kernel: [usize; 2],
    has_bias: bool,
    seed: u64,
) -> Result<PrunedLayer> {
    let shape = Shape4::new(layer.kept_outputs(), layer.kept_inputs(), kernel[0], kernel[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = WeightTensor4D::new(name, shape, gaussian(shape, &mut rng))?;
    Ok(PrunedLayer {
        weight,
        bias: has_bias.then(|| vec![0.0; shape.c_out]),
    })
}

fn gaussian(shape: Shape4, rng: &mut impl Rng) -> Vec<f64> {
    let std = (2.0 / shape.filter_len() as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite positive std");
    (0..shape.numel()).map(|_| normal.sample(rng)).collect()
}

/// Replaces each prunable layer's kept filters by the same number of filters
/// chosen by l1 norm, then re-propagates channels.
pub fn l1_plan(
    arch: &ArchitectureGraph,
    bundle: &ModelBundle,
    plan: &PruningPlan,
) -> Result<PruningPlan> {
    let mut selections = HashMap::new();
    for layer in arch.layers().iter().filter(|l| l.prunable) {
        let keep = plan
            .layer(&layer.name)
            .ok_or_else(|| Error::Plan(format!("`{}` is missing from the plan", layer.name)))?
            .kept_outputs();
        let m = layer_filters(layer, bundle)?;
        selections.insert(layer.name.clone(), l1_select(&m, keep));
    }
    let mut out = propagate(arch, &selections)?;
    out.selection = plan.selection;
    Ok(out)
}

/// A pruned bundle together with the plan that was actually applied (which
/// differs from the input plan for the l1 strategy).
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub bundle: ModelBundle,
    pub plan: PruningPlan,
}

enum Role {
    Weight(usize),
    Bias(usize),
    Norm { layer: usize, reset: f32 },
}

/// Produces the pruned bundle. Tensors keep their names and order; conv and
/// fc weights keep their rank. Tensors not owned by any layer are copied.
pub fn prune_bundle(
    arch: &ArchitectureGraph,
    bundle: &ModelBundle,
    plan: &PruningPlan,
    cfg: &InitConfig,
) -> Result<PrunedModel> {
    if let Some(v) = validate(plan, arch).first() {
        return Err(Error::Plan(format!("plan does not fit `{}`: {v}", arch.name())));
    }
    check_bundle(arch, bundle)?;
    let plan = match cfg.strategy {
        InitStrategy::L1Norm => l1_plan(arch, bundle, plan)?,
        _ => plan.clone(),
    };
    let layer_plans: Vec<&LayerPlan> = arch
        .layers()
        .iter()
        .map(|l| plan.layer(&l.name).expect("validated"))
        .collect();

    let weighted: Vec<usize> = (0..arch.layers().len())
        .filter(|&k| arch.layers()[k].kind().has_filters())
        .collect();
    let pruned: HashMap<usize, PrunedLayer> = weighted
        .par_iter()
        .map(|&k| {
            let out = init_layer(&arch.layers()[k], layer_plans[k], bundle, cfg, k as u64)?;
            Ok((k, out))
        })
        .collect::<Result<_>>()?;

    let mut roles = HashMap::new();
    for (k, layer) in arch.layers().iter().enumerate() {
        match layer.kind() {
            LayerKind::Conv | LayerKind::Fc => {
                roles.insert(layer.weight_name(), Role::Weight(k));
                if layer.has_bias() {
                    roles.insert(layer.bias_name(), Role::Bias(k));
                }
            }
            LayerKind::BatchNorm => {
                for (suffix, reset) in [
                    ("weight", 1.0),
                    ("bias", 0.0),
                    ("running_mean", 0.0),
                    ("running_var", 1.0),
                ] {
                    roles.insert(format!("{}.{suffix}", layer.weights), Role::Norm { layer: k, reset });
                }
            }
            _ => {}
        }
    }

    let random = cfg.strategy == InitStrategy::RandomGaussian;
    let mut out = ModelBundle::new();
    for (key, value) in bundle.metadata() {
        out.set_metadata(key.clone(), value.clone());
    }
    out.set_metadata("pruned.init", cfg.strategy.as_str());
    out.set_metadata("pruned.seed", cfg.seed.to_string());
    for t in bundle.tensors() {
        let (shape, data) = match roles.get(&t.name) {
            Some(Role::Weight(k)) => {
                let p = &pruned[k];
                let dims = p.weight.shape().dims();
                let shape = if t.shape.len() == 2 { dims[..2].to_vec() } else { dims.to_vec() };
                (shape, to_f32(p.weight.data()))
            }
            Some(Role::Bias(k)) => {
                let bias = pruned[k].bias.as_deref().expect("biased layer");
                (vec![bias.len()], to_f32(bias))
            }
            Some(Role::Norm { layer, reset }) => {
                let kept = &layer_plans[*layer].kept_filter_indices;
                let data = if random {
                    vec![*reset; kept.len()]
                } else {
                    kept.iter().map(|&c| t.data[c]).collect()
                };
                (vec![kept.len()], data)
            }
            None => (t.shape.clone(), t.data.clone()),
        };
        out.insert(t.name.clone(), shape, data)?;
    }
    Ok(PrunedModel { bundle: out, plan })
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn init_layer(
    layer: &LayerNode,
    lp: &LayerPlan,
    bundle: &ModelBundle,
    cfg: &InitConfig,
    stream: u64,
) -> Result<PrunedLayer> {
    let shape = layer.weight_shape().expect("conv or fc");
    let w = bundle.weight4(&layer.weight_name(), shape)?;
    let bias = if layer.has_bias() {
        Some(bundle.vector(&layer.bias_name(), shape.c_out)?)
    } else {
        None
    };
    let bias = bias.as_deref();
    match cfg.strategy {
        // The l1 choice is already baked into the re-propagated plan.
        InitStrategy::Exemplar | InitStrategy::L1Norm => init_exemplar(&w, bias, lp),
        InitStrategy::RandomProjection => {
            check_indices(lp, shape)?;
            let seed = layer_rng(cfg.seed, stream).random();
            init_random_projection(&w, bias, lp, seed, cfg.projection_density)
        }
        InitStrategy::RandomGaussian => {
            let seed = layer_rng(cfg.seed, stream).random();
            init_random(w.name(), lp, [shape.h, shape.w], bias.is_some(), seed)
        }
    }
}
