//! Test support shared by the integration tests and the acceptance suite.
//!
//! `oracle` is a deliberately naive transcription of exemplar selection: every
//! max and sum is recomputed from scratch with plain loops, nothing is shared
//! with the library's fast path.
#![allow(dead_code)]

use std::collections::HashMap;

use epruner::arch::{
    ArchitectureGraph, BatchNormParams, ConvParams, FcParams, InputParams, LayerKind, LayerOp,
    LayerSpec, PoolMode, PoolParams,
};
use epruner::bundle::ModelBundle;
use epruner::tensor::FilterMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod oracle {
    /// Final messages and the extracted assignment.
    pub struct Outcome {
        pub r: Vec<Vec<f64>>,
        pub a: Vec<Vec<f64>>,
        pub exemplars: Vec<usize>,
        pub exemplar_of: Vec<usize>,
    }

    pub fn median(values: &[f64]) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    }

    /// Negative squared distances off the diagonal, `beta * median(w_i)` on it.
    pub fn similarity(rows: &[Vec<f64>], beta: f64) -> Vec<Vec<f64>> {
        let n = rows.len();
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    s[i][i] = beta * median(&rows[i]);
                } else {
                    let mut d = 0.0;
                    for k in 0..rows[i].len() {
                        let diff = rows[i][k] - rows[j][k];
                        d += diff * diff;
                    }
                    s[i][j] = -d;
                }
            }
        }
        s
    }

    fn first_argmax(values: &[(usize, f64)]) -> usize {
        let mut best = values[0];
        for &(j, v) in &values[1..] {
            if v > best.1 {
                best = (j, v);
            }
        }
        best.0
    }

    pub fn run(s: &[Vec<f64>], damping: f64, iterations: usize) -> Outcome {
        let n = s.len();
        let mut r = vec![vec![0.0; n]; n];
        let mut a = vec![vec![0.0; n]; n];
        if n == 1 {
            return Outcome {
                r,
                a,
                exemplars: vec![0],
                exemplar_of: vec![0],
            };
        }
        for _ in 0..iterations {
            let mut raw_r = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let mut m = f64::NEG_INFINITY;
                    if i == j {
                        for k in 0..n {
                            if k != i {
                                m = m.max(s[i][k]);
                            }
                        }
                    } else {
                        for k in 0..n {
                            if k != j {
                                m = m.max(a[i][k] + s[i][k]);
                            }
                        }
                    }
                    raw_r[i][j] = s[i][j] - m;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    r[i][j] = damping * r[i][j] + (1.0 - damping) * raw_r[i][j];
                }
            }
            let mut raw_a = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let mut sum = 0.0;
                    for k in 0..n {
                        if k != i && k != j {
                            sum += r[k][j].max(0.0);
                        }
                    }
                    raw_a[i][j] = if i == j { sum } else { (r[j][j] + sum).min(0.0) };
                }
            }
            for i in 0..n {
                for j in 0..n {
                    a[i][j] = damping * a[i][j] + (1.0 - damping) * raw_a[i][j];
                }
            }
        }
        let choice: Vec<usize> = (0..n)
            .map(|i| {
                let scores: Vec<(usize, f64)> = (0..n).map(|j| (j, r[i][j] + a[i][j])).collect();
                first_argmax(&scores)
            })
            .collect();
        let mut exemplars: Vec<usize> = (0..n).filter(|&i| choice[i] == i).collect();
        if exemplars.is_empty() {
            let scores: Vec<(usize, f64)> = (0..n).map(|i| (i, r[i][i] + a[i][i])).collect();
            exemplars.push(first_argmax(&scores));
        }
        let exemplar_of = (0..n)
            .map(|i| {
                if exemplars.contains(&i) {
                    i
                } else if exemplars.contains(&choice[i]) {
                    choice[i]
                } else {
                    let scores: Vec<(usize, f64)> =
                        exemplars.iter().map(|&e| (e, r[i][e] + a[i][e])).collect();
                    first_argmax(&scores)
                }
            })
            .collect();
        Outcome {
            r,
            a,
            exemplars,
            exemplar_of,
        }
    }
}

/// A random layer of `n` filters with `d` weights each. Each filter gets its
/// own offset so per-filter medians take both signs.
pub fn random_filters(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let offset = rng.random_range(-0.6..0.6);
            (0..d).map(|_| offset + rng.random_range(-1.0..1.0)).collect()
        })
        .collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> FilterMatrix {
    let cols = rows[0].len();
    FilterMatrix::from_rows(rows.len(), cols, rows.concat(), false).unwrap()
}

fn conv(i: usize, o: usize, k: usize, bias: bool) -> LayerOp {
    LayerOp::Conv(ConvParams {
        in_channels: i,
        out_channels: o,
        kernel: [k, k],
        stride: [1, 1],
        padding: [k / 2, k / 2],
        bias,
    })
}

/// A random small CNN mixing plain chains, batchnorm, pooling, two-branch
/// concats and residual adds, ending in an fc head.
pub fn random_arch(rng: &mut impl Rng, tag: usize) -> ArchitectureGraph {
    let side = [4, 8][rng.random_range(0..2)];
    let mut width = rng.random_range(1..5);
    let mut specs = vec![LayerSpec::new(
        "input",
        LayerOp::Input(InputParams {
            channels: width,
            height: side,
            width: side,
        }),
        &[],
    )];
    let mut last = "input".to_string();
    let mut area = side * side;
    let blocks = rng.random_range(1..5);
    for b in 0..blocks {
        let name = |s: &str| format!("b{b}.{s}");
        match rng.random_range(0..4) {
            0 | 1 => {
                let out = rng.random_range(1..9);
                let k = [1, 3][rng.random_range(0..2)];
                let c = name("conv");
                specs.push(
                    LayerSpec::new(&c, conv(width, out, k, rng.random()), &[last.as_str()])
                        .prunable(rng.random_range(0..5) > 0),
                );
                last = c;
                width = out;
                if rng.random() {
                    let n = name("bn");
                    specs.push(LayerSpec::new(
                        &n,
                        LayerOp::BatchNorm(BatchNormParams { affine: true }),
                        &[last.as_str()],
                    ));
                    last = n;
                }
                if area > 4 && rng.random_range(0..3) == 0 {
                    let p = name("pool");
                    specs.push(LayerSpec::new(
                        &p,
                        LayerOp::Pool(PoolParams {
                            mode: PoolMode::Max,
                            kernel: Some([2, 2]),
                            stride: [2, 2],
                            padding: [0, 0],
                        }),
                        &[last.as_str()],
                    ));
                    last = p;
                    area /= 4;
                }
            }
            2 => {
                let (l, r) = (rng.random_range(1..6), rng.random_range(1..6));
                let (bl, br, cat) = (name("left"), name("right"), name("cat"));
                specs.push(LayerSpec::new(&bl, conv(width, l, 1, false), &[last.as_str()]).prunable(true));
                specs.push(LayerSpec::new(&br, conv(width, r, 3, true), &[last.as_str()]).prunable(rng.random()));
                specs.push(LayerSpec::new(&cat, LayerOp::Concat, &[bl.as_str(), br.as_str()]));
                last = cat;
                width = l + r;
            }
            _ => {
                // The skip path must keep all channels, so nothing feeding
                // it may be pruned.
                unprune_sources(&mut specs, &last);
                let mid = rng.random_range(1..7);
                let (c1, c2, add) = (name("conv1"), name("conv2"), name("add"));
                specs.push(LayerSpec::new(&c1, conv(width, mid, 3, false), &[last.as_str()]).prunable(true));
                specs.push(LayerSpec::new(&c2, conv(mid, width, 3, false), &[c1.as_str()]));
                specs.push(LayerSpec::new(&add, LayerOp::Add, &[c2.as_str(), last.as_str()]));
                last = add;
            }
        }
    }
    let classes = rng.random_range(1..4);
    specs.push(LayerSpec::new(
        "fc",
        LayerOp::Fc(FcParams {
            in_features: width * area,
            out_features: classes,
            bias: true,
        }),
        &[last.as_str()],
    ));
    specs.push(LayerSpec::new("output", LayerOp::Output, &["fc"]));
    ArchitectureGraph::new(format!("random-{tag}"), specs).unwrap()
}

fn unprune_sources(specs: &mut [LayerSpec], name: &str) {
    let Some(k) = specs.iter().position(|s| s.name == name) else {
        return;
    };
    match specs[k].op.kind() {
        LayerKind::Conv => specs[k].prunable = false,
        LayerKind::BatchNorm | LayerKind::Pool | LayerKind::Concat => {
            for input in specs[k].inputs.clone() {
                unprune_sources(specs, &input);
            }
        }
        _ => {}
    }
}

/// Random weights for every conv, fc and batchnorm layer.
pub fn random_bundle(arch: &ArchitectureGraph, rng: &mut impl Rng) -> ModelBundle {
    let mut bundle = ModelBundle::new();
    let mut fill = |name: String, shape: Vec<usize>, rng: &mut dyn rand::RngCore| {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        bundle.insert(name, shape, data).unwrap();
    };
    for layer in arch.layers() {
        match layer.kind() {
            LayerKind::Conv | LayerKind::Fc => {
                let s = layer.weight_shape().unwrap();
                let shape = if layer.kind() == LayerKind::Fc {
                    vec![s.c_out, s.c_in]
                } else {
                    s.dims().to_vec()
                };
                fill(layer.weight_name(), shape, rng);
                if layer.has_bias() {
                    fill(layer.bias_name(), vec![s.c_out], rng);
                }
            }
            LayerKind::BatchNorm => {
                for suffix in ["weight", "bias", "running_mean", "running_var"] {
                    fill(format!("{}.{suffix}", layer.weights), vec![layer.output.channels], rng);
                }
            }
            _ => {}
        }
    }
    bundle
}

/// A random non-empty sorted subset of filters for every prunable layer.
pub fn random_selection(arch: &ArchitectureGraph, rng: &mut impl Rng) -> HashMap<String, Vec<usize>> {
    arch.layers()
        .iter()
        .filter(|l| l.prunable)
        .map(|l| {
            let c = l.output.channels;
            let keep = rng.random_range(1..=c);
            let mut idx: Vec<usize> = (0..c).collect();
            idx.shuffle(rng);
            idx.truncate(keep);
            idx.sort_unstable();
            (l.name.clone(), idx)
        })
        .collect()
}

/// Recomputes the channel flow of `plan` from scratch, layer by layer, and
/// lists every disagreement. Shares no code with the library's validator.
pub fn independent_check(arch: &ArchitectureGraph, plan: &epruner::plan::PruningPlan) -> Vec<String> {
    let mut problems = Vec::new();
    let mut kept: HashMap<&str, Vec<usize>> = HashMap::new();
    if plan.layers.len() != arch.layers().len() {
        problems.push(format!("{} layers in plan, {} in arch", plan.layers.len(), arch.layers().len()));
        return problems;
    }
    for (layer, lp) in arch.layers().iter().zip(&plan.layers) {
        if layer.name != lp.name {
            problems.push(format!("layer order: {} vs {}", layer.name, lp.name));
            return problems;
        }
        let producers: Vec<&epruner::arch::LayerNode> =
            layer.inputs.iter().map(|&i| &arch.layers()[i]).collect();
        // Expected input indices.
        let mut want_in = Vec::new();
        let mut offset = 0;
        for p in &producers {
            let pk = &kept[p.name.as_str()];
            match layer.kind() {
                LayerKind::Fc => {
                    let area = p.output.height * p.output.width;
                    for &c in pk {
                        want_in.extend(c * area..(c + 1) * area);
                    }
                }
                LayerKind::Add => {}
                _ => want_in.extend(pk.iter().map(|c| c + offset)),
            }
            offset += p.output.channels;
        }
        if layer.kind() == LayerKind::Add {
            want_in = (0..layer.output.channels).collect();
            for p in &producers {
                if kept[p.name.as_str()].len() != p.output.channels {
                    problems.push(format!("{}: residual input {} was pruned", layer.name, p.name));
                }
            }
        }
        if lp.kept_input_channel_indices != want_in {
            problems.push(format!("{}: input indices", layer.name));
        }
        let full: Vec<usize> = (0..layer.output.channels).collect();
        let want_out = match layer.kind() {
            LayerKind::Conv if layer.prunable => {
                let k = &lp.kept_filter_indices;
                let ok = !k.is_empty()
                    && k.windows(2).all(|w| w[0] < w[1])
                    && k.iter().all(|&i| i < layer.output.channels);
                if !ok {
                    problems.push(format!("{}: bad filter selection", layer.name));
                }
                k.clone()
            }
            LayerKind::Conv | LayerKind::Fc | LayerKind::Input | LayerKind::Add => full,
            _ => want_in.clone(),
        };
        if lp.kept_filter_indices != want_out {
            problems.push(format!("{}: output indices", layer.name));
        }
        let (o, i) = (want_out.len(), want_in.len());
        let want_shape = match layer.op {
            epruner::arch::LayerOp::Conv(p) => vec![o, i, p.kernel[0], p.kernel[1]],
            epruner::arch::LayerOp::Fc(_) => vec![o, i],
            epruner::arch::LayerOp::BatchNorm(_) => vec![o],
            _ => vec![o, layer.output.height, layer.output.width],
        };
        if lp.pruned_shape != want_shape {
            problems.push(format!("{}: pruned shape", layer.name));
        }
        kept.insert(layer.name.as_str(), want_out);
    }
    let conv: Vec<_> = plan.layers.iter().filter(|l| l.kind == LayerKind::Conv).collect();
    let kept_total: usize = conv.iter().map(|l| l.kept_filter_indices.len()).sum();
    let base_total: usize = conv.iter().map(|l| l.baseline_outputs).sum();
    if (plan.totals.kept, plan.totals.baseline) != (kept_total, base_total) {
        problems.push("totals".into());
    }
    problems
}

/// Changes exactly one index (or shape entry) somewhere in the plan.
pub fn corrupt_one(plan: &epruner::plan::PruningPlan, rng: &mut impl Rng) -> epruner::plan::PruningPlan {
    let mut out = plan.clone();
    loop {
        let k = rng.random_range(0..out.layers.len());
        let lp = &mut out.layers[k];
        let bound = lp.baseline_outputs.max(lp.baseline_inputs) + 2;
        let list = match rng.random_range(0..3) {
            0 => &mut lp.kept_filter_indices,
            1 => &mut lp.kept_input_channel_indices,
            _ => &mut lp.pruned_shape,
        };
        if list.is_empty() {
            continue;
        }
        let pos = rng.random_range(0..list.len());
        let old = list[pos];
        let mut new = old;
        while new == old {
            new = rng.random_range(0..bound);
        }
        list[pos] = new;
        return out;
    }
}

/// Like [`random_bundle`], but every conv layer's filters form tight
/// clusters around centers with negative medians, so selection merges each
/// cluster into roughly one exemplar.
pub fn clustered_bundle(arch: &ArchitectureGraph, rng: &mut impl Rng) -> ModelBundle {
    let base = random_bundle(arch, rng);
    let mut out = ModelBundle::new();
    for t in base.tensors() {
        let conv = arch
            .layers()
            .iter()
            .find(|l| l.kind() == LayerKind::Conv && l.weight_name() == t.name);
        let data = match conv {
            Some(layer) => {
                let s = layer.weight_shape().unwrap();
                let d = s.filter_len();
                let clusters = (s.c_out / 4).max(1);
                let centers: Vec<Vec<f32>> = (0..clusters)
                    .map(|_| (0..d).map(|_| -1.0 + rng.random_range(-0.3f32..0.3)).collect())
                    .collect();
                let noise = 0.1 / (d as f32).sqrt();
                (0..s.c_out)
                    .flat_map(|_| {
                        let c = &centers[rng.random_range(0..clusters)];
                        c.iter().map(|v| v + rng.random_range(-noise..noise)).collect::<Vec<_>>()
                    })
                    .collect()
            }
            None => t.data.clone(),
        };
        out.insert(t.name.clone(), t.shape.clone(), data).unwrap();
    }
    out
}
