//! Built-in CIFAR-10 topologies.

use super::{
    ArchitectureGraph, BatchNormParams, ConvParams, FcParams, InputParams, LayerOp, LayerSpec,
    PoolMode, PoolParams,
};

pub const BUILTIN_NAMES: &[&str] = &["vgg16-cifar", "resnet56-cifar"];

/// Looks up a built-in topology by name.
pub fn builtin(name: &str) -> Option<ArchitectureGraph> {
    match name {
        "vgg16-cifar" => Some(vgg16_cifar()),
        "resnet56-cifar" => Some(resnet56_cifar()),
        _ => None,
    }
}

fn cifar_input() -> LayerSpec {
    LayerSpec::new(
        "input",
        LayerOp::Input(InputParams {
            channels: 3,
            height: 32,
            width: 32,
        }),
        &[],
    )
}

fn conv3x3(cin: usize, cout: usize, stride: usize, bias: bool) -> LayerOp {
    LayerOp::Conv(ConvParams {
        in_channels: cin,
        out_channels: cout,
        kernel: [3, 3],
        stride: [stride, stride],
        padding: [1, 1],
        bias,
    })
}

fn bn() -> LayerOp {
    LayerOp::BatchNorm(BatchNormParams { affine: true })
}

fn pool(mode: PoolMode, kernel: Option<usize>) -> LayerOp {
    LayerOp::Pool(PoolParams {
        mode,
        kernel: kernel.map(|k| [k, k]),
        stride: kernel.map_or([1, 1], |k| [k, k]),
        padding: [0, 0],
    })
}

/// VGG-16 for 32x32 inputs: 13 biased 3x3 convs each followed by batchnorm,
/// max pooling between stages, a final 2x2 average pool and a single
/// 512 -> 10 classifier. Every conv is prunable.
pub fn vgg16_cifar() -> ArchitectureGraph {
    const CFG: &[Option<usize>] = &[
        Some(64),
        Some(64),
        None,
        Some(128),
        Some(128),
        None,
        Some(256),
        Some(256),
        Some(256),
        None,
        Some(512),
        Some(512),
        Some(512),
        None,
        Some(512),
        Some(512),
        Some(512),
    ];
    let mut layers = vec![cifar_input()];
    let mut prev = "input".to_string();
    let mut cin = 3;
    let (mut conv_idx, mut pool_idx) = (0, 0);
    for entry in CFG {
        match *entry {
            Some(cout) => {
                let conv = format!("features.conv{conv_idx}");
                let norm = format!("features.norm{conv_idx}");
                layers.push(LayerSpec::new(&conv, conv3x3(cin, cout, 1, true), &[&prev]).prunable(true));
                layers.push(LayerSpec::new(&norm, bn(), &[&conv]));
                prev = norm;
                cin = cout;
                conv_idx += 1;
            }
            None => {
                let name = format!("features.pool{pool_idx}");
                layers.push(LayerSpec::new(&name, pool(PoolMode::Max, Some(2)), &[&prev]));
                prev = name;
                pool_idx += 1;
            }
        }
    }
    layers.push(LayerSpec::new("avgpool", pool(PoolMode::Avg, Some(2)), &[&prev]));
    layers.push(LayerSpec::new(
        "classifier",
        LayerOp::Fc(FcParams {
            in_features: 512,
            out_features: 10,
            bias: true,
        }),
        &["avgpool"],
    ));
    layers.push(LayerSpec::new("output", LayerOp::Output, &["classifier"]));
    ArchitectureGraph::new("vgg16-cifar", layers).expect("built-in VGG-16 is well formed")
}

/// ResNet-56 for 32x32 inputs: a 16-channel stem and three stages of nine
/// basic blocks (16, 32, 64 channels). Downsampling shortcuts subsample and
/// zero-pad instead of using projection convs. Only the first conv of each
/// block is prunable; the stem is not.
pub fn resnet56_cifar() -> ArchitectureGraph {
    let mut layers = vec![
        cifar_input(),
        LayerSpec::new("conv1", conv3x3(3, 16, 1, false), &["input"]),
        LayerSpec::new("bn1", bn(), &["conv1"]),
    ];
    let mut prev = "bn1".to_string();
    let mut cin = 16;
    for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
        for block in 0..9 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let p = format!("layer{}.{block}", stage + 1);
            let (c1, b1, c2, b2, add) = (
                format!("{p}.conv1"),
                format!("{p}.bn1"),
                format!("{p}.conv2"),
                format!("{p}.bn2"),
                format!("{p}.add"),
            );
            layers.push(LayerSpec::new(&c1, conv3x3(cin, width, stride, false), &[&prev]).prunable(true));
            layers.push(LayerSpec::new(&b1, bn(), &[&c1]));
            layers.push(LayerSpec::new(&c2, conv3x3(width, width, 1, false), &[&b1]));
            layers.push(LayerSpec::new(&b2, bn(), &[&c2]));
            layers.push(LayerSpec::new(&add, LayerOp::Add, &[&b2, &prev]));
            prev = add;
            cin = width;
        }
    }
    layers.push(LayerSpec::new("avgpool", pool(PoolMode::Avg, None), &[&prev]));
    layers.push(LayerSpec::new(
        "fc",
        LayerOp::Fc(FcParams {
            in_features: 64,
            out_features: 10,
            bias: true,
        }),
        &["avgpool"],
    ));
    layers.push(LayerSpec::new("output", LayerOp::Output, &["fc"]));
    ArchitectureGraph::new("resnet56-cifar", layers).expect("built-in ResNet-56 is well formed")
}
