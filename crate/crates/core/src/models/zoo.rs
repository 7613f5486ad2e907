//! Built-in architectures. All end in a global pool, so any input side large
//! enough for the strides is accepted.

use kiop_tape::Tensor;
use rand_distr::{Distribution, Normal};

use super::network::{BatchNorm, Conv, Dense, GlobalPool, Layer, Network, Stage};
use crate::error::{KiopError, Result};
use crate::seed::{self, Rng};

/// He-normal conv kernel.
fn conv(rng: &mut Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Layer {
    let std = (2.0 / (cin * k * k) as f32).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let weight = Tensor::from_fn([cout, cin, k, k], |_| normal.sample(rng));
    Layer::Conv(Conv { weight, bias: None, stride, pad })
}

fn dense(rng: &mut Rng, d: usize, classes: usize) -> Dense {
    let bound = 1.0 / (d as f32).sqrt();
    let weight = Tensor::from_fn([classes, d], |_| rand::Rng::random_range(rng, -bound..bound));
    Dense { weight, bias: Tensor::zeros([classes]) }
}

fn bn(c: usize) -> Layer {
    Layer::BatchNorm(BatchNorm::new(c))
}

/// Two 5×5 stride-2 conv-BN-ReLU blocks with a 2×2 max pool between them,
/// then global max pooling.
pub fn toy_cnn(classes: usize, widths: [usize; 2], seed: u64) -> Network {
    let mut rng = seed::rng(seed, &[seed::stream::INIT]);
    let [c1, c2] = widths;
    let pool = Layer::MaxPool { k: 2, stride: 2, pad: 0 };
    let stages = vec![
        Stage { name: "block1".into(), layers: vec![conv(&mut rng, 3, c1, 5, 2, 2), bn(c1), Layer::Relu, pool] },
        Stage { name: "block2".into(), layers: vec![conv(&mut rng, c1, c2, 5, 2, 2), bn(c2), Layer::Relu] },
    ];
    Network { arch: "toy_cnn".into(), input_channels: 3, stages, pool: GlobalPool::Max, head: dense(&mut rng, c2, classes) }
}

fn basic_block(rng: &mut Rng, cin: usize, cout: usize, stride: usize) -> Layer {
    let body = vec![conv(rng, cin, cout, 3, stride, 1), bn(cout), Layer::Relu, conv(rng, cout, cout, 3, 1, 1), bn(cout)];
    let shortcut = if stride != 1 || cin != cout { vec![conv(rng, cin, cout, 1, stride, 0), bn(cout)] } else { vec![] };
    Layer::Residual { body, shortcut }
}

fn bottleneck(rng: &mut Rng, cin: usize, mid: usize, stride: usize) -> Layer {
    let cout = mid * 4;
    let body = vec![
        conv(rng, cin, mid, 1, 1, 0),
        bn(mid),
        Layer::Relu,
        conv(rng, mid, mid, 3, stride, 1),
        bn(mid),
        Layer::Relu,
        conv(rng, mid, cout, 1, 1, 0),
        bn(cout),
    ];
    let shortcut = if stride != 1 || cin != cout { vec![conv(rng, cin, cout, 1, stride, 0), bn(cout)] } else { vec![] };
    Layer::Residual { body, shortcut }
}

/// CIFAR-style ResNet (3×3 stem, no stem pooling).
fn resnet(arch: &str, classes: usize, blocks: [usize; 4], bottlenecked: bool, seed: u64) -> Network {
    let mut rng = seed::rng(seed, &[seed::stream::INIT]);
    let mut stages =
        vec![Stage { name: "stem".into(), layers: vec![conv(&mut rng, 3, 64, 3, 1, 1), bn(64), Layer::Relu] }];
    let mut cin = 64;
    for (i, (&n, width)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
        let mut layers = Vec::with_capacity(n);
        for b in 0..n {
            let stride = if b == 0 && i > 0 { 2 } else { 1 };
            if bottlenecked {
                layers.push(bottleneck(&mut rng, cin, width, stride));
                cin = width * 4;
            } else {
                layers.push(basic_block(&mut rng, cin, width, stride));
                cin = width;
            }
        }
        stages.push(Stage { name: format!("layer{}", i + 1), layers });
    }
    let head = dense(&mut rng, cin, classes);
    Network { arch: arch.into(), input_channels: 3, stages, pool: GlobalPool::Avg, head }
}

pub fn resnet18(classes: usize, seed: u64) -> Network {
    resnet("resnet18", classes, [2, 2, 2, 2], false, seed)
}

pub fn resnet50(classes: usize, seed: u64) -> Network {
    resnet("resnet50", classes, [3, 4, 6, 3], true, seed)
}

/// VGG-13 with batch norm; the classifier is reduced to a single linear layer
/// over pooled features.
pub fn vgg13_bn(classes: usize, seed: u64) -> Network {
    let mut rng = seed::rng(seed, &[seed::stream::INIT]);
    let cfg: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 2), (512, 2), (512, 2)];
    let mut stages = Vec::new();
    let mut cin = 3;
    for (i, &(width, reps)) in cfg.iter().enumerate() {
        let mut layers = Vec::new();
        for _ in 0..reps {
            layers.push(conv(&mut rng, cin, width, 3, 1, 1));
            layers.push(bn(width));
            layers.push(Layer::Relu);
            cin = width;
        }
        if i + 1 < cfg.len() {
            layers.push(Layer::MaxPool { k: 2, stride: 2, pad: 0 });
        }
        stages.push(Stage { name: format!("block{}", i + 1), layers });
    }
    let head = dense(&mut rng, cin, classes);
    Network { arch: "vgg13_bn".into(), input_channels: 3, stages, pool: GlobalPool::Avg, head }
}

pub const TOY_WIDTHS: [usize; 2] = [16, 32];

/// Builds an architecture by name.
pub fn build(arch: &str, classes: usize, seed: u64) -> Result<Network> {
    match arch {
        "toy_cnn" => Ok(toy_cnn(classes, TOY_WIDTHS, seed)),
        "resnet18" => Ok(resnet18(classes, seed)),
        "resnet50" => Ok(resnet50(classes, seed)),
        "vgg13_bn" => Ok(vgg13_bn(classes, seed)),
        other => Err(KiopError::UnsupportedModel(format!("unknown architecture {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet18_parameter_count() {
        assert_eq!(resnet18(10, 0).param_count(), 11_173_962);
    }

    #[test]
    fn toy_net_accepts_prompted_sides() {
        let net = toy_cnn(10, TOY_WIDTHS, 1);
        for side in [32, 36, 128, 224] {
            let x = Tensor::zeros([2, 3, side, side]);
            assert_eq!(net.logits(&x).unwrap().shape(), &[2, 10]);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(toy_cnn(10, TOY_WIDTHS, 4), toy_cnn(10, TOY_WIDTHS, 4));
        assert_ne!(toy_cnn(10, TOY_WIDTHS, 4), toy_cnn(10, TOY_WIDTHS, 5));
    }
}
