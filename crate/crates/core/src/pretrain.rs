//! Supervised training of source classifiers for toy experiments.

use kiop_tape::{Adam, AdamConfig, Graph};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{KiopError, Result};
use crate::models::{ForwardOptions, Network};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 64, lr: 3e-3, seed: 0 }
    }
}

/// Cosine schedule from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total <= 1 {
        return base;
    }
    let t = step as f32 / total as f32;
    0.5 * base * (1.0 + (std::f32::consts::PI * t).cos())
}

/// Cross-entropy training with batch-statistics BN; returns the mean loss of
/// the final epoch.
pub fn fit(net: &mut Network, split: &Split, cfg: &PretrainConfig) -> Result<f32> {
    if split.is_empty() {
        return Err(KiopError::EmptyDataset);
    }
    let mut adam = Adam::new(AdamConfig::default());
    let per_epoch = split.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut last = 0.0;
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(cfg.seed, &[seed::stream::DATA, epoch as u64]);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (i, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = split.batch(idx)?;
            let g = Graph::new();
            let out = net.forward(&g, g.constant(x), ForwardOptions::train())?;
            let loss = out.logits.log_softmax()?.pick(&y)?.mean_all().neg();
            sum += loss.item();
            let grads = g.backward(loss)?;
            let bn_inputs: Vec<_> = out.bn_inputs.iter().map(|v| v.to_tensor()).collect();
            let gs: Vec<_> = out.params.iter().map(|&p| grads.get(p)).collect();
            let lr = cosine_lr(cfg.lr, epoch * per_epoch + i, total);
            adam.step(&mut net.params_mut(), &gs, lr)?;
            net.commit_bn_stats(&bn_inputs)?;
        }
        last = sum / per_epoch as f32;
    }
    Ok(last)
}
