//! Vanilla data-free distillation into an unfrozen copy of model A, and the
//! head snapshot used to measure what that copy forgot.

use std::time::Instant;

use kiop_tape::{Adam, AdamConfig, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{KiopError, Result};
use crate::losses::kl_sim;
use crate::models::{digest, Dense, ForwardOptions, FrozenModel, Network};
use crate::pretrain::cosine_lr;
use crate::seed::{self, stream};
use crate::storing::IterMetrics;
use crate::synthesis::{SynthesisConfig, Synthesizer};

/// The student's final linear layer as it was before training.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSnapshot {
    pub weight: Tensor,
    pub bias: Tensor,
    pub class_count: usize,
}

impl HeadSnapshot {
    pub fn capture(net: &Network) -> Self {
        Self { weight: net.head.weight.clone(), bias: net.head.bias.clone(), class_count: net.class_count() }
    }
}

/// Puts `snap` back as the final layer; every other weight is left as is.
pub fn restore_head(student: &mut Network, snap: &HeadSnapshot) -> Result<()> {
    let expected = [snap.class_count, student.feature_dim()];
    if snap.weight.shape() != expected || snap.bias.shape() != [snap.class_count] {
        return Err(KiopError::SnapshotMismatch(format!(
            "snapshot head {:?}/{:?} does not fit a {}-feature student with {} classes",
            snap.weight.shape(),
            snap.bias.shape(),
            student.feature_dim(),
            snap.class_count
        )));
    }
    student.head = Dense { weight: snap.weight.clone(), bias: snap.bias.clone() };
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VanillaConfig {
    pub iterations: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VanillaConfig {
    fn default() -> Self {
        Self { iterations: 500, lr: 1e-3, batch_size: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaMetrics {
    #[serde(flatten)]
    pub base: IterMetrics,
    pub student_digest: String,
}

pub struct VanillaOutcome {
    pub student: Network,
    pub snapshot: HeadSnapshot,
    pub metrics: Vec<VanillaMetrics>,
}

/// Distills `teacher` into `student` (a deep copy of model A) on synthetic
/// data, updating every student weight. A head of the teacher's width
/// replaces the original one when the class counts differ.
pub fn vanilla_dfkd(
    mut student: Network,
    teacher: &FrozenModel,
    cfg: &VanillaConfig,
    synthesis: &SynthesisConfig,
    mut on_step: impl FnMut(&VanillaMetrics) -> Result<()>,
) -> Result<VanillaOutcome> {
    if cfg.iterations == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(KiopError::Config("vanilla iterations, batch_size and lr must be positive".into()));
    }
    let snapshot = HeadSnapshot::capture(&student);
    if student.class_count() != teacher.class_count() {
        let d = student.feature_dim();
        let bound = 1.0 / (d as f32).sqrt();
        let mut rng = seed::rng(cfg.seed, &[stream::INIT]);
        let weight = Tensor::from_fn([teacher.class_count(), d], |_| rand::Rng::random_range(&mut rng, -bound..bound));
        student.head = Dense { weight, bias: Tensor::zeros([teacher.class_count()]) };
    }
    let mut synth = Synthesizer::new(synthesis.clone(), teacher, student.input_channels, teacher.native_side(), seed::derive(synthesis.seed, &[1]))?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let start = Instant::now();
        synth.round(teacher, &student)?;
        let mut rng = seed::rng(cfg.seed, &[stream::STORING, iter as u64]);
        let (x, _) = synth.bank.sample(cfg.batch_size, &mut rng)?;
        let lr = cosine_lr(cfg.lr, iter, cfg.iterations);
        let reference = teacher.logits(&x)?;
        let loss = {
            let g = Graph::new();
            let out = student.forward(&g, g.constant(x), ForwardOptions::train())?;
            let loss = kl_sim(g.constant(reference), out.logits)?;
            let grads = g.backward(loss)?;
            let gs: Vec<Option<&Tensor>> = out.params.iter().map(|&p| grads.get(p)).collect();
            let bn_inputs: Vec<Tensor> = out.bn_inputs.iter().map(|v| v.to_tensor()).collect();
            adam.step(&mut student.params_mut(), &gs, lr)?;
            student.commit_bn_stats(&bn_inputs)?;
            loss.item()
        };
        if !loss.is_finite() {
            return Err(KiopError::SynthesisDiverged { round: iter, detail: format!("distillation loss {loss}") });
        }
        let m = VanillaMetrics {
            base: IterMetrics {
                iter,
                loss_a: None,
                loss_b: Some(loss),
                loss_b_parts: vec![loss],
                loss_total: loss,
                bank_sizes: vec![0, synth.bank.len()],
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            },
            student_digest: digest(&student),
        };
        on_step(&m)?;
        metrics.push(m);
    }
    Ok(VanillaOutcome { student, snapshot, metrics })
}
