//! The synthesize system: per-round inversion with a freshly initialized
//! generator, an augmenter, a contrastive projection head, and a data bank
//! holding each round's best batch.

mod augment;
mod bank;
mod discriminator;
mod generator;

use kiop_tape::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use augment::AugmentConfig;
pub use bank::{BankBatch, DataBank};
pub use discriminator::Discriminator;
pub use generator::Generator;

use crate::error::{KiopError, Result};
use crate::fusion::Chain;
use crate::losses::{contrastive_loss, inversion_loss, InversionWeights};
use crate::models::{tensors_digest, FrozenModel, ForwardOptions, Network};
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Weight of the BN-statistics term.
    pub omega: f32,
    /// Weight of the class-prior term.
    pub upsilon: f32,
    /// Weight of the adversarial term.
    pub mu_adv: f32,
    pub lambda_cr: f32,
    pub lambda_inv: f32,
    /// Contrastive temperature.
    pub tau: f32,
    /// Optimization steps per round.
    pub steps: usize,
    pub batch_size: usize,
    pub z_dim: usize,
    pub lr_generator: f32,
    pub lr_latent: f32,
    pub lr_discriminator: f32,
    pub generator_width: usize,
    /// Generator outputs lie in `[-output_scale, output_scale]`.
    pub output_scale: f32,
    pub discriminator_hidden: usize,
    pub embedding_dim: usize,
    /// Cap on bank negatives drawn per step.
    pub negatives_cap: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            upsilon: 0.5,
            mu_adv: 0.5,
            lambda_cr: 0.8,
            lambda_inv: 1.0,
            tau: 0.2,
            steps: 20,
            batch_size: 64,
            z_dim: 128,
            lr_generator: 1e-3,
            lr_latent: 1e-2,
            lr_discriminator: 1e-3,
            generator_width: 128,
            output_scale: 2.0,
            discriminator_hidden: 256,
            embedding_dim: 128,
            negatives_cap: 64,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.omega, self.upsilon, self.mu_adv, self.lambda_cr, self.lambda_inv];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(KiopError::Config(format!("synthesis weights must be finite and >= 0, got {weights:?}")));
        }
        if !(self.tau > 0.0) {
            return Err(KiopError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.z_dim == 0 {
            return Err(KiopError::Config("steps, batch_size and z_dim must be >= 1".into()));
        }
        let a = &self.augment;
        if !(0.0 < a.min_scale && a.min_scale <= a.max_scale && a.max_scale <= 1.0) {
            return Err(KiopError::Config(format!("augment scale range {}..{} invalid", a.min_scale, a.max_scale)));
        }
        if !(0.0 < a.min_ratio && a.min_ratio <= a.max_ratio) || !(0.0..=1.0).contains(&a.flip_p) {
            return Err(KiopError::Config("augment ratio or flip probability invalid".into()));
        }
        Ok(())
    }

    fn weights(&self) -> InversionWeights {
        InversionWeights { bn: self.omega, prior: self.upsilon, adversarial: self.mu_adv }
    }
}

/// What the adversarial term compares the teacher against.
pub trait StudentChain {
    /// Logits on `x`, as wide as the teacher's class count.
    fn student_logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>>;
}

impl StudentChain for Chain<'_> {
    fn student_logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        self.forward(g, x)
    }
}

impl StudentChain for Network {
    fn student_logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward(g, x, ForwardOptions::eval())?.logits)
    }
}

/// Losses of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f32,
    pub inversion: f32,
    pub contrastive: f32,
    pub bn: f32,
    pub prior: f32,
    pub adversarial: f32,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: usize,
    /// Committed images and the targets they were optimized for.
    pub images: Tensor,
    pub targets: Vec<usize>,
    /// Total loss of the committed snapshot.
    pub loss: f32,
    pub best_step: usize,
    pub trace: Vec<StepLoss>,
    /// Digest of the generator weights the round started from.
    pub generator_digest: String,
    pub reseeded: bool,
}

/// Synthesis state of one (teacher, student) pair.
pub struct Synthesizer {
    pub cfg: SynthesisConfig,
    /// Base of every per-round stream of this pair.
    pub seed: u64,
    pub side: usize,
    pub channels: usize,
    pub classes: usize,
    pub disc: Discriminator,
    pub bank: DataBank,
    rounds: usize,
}

impl Synthesizer {
    /// Images are synthesized at `side`, normally the teacher's native side.
    pub fn new(cfg: SynthesisConfig, teacher: &FrozenModel, channels: usize, side: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let disc = Discriminator::init(teacher.net().feature_dim(), cfg.discriminator_hidden, cfg.embedding_dim, seed);
        Ok(Self { cfg, seed, side, channels, classes: teacher.class_count(), disc, bank: DataBank::new(), rounds: 0 })
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    fn attempt_base(&self, round: usize, attempt: usize) -> u64 {
        match attempt {
            0 => self.seed,
            _ => seed::derive(self.seed, &[stream::RETRY, round as u64, attempt as u64]),
        }
    }

    /// The generator round `round` starts from.
    pub fn seeded_generator(&self, round: usize, attempt: usize) -> Result<Generator> {
        let base = self.attempt_base(round, attempt);
        let c = &self.cfg;
        Generator::init(c.z_dim, self.side, self.channels, c.generator_width, c.output_scale, seed::derive(base, &[stream::GENERATOR, round as u64]))
    }

    /// Latents and targets round `round` starts from.
    pub fn seeded_latents(&self, round: usize, attempt: usize) -> (Tensor, Vec<usize>) {
        let base = self.attempt_base(round, attempt);
        let mut zr = seed::rng(base, &[stream::LATENT, round as u64]);
        let z = Tensor::from_fn([self.cfg.batch_size, self.cfg.z_dim], |_| StandardNormal.sample(&mut zr));
        let mut tr = seed::rng(base, &[stream::TARGETS, round as u64]);
        let targets = (0..self.cfg.batch_size).map(|_| tr.random_range(0..self.classes)).collect();
        (z, targets)
    }

    /// Runs one round and commits its best batch to the bank. A non-finite
    /// loss aborts the round and reruns it once from re-derived seeds.
    pub fn round(&mut self, teacher: &FrozenModel, student: &dyn StudentChain) -> Result<RoundReport> {
        let k = self.rounds;
        let disc_start = self.disc.clone();
        let report = match self.attempt(teacher, student, k, 0) {
            Err(KiopError::SynthesisDiverged { .. }) => {
                self.disc = disc_start;
                let mut r = self.attempt(teacher, student, k, 1)?;
                r.reseeded = true;
                r
            }
            other => other?,
        };
        self.bank.append(report.images.clone(), report.targets.clone(), k)?;
        self.rounds += 1;
        Ok(report)
    }

    fn attempt(&mut self, teacher: &FrozenModel, student: &dyn StudentChain, k: usize, attempt: usize) -> Result<RoundReport> {
        let cfg = self.cfg.clone();
        let mut generator = self.seeded_generator(k, attempt)?;
        let generator_digest = tensors_digest(&generator.params);
        let (mut z, targets) = self.seeded_latents(k, attempt);
        let base = self.attempt_base(k, attempt);
        let mut aug_rng = seed::rng(base, &[stream::AUGMENT, k as u64]);
        let mut bank_rng = seed::rng(base, &[stream::BANK, k as u64]);
        let (mut opt_g, mut opt_z, mut opt_d) = (Adam::new(adam()), Adam::new(adam()), Adam::new(adam()));
        let stats = teacher.bn_stats();
        let mut trace = Vec::with_capacity(cfg.steps);
        let mut best: Option<(f32, usize, Tensor)> = None;

        for step in 0..cfg.steps {
            let g = Graph::new();
            let gp = generator.bind(&g);
            let zv = g.param(z.clone());
            let dp = self.disc.bind(&g);
            let x = generator.forward(&gp, zv)?;
            let t_out = teacher.forward(&g, x)?;
            let student_logits = if cfg.mu_adv > 0.0 { student.student_logits(&g, x)? } else { t_out.logits };
            let inv = inversion_loss(&t_out.bn_inputs, &stats, t_out.logits, student_logits, &targets, cfg.weights())?;
            let contrastive = if cfg.lambda_cr > 0.0 {
                let anchors = Discriminator::embed(&dp, t_out.features)?;
                let x_aug = cfg.augment.apply(x, &mut aug_rng)?;
                let positives = Discriminator::embed(&dp, teacher.forward(&g, x_aug)?.features)?;
                let negatives = if self.bank.is_empty() {
                    None
                } else {
                    let nb = self.bank.random_batch(cfg.negatives_cap, &mut bank_rng)?;
                    Some(Discriminator::embed(&dp, teacher.forward(&g, g.constant(nb))?.features)?)
                };
                contrastive_loss(anchors, positives, negatives, cfg.tau)?
            } else {
                g.constant(Tensor::scalar(0.0))
            };
            let total = contrastive.scale(cfg.lambda_cr).add(inv.total.scale(cfg.lambda_inv))?;
            let value = total.item();
            if !value.is_finite() {
                return Err(KiopError::SynthesisDiverged { round: k, detail: format!("step {step} loss {value}") });
            }
            trace.push(StepLoss {
                step,
                total: value,
                inversion: inv.total.item(),
                contrastive: contrastive.item(),
                bn: inv.bn.item(),
                prior: inv.prior.item(),
                adversarial: inv.adversarial.item(),
            });
            if best.as_ref().is_none_or(|(b, _, _)| value < *b) {
                best = Some((value, step, x.to_tensor()));
            }
            let grads = g.backward(total)?;
            let gg: Vec<Option<&Tensor>> = gp.iter().map(|v| grads.get(*v)).collect();
            opt_g.step(&mut generator.params_mut(), &gg, cfg.lr_generator)?;
            opt_z.step(&mut [&mut z], &[grads.get(zv)], cfg.lr_latent)?;
            let dg: Vec<Option<&Tensor>> = dp.iter().map(|v| grads.get(*v)).collect();
            opt_d.step(&mut self.disc.params_mut(), &dg, cfg.lr_discriminator)?;
        }

        let (loss, best_step, images) = best.expect("at least one step");
        Ok(RoundReport { round: k, images, targets, loss, best_step, trace, generator_digest, reseeded: false })
    }
}

fn adam() -> AdamConfig {
    AdamConfig::default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::zoo;

    fn tiny() -> (FrozenModel, SynthesisConfig) {
        let net = zoo::toy_cnn(4, [4, 8], 3);
        let cfg = SynthesisConfig {
            steps: 3,
            batch_size: 4,
            z_dim: 8,
            generator_width: 8,
            discriminator_hidden: 16,
            embedding_dim: 8,
            ..SynthesisConfig::default()
        };
        (FrozenModel::register("t", net, 16), cfg)
    }

    #[test]
    fn rounds_commit_the_best_step() {
        let (teacher, cfg) = tiny();
        let student = zoo::toy_cnn(4, [4, 8], 9);
        let mut s = Synthesizer::new(cfg, &teacher, 3, 16, 5).unwrap();
        for k in 0..2 {
            let r = s.round(&teacher, &student).unwrap();
            assert_eq!(s.bank.len(), 4 * (k + 1));
            let min = r.trace.iter().map(|t| t.total).fold(f32::INFINITY, f32::min);
            assert_eq!(r.loss, min);
            assert_eq!(r.generator_digest, tensors_digest(&s.seeded_generator(k, 0).unwrap().params));
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = SynthesisConfig { tau: 0.0, ..SynthesisConfig::default() };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = SynthesisConfig { steps: 0, ..SynthesisConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SynthesisConfig { omega: -1.0, ..SynthesisConfig::default() };
        assert!(bad.validate().is_err());
    }
}
