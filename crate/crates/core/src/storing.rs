//! The storing loop: alternate synthesize rounds with prompt updates that make
//! each prompted chain imitate its frozen reference.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use kiop_tape::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{KiopError, Result};
use crate::fusion::{chain_forward, Chain, LabelMapping};
use crate::geometry::{BoundPrompt, VisualPrompt};
use crate::losses::kl_sim;
use crate::models::FrozenModel;
use crate::pretrain::cosine_lr;
use crate::seed::{self, stream};
use crate::synthesis::{DataBank, RoundReport, SynthesisConfig, Synthesizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Single-model transfer into an undivided prompt.
    #[serde(rename = "kiop-t")]
    KiopT,
    /// Real data for model A, synthetic data for the receiver.
    #[serde(rename = "kiop-b")]
    KiopB,
    /// Synthetic data on both sides.
    #[serde(rename = "kiop-bf")]
    KiopBF,
    /// Several receivers on nested rings.
    #[serde(rename = "multi")]
    Multi,
    /// Unfrozen-student distillation baseline.
    #[serde(rename = "vanilla")]
    Vanilla,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::KiopT, Regime::KiopB, Regime::KiopBF, Regime::Multi, Regime::Vanilla];

    pub fn name(self) -> &'static str {
        match self {
            Regime::KiopT => "kiop-t",
            Regime::KiopB => "kiop-b",
            Regime::KiopBF => "kiop-bf",
            Regime::Multi => "multi",
            Regime::Vanilla => "vanilla",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = KiopError;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| KiopError::Config(format!("unknown regime {s:?}; expected one of kiop-t, kiop-b, kiop-bf, multi, vanilla")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoringConfig {
    pub alpha: f32,
    pub beta: f32,
    /// Outer iterations.
    pub iterations: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Prompt updates per outer iteration.
    pub repeats: usize,
    /// Use every stored sample instead of a sampled minibatch.
    pub exact_sum: bool,
    /// Per-receiver weights; empty means all ones.
    pub receiver_weights: Vec<f32>,
    pub seed: u64,
}

impl Default for StoringConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, iterations: 500, lr: 1e-3, batch_size: 64, repeats: 1, exact_sum: false, receiver_weights: vec![], seed: 0 }
    }
}

impl StoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || self.receiver_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(KiopError::Config("storing weights must be >= 0".into()));
        }
        if self.iterations == 0 || self.repeats == 0 || self.batch_size == 0 {
            return Err(KiopError::Config("iterations, repeats and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(KiopError::Config(format!("storing lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A frozen model whose knowledge is stored behind rings `1..=depth`.
#[derive(Clone, Debug)]
pub struct Receiver<'a> {
    pub model: &'a FrozenModel,
    pub mapping: LabelMapping,
    pub depth: usize,
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    #[serde(rename = "loss_A")]
    pub loss_a: Option<f32>,
    #[serde(rename = "loss_B")]
    pub loss_b: Option<f32>,
    /// Unweighted per-receiver losses.
    #[serde(rename = "loss_B_parts")]
    pub loss_b_parts: Vec<f32>,
    pub loss_total: f32,
    /// Side A first (zero when unused), then every receiver.
    pub bank_sizes: Vec<usize>,
    pub lr: f32,
    pub wall_ms: u64,
}

pub struct StepOutcome {
    pub metrics: IterMetrics,
    /// Rounds run this iteration: side A (if synthesized) then receivers.
    pub rounds: Vec<(String, RoundReport)>,
}

/// Losses of one prompt update before the optimizer step.
pub struct StoringLosses<'g> {
    pub loss_a: Option<Var<'g>>,
    pub loss_b_parts: Vec<Var<'g>>,
    pub loss_b: Option<Var<'g>>,
    pub total: Var<'g>,
}

pub struct Trainer<'a> {
    pub cfg: StoringConfig,
    model_a: &'a FrozenModel,
    real_a: Option<&'a Split>,
    receivers: Vec<Receiver<'a>>,
    pub prompt: VisualPrompt,
    pub synth_a: Option<Synthesizer>,
    pub synth_b: Vec<Synthesizer>,
    opt: Adam,
    iter: usize,
    updates: usize,
}

impl<'a> Trainer<'a> {
    /// `real_a` switches side A from its bank to real samples.
    pub fn new(
        cfg: StoringConfig,
        synthesis: &SynthesisConfig,
        model_a: &'a FrozenModel,
        receivers: Vec<Receiver<'a>>,
        prompt: VisualPrompt,
        real_a: Option<&'a Split>,
    ) -> Result<Self> {
        cfg.validate()?;
        if receivers.is_empty() {
            return Err(KiopError::Config("at least one receiver is required".into()));
        }
        if !cfg.receiver_weights.is_empty() && cfg.receiver_weights.len() != receivers.len() {
            return Err(KiopError::Config(format!("{} receiver weights for {} receivers", cfg.receiver_weights.len(), receivers.len())));
        }
        let partition = prompt.partition();
        for r in &receivers {
            partition.check_depth(r.depth)?;
            if r.mapping.source_classes != model_a.class_count() || r.mapping.target_classes() != r.model.class_count() {
                return Err(KiopError::ShapeMismatch(format!(
                    "mapping {}->{} does not fit models {}->{}",
                    r.mapping.source_classes,
                    r.mapping.target_classes(),
                    model_a.class_count(),
                    r.model.class_count()
                )));
            }
        }
        if let Some(split) = real_a {
            if split.is_empty() {
                return Err(KiopError::EmptyDataset);
            }
        }
        let channels = partition.channels();
        let synth_a = match (cfg.alpha > 0.0, real_a) {
            (true, None) => {
                Some(Synthesizer::new(synthesis.clone(), model_a, channels, model_a.native_side(), seed::derive(synthesis.seed, &[0]))?)
            }
            _ => None,
        };
        let synth_b = receivers
            .iter()
            .enumerate()
            .map(|(i, r)| Synthesizer::new(synthesis.clone(), r.model, channels, r.model.native_side(), seed::derive(synthesis.seed, &[i as u64 + 1])))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, model_a, real_a, receivers, prompt, synth_a, synth_b, opt: Adam::new(AdamConfig::default()), iter: 0, updates: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn receivers(&self) -> &[Receiver<'a>] {
        &self.receivers
    }

    fn weight(&self, i: usize) -> f32 {
        self.cfg.receiver_weights.get(i).copied().unwrap_or(1.0)
    }

    fn bank_sizes(&self) -> Vec<usize> {
        let a = self.synth_a.as_ref().map_or(0, |s| s.bank.len());
        std::iter::once(a).chain(self.synth_b.iter().map(|s| s.bank.len())).collect()
    }

    fn draw_bank(&self, bank: &DataBank, repeat: usize, pair: usize) -> Result<Tensor> {
        if self.cfg.exact_sum {
            return Ok(bank.all()?.0);
        }
        let mut rng = self.storing_rng(repeat, pair);
        Ok(bank.sample(self.cfg.batch_size, &mut rng)?.0)
    }

    fn draw_real(&self, split: &Split, repeat: usize) -> Result<Tensor> {
        if self.cfg.exact_sum {
            return Ok(split.images.clone());
        }
        let mut rng = self.storing_rng(repeat, 0);
        let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| rng.random_range(0..split.len())).collect();
        Ok(split.batch(&idx)?.0)
    }

    fn storing_rng(&self, repeat: usize, pair: usize) -> seed::Rng {
        seed::rng(self.cfg.seed, &[stream::STORING, self.iter as u64, repeat as u64, pair as u64])
    }

    /// Samples the storing batches and assembles `α·L_A + β·Σ w_i·L_Bi`.
    pub fn losses<'g>(&self, g: &'g Graph, bound: &BoundPrompt<'g>, repeat: usize) -> Result<StoringLosses<'g>> {
        let loss_a = if self.cfg.alpha > 0.0 {
            let x = match (self.real_a, &self.synth_a) {
                (Some(split), _) => self.draw_real(split, repeat)?,
                (None, Some(s)) => self.draw_bank(&s.bank, repeat, 0)?,
                (None, None) => unreachable!("side A has a data source whenever alpha > 0"),
            };
            let reference = g.constant(self.model_a.logits(&x)?);
            let chain = chain_forward(g, self.model_a, bound, g.constant(x), 1)?.logits;
            Some(kl_sim(reference, chain)?)
        } else {
            None
        };
        let mut loss_b_parts = Vec::new();
        let mut loss_b: Option<Var<'g>> = None;
        if self.cfg.beta > 0.0 {
            for (i, (r, s)) in self.receivers.iter().zip(&self.synth_b).enumerate() {
                let x = self.draw_bank(&s.bank, repeat, i + 1)?;
                let reference = g.constant(r.model.logits(&x)?);
                let chain = r.mapping.apply(chain_forward(g, self.model_a, bound, g.constant(x), r.depth)?.logits)?;
                let part = kl_sim(reference, chain)?;
                loss_b_parts.push(part);
                let weighted = part.scale(self.weight(i));
                loss_b = Some(match loss_b {
                    Some(acc) => acc.add(weighted)?,
                    None => weighted,
                });
            }
        }
        let total = match (loss_a, loss_b) {
            (Some(a), Some(b)) => a.scale(self.cfg.alpha).add(b.scale(self.cfg.beta))?,
            (Some(a), None) => a.scale(self.cfg.alpha),
            (None, Some(b)) => b.scale(self.cfg.beta),
            (None, None) => g.constant(Tensor::scalar(0.0)),
        };
        Ok(StoringLosses { loss_a, loss_b_parts, loss_b, total })
    }

    /// One synthesize round per active pair, then `repeats` prompt updates.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let start = Instant::now();
        let mut rounds = Vec::new();
        if let Some(mut s) = self.synth_a.take() {
            let chain = Chain { model: self.model_a, prompt: &self.prompt, depth: 1, mapping: None };
            let r = s.round(self.model_a, &chain);
            self.synth_a = Some(s);
            rounds.push((self.model_a.id().to_string(), r?));
        }
        if self.cfg.beta > 0.0 {
            for i in 0..self.receivers.len() {
                let r = &self.receivers[i];
                let chain = Chain { model: self.model_a, prompt: &self.prompt, depth: r.depth, mapping: Some(&r.mapping) };
                let report = self.synth_b[i].round(r.model, &chain)?;
                rounds.push((r.model.id().to_string(), report));
            }
        }

        let total_updates = self.cfg.iterations * self.cfg.repeats;
        let (mut sum_a, mut sum_b, mut sum_total) = (0.0f32, 0.0f32, 0.0f32);
        let mut sum_parts = vec![0.0f32; if self.cfg.beta > 0.0 { self.receivers.len() } else { 0 }];
        let mut lr = self.cfg.lr;
        for repeat in 0..self.cfg.repeats {
            lr = cosine_lr(self.cfg.lr, self.updates, total_updates);
            let grads = {
                let g = Graph::new();
                let bound = self.prompt.bind(&g, true);
                let l = self.losses(&g, &bound, repeat)?;
                let total = l.total.item();
                if !total.is_finite() {
                    return Err(KiopError::SynthesisDiverged { round: self.iter, detail: format!("storing loss {total}") });
                }
                sum_total += total;
                sum_a += l.loss_a.map_or(0.0, |v| v.item());
                sum_b += l.loss_b.map_or(0.0, |v| v.item());
                for (acc, p) in sum_parts.iter_mut().zip(&l.loss_b_parts) {
                    *acc += p.item();
                }
                let mut grads = g.backward(l.total)?;
                bound.rings().iter().map(|v| grads.take(*v)).collect::<Vec<_>>()
            };
            let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            self.opt.step(&mut self.prompt.rings_mut(), &refs, lr)?;
            self.updates += 1;
        }

        self.model_a.assert_frozen()?;
        for r in &self.receivers {
            r.model.assert_frozen()?;
        }
        let n = self.cfg.repeats as f32;
        let metrics = IterMetrics {
            iter: self.iter,
            loss_a: (self.cfg.alpha > 0.0).then_some(sum_a / n),
            loss_b: (self.cfg.beta > 0.0).then_some(sum_b / n),
            loss_b_parts: sum_parts.iter().map(|v| v / n).collect(),
            loss_total: sum_total / n,
            bank_sizes: self.bank_sizes(),
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        self.iter += 1;
        Ok(StepOutcome { metrics, rounds })
    }

    /// Runs the remaining iterations, handing each outcome to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepOutcome) -> Result<()>) -> Result<Vec<IterMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.iterations.saturating_sub(self.iter));
        while self.iter < self.cfg.iterations {
            let step = self.step()?;
            on_step(&step)?;
            out.push(step.metrics);
        }
        Ok(out)
    }
}
