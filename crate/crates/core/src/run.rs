//! End-to-end runs driven by an [`ExperimentConfig`]: model preparation,
//! training under each regime, evaluation, sweeps, and run directories.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{restore_head, vanilla_dfkd};
use crate::config::{ExperimentConfig, ModelEntry, ModelSource, Seeds};
use crate::data::{ingest, Dataset, Split};
use crate::error::{KiopError, Result};
use crate::eval::accuracy;
use crate::fusion::{Chain, LabelMapping};
use crate::geometry::{RingPartition, VisualPrompt};
use crate::models::store::{load_model, save_model};
use crate::models::{zoo, FrozenModel, Network};
use crate::pretrain::fit;
use crate::seed;
use crate::storing::{IterMetrics, Receiver, Regime, StepOutcome, Trainer};

/// A model with the dataset it classifies.
pub struct Prepared {
    pub model: FrozenModel,
    pub data: Dataset,
}

/// Everything a run needs besides its mutable state.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub source: Prepared,
    pub receivers: Vec<Prepared>,
}

fn prepare_entry(entry: &ModelEntry, hole: usize) -> Result<Prepared> {
    let data = ingest(&entry.dataset, hole)?;
    let model = match &entry.source {
        ModelSource::Manifest(path) => {
            let m = load_model(path)?;
            if m.class_count() != data.classes {
                return Err(KiopError::ShapeMismatch(format!(
                    "model {} has {} classes, dataset {} has {}",
                    m.id(),
                    m.class_count(),
                    data.id,
                    data.classes
                )));
            }
            m
        }
        ModelSource::Toy(toy) => {
            let mut net = zoo::toy_cnn(data.classes, zoo::TOY_WIDTHS, toy.init_seed);
            fit(&mut net, &data.train, &toy.pretrain)?;
            FrozenModel::register(entry.id.clone(), net, data.train.side()).with_dataset(data.id.clone())
        }
    };
    Ok(Prepared { model, data })
}

impl Setup {
    /// Ingests datasets and loads (or pre-trains) every model.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hole = cfg.partition()?.hole();
        let source = prepare_entry(&cfg.source, hole)?;
        let receivers = cfg.receivers.iter().map(|e| prepare_entry(e, hole)).collect::<Result<_>>()?;
        Ok(Self { cfg, source, receivers })
    }

    /// The same prepared models under a different configuration. Model and
    /// dataset entries must match.
    pub fn with_config(&self, cfg: ExperimentConfig) -> Result<SetupView<'_>> {
        cfg.validate()?;
        if cfg.source != self.cfg.source || cfg.receivers.len() > self.receivers.len() || cfg.receivers[..] != self.cfg.receivers[..cfg.receivers.len()] {
            return Err(KiopError::Config("model entries differ from the prepared setup".into()));
        }
        Ok(SetupView { cfg, setup: self })
    }

    pub fn view(&self) -> SetupView<'_> {
        SetupView { cfg: self.cfg.clone(), setup: self }
    }
}

/// A configuration paired with already-prepared models.
pub struct SetupView<'a> {
    pub cfg: ExperimentConfig,
    pub setup: &'a Setup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub regime: Regime,
    pub sides: Vec<usize>,
    /// Model A behind the core on its own test split.
    pub acc_a: f64,
    /// Each receiver's chain on its test split.
    pub acc_b: Vec<f64>,
    /// Model A alone, unprompted, on its test split.
    pub acc_a_raw: f64,
}

pub struct RunOutcome {
    pub prompt: VisualPrompt,
    pub mappings: Vec<LabelMapping>,
    pub metrics: Vec<IterMetrics>,
    pub eval: EvalRow,
    pub digests_before: Vec<String>,
    pub digests_after: Vec<String>,
}

/// Mapping from model A's classes onto receiver `i`'s classes.
pub fn mapping_for(cfg: &ExperimentConfig, source_classes: usize, target: usize, i: usize) -> Result<LabelMapping> {
    let base = cfg.seeds.resolved().mapping.expect("resolved");
    LabelMapping::random(source_classes, target, seed::derive(base, &[i as u64]))
}

fn test_split(data: &Dataset, max: Option<usize>) -> Split {
    match max {
        Some(n) => data.test.truncated(n),
        None => data.test.clone(),
    }
}

/// Accuracy of every chain of `prompt`.
pub fn evaluate(view: &SetupView<'_>, prompt: &VisualPrompt, mappings: &[LabelMapping]) -> Result<EvalRow> {
    let cfg = &view.cfg;
    let a = &view.setup.source;
    let batch = cfg.eval.batch_size;
    let test_a = test_split(&a.data, cfg.eval.max_samples);
    let acc_a = accuracy(&test_a, batch, |x| Chain { model: &a.model, prompt, depth: 1, mapping: None }.logits(x))?;
    let acc_a_raw = accuracy(&test_a, batch, |x| a.model.logits(x))?;
    let mut acc_b = Vec::with_capacity(cfg.receivers.len());
    for (i, m) in mappings.iter().enumerate() {
        let r = &view.setup.receivers[i];
        let split = test_split(&r.data, cfg.eval.max_samples);
        let chain = Chain { model: &a.model, prompt, depth: cfg.depth(i), mapping: Some(m) };
        acc_b.push(accuracy(&split, batch, |x| chain.logits(x))?);
    }
    Ok(EvalRow { regime: cfg.regime, sides: prompt.partition().sides().to_vec(), acc_a, acc_b, acc_a_raw })
}

/// Trains a prompt under any KiOP regime.
pub fn train(view: &SetupView<'_>, mut on_step: impl FnMut(&StepOutcome) -> Result<()>) -> Result<RunOutcome> {
    let cfg = &view.cfg;
    if cfg.regime == Regime::Vanilla {
        return Err(KiopError::Config("the vanilla regime trains a student, not a prompt; use run_vanilla".into()));
    }
    let seeds = cfg.seeds.resolved();
    let partition: RingPartition = cfg.partition()?;
    let prompt = VisualPrompt::init(partition, cfg.prompt.init, seeds.prompt.expect("resolved"));
    let a = &view.setup.source;
    let mut mappings = Vec::with_capacity(cfg.receivers.len());
    let mut receivers = Vec::with_capacity(cfg.receivers.len());
    for i in 0..cfg.receivers.len() {
        let r = &view.setup.receivers[i];
        let mapping = mapping_for(cfg, a.model.class_count(), r.model.class_count(), i)?;
        mappings.push(mapping.clone());
        receivers.push(Receiver { model: &r.model, mapping, depth: cfg.depth(i) });
    }
    let models: Vec<&FrozenModel> = std::iter::once(&a.model).chain(view.setup.receivers.iter().map(|r| &r.model)).collect();
    let digests_before: Vec<String> = models.iter().map(|m| crate::models::digest(m.net())).collect();

    let mut storing = cfg.storing_for_regime();
    storing.seed = seeds.storing.expect("resolved");
    let mut synthesis = cfg.synthesis.clone();
    synthesis.seed = seeds.synthesis.expect("resolved");
    let real_a = (cfg.regime == Regime::KiopB).then_some(&a.data.train);
    let mut trainer = Trainer::new(storing, &synthesis, &a.model, receivers, prompt, real_a)?;
    let metrics = trainer.run(&mut on_step)?;
    let prompt = trainer.prompt.clone();
    drop(trainer);

    let digests_after: Vec<String> = models.iter().map(|m| crate::models::digest(m.net())).collect();
    let eval = evaluate(view, &prompt, &mappings)?;
    Ok(RunOutcome { prompt, mappings, metrics, eval, digests_before, digests_after })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaRow {
    /// Model A on its own test split before distillation.
    pub acc_a_before: f64,
    /// The distilled student with its original head restored.
    pub acc_a_restored: f64,
    /// The distilled student on the receiver's test split.
    pub acc_b: f64,
    /// Model A (registered, frozen) after the run.
    pub acc_a_registered: f64,
}

pub struct VanillaRun {
    pub student: Network,
    pub row: VanillaRow,
    pub metrics: Vec<crate::baselines::VanillaMetrics>,
}

pub fn run_vanilla(view: &SetupView<'_>, on_step: impl FnMut(&crate::baselines::VanillaMetrics) -> Result<()>) -> Result<VanillaRun> {
    let cfg = &view.cfg;
    let seeds = cfg.seeds.resolved();
    let a = &view.setup.source;
    let b = &view.setup.receivers[0];
    let mut vcfg = cfg.vanilla.clone();
    vcfg.seed = seeds.storing.expect("resolved");
    let mut synthesis = cfg.synthesis.clone();
    synthesis.seed = seeds.synthesis.expect("resolved");
    let batch = cfg.eval.batch_size;
    let test_a = test_split(&a.data, cfg.eval.max_samples);
    let test_b = test_split(&b.data, cfg.eval.max_samples);
    let acc_a_before = accuracy(&test_a, batch, |x| a.model.logits(x))?;
    let out = vanilla_dfkd(a.model.net().clone(), &b.model, &vcfg, &synthesis, on_step)?;
    let acc_b = accuracy(&test_b, batch, |x| out.student.logits(x))?;
    let mut restored = out.student.clone();
    restore_head(&mut restored, &out.snapshot)?;
    let acc_a_restored = accuracy(&test_a, batch, |x| restored.logits(x))?;
    a.model.assert_frozen()?;
    let acc_a_registered = accuracy(&test_a, batch, |x| a.model.logits(x))?;
    Ok(VanillaRun { student: out.student, row: VanillaRow { acc_a_before, acc_a_restored, acc_b, acc_a_registered }, metrics: out.metrics })
}

/// One row of a core-size sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub core: usize,
    pub sides: Vec<usize>,
    pub acc_b: f64,
    pub acc_a: f64,
}

pub const SWEEP_CORES: [usize; 4] = [36, 48, 64, 128];

/// Sides for a sweep point: a core of side `core` inside the configured
/// outer side, or one undivided ring when the core reaches it.
pub fn sweep_sides(hole: usize, core: usize, outer: usize) -> Vec<usize> {
    if core >= outer {
        vec![hole, core]
    } else {
        vec![hole, core, outer]
    }
}

pub fn sweep(view: &SetupView<'_>, cores: &[usize], mut on_row: impl FnMut(&SweepRow) -> Result<()>) -> Result<Vec<SweepRow>> {
    let base = &view.cfg;
    let hole = base.prompt.sides[0];
    let outer = *base.prompt.sides.last().expect("validated");
    let mut rows = Vec::with_capacity(cores.len());
    for &core in cores {
        let mut cfg = base.clone();
        cfg.prompt.sides = sweep_sides(hole, core, outer);
        let v = view.setup.with_config(cfg)?;
        let out = train(&v, |_| Ok(()))?;
        let row = SweepRow { core, sides: v.cfg.prompt.sides.clone(), acc_b: out.eval.acc_b[0], acc_a: out.eval.acc_a };
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Files of one run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the directory and records the resolved config and seeds.
    pub fn create(root: impl Into<PathBuf>, cfg: &ExperimentConfig) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| KiopError::io(&root, e))?;
        let dir = Self { root };
        let mut resolved = cfg.clone();
        resolved.seeds = cfg.seeds.resolved();
        dir.write("config.toml", resolved.to_toml().as_bytes())?;
        dir.write_json("seeds.json", &seed_record(&resolved.seeds))?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| KiopError::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("record serializes");
        self.write(name, text.as_bytes())
    }

    pub fn lines(&self, name: &str) -> Result<JsonLines> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| KiopError::io(&path, e))?;
        Ok(JsonLines { path, out: BufWriter::new(file) })
    }

    /// Saves every run model so the run replays without pre-training.
    pub fn save_models(&self, models: &[&FrozenModel]) -> Result<Vec<PathBuf>> {
        let dir = self.path("models");
        models.iter().map(|m| save_model(m, &dir)).collect()
    }
}

fn seed_record(seeds: &Seeds) -> serde_json::Value {
    json!({
        "global": seeds.global,
        "mapping": seeds.mapping,
        "synthesis": seeds.synthesis,
        "storing": seeds.storing,
        "prompt": seeds.prompt,
    })
}

/// A JSON-lines log file.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| KiopError::io(&self.path, e))?;
        self.out.flush().map_err(|e| KiopError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Synthesis trace records of one storing iteration.
pub fn synthesis_records(step: &StepOutcome) -> Vec<serde_json::Value> {
    step.rounds
        .iter()
        .map(|(model, r)| {
            json!({
                "iter": step.metrics.iter,
                "model": model,
                "round": r.round,
                "loss": r.loss,
                "best_step": r.best_step,
                "reseeded": r.reseeded,
                "trace": r.trace,
            })
        })
        .collect()
}
