use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kiop::config::{ExperimentConfig, ModelSource};
use kiop::eval::{gradcam, resource_report};
use kiop::models::FrozenModel;
use kiop::run::{self, mapping_for, RunDir, Setup, SWEEP_CORES};
use kiop::storing::Regime;
use kiop::{KiopError, VisualPrompt};

#[derive(Parser)]
#[command(name = "kiop", version, about = "Store several frozen classifiers' knowledge in one visual prompt")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the regime (kiop-t, kiop-b, kiop-bf, multi, vanilla).
    #[arg(long)]
    regime: Option<Regime>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a prompt (or a vanilla student) and write a run directory.
    Train(Common),
    /// Accuracy of a saved prompt's chains.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: PathBuf,
    },
    /// Grad-CAM maps of model A behind the prompt core.
    Gradcam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        class: Option<usize>,
        /// Prompt depth the maps are computed through.
        #[arg(long, default_value_t = 1)]
        depth: usize,
    },
    /// Parameter and storage accounting.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: Option<PathBuf>,
    },
    /// Train under the configured regime for each core side.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_CORES)]
        cores: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_config() { 2 } else { 1 };
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn load(common: &Common) -> kiop::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seeds.global = s;
    }
    if let Some(r) = common.regime {
        cfg.regime = r;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{}-s{}", cfg.regime, cfg.seeds.global)))
}

fn dispatch(cmd: Cmd) -> kiop::Result<()> {
    match cmd {
        Cmd::Train(common) => {
            let cfg = load(&common)?;
            train(Setup::new(cfg)?)
        }
        Cmd::Eval { common, prompt } => {
            let cfg = load(&common)?;
            let prompt = VisualPrompt::load(&prompt)?;
            check_sides(&cfg, &prompt)?;
            let setup = Setup::new(cfg)?;
            let view = setup.view();
            let mappings = mappings(&setup)?;
            let row = run::evaluate(&view, &prompt, &mappings)?;
            println!("regime\tsides\tacc_a_raw\tacc_a\t{}", (0..row.acc_b.len()).map(|i| format!("acc_b{i}")).collect::<Vec<_>>().join("\t"));
            println!(
                "{}\t{:?}\t{:.4}\t{:.4}\t{}",
                row.regime,
                row.sides,
                row.acc_a_raw,
                row.acc_a,
                row.acc_b.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join("\t")
            );
            Ok(())
        }
        Cmd::Gradcam { common, prompt, samples, layer, class, depth } => {
            let cfg = load(&common)?;
            let prompt = VisualPrompt::load(&prompt)?;
            check_sides(&cfg, &prompt)?;
            let dir = out_dir(&cfg).join("gradcam");
            let setup = Setup::new(cfg)?;
            let test = &setup.source.data.test;
            let idx: Vec<usize> = (0..samples.min(test.len())).collect();
            let (x, _) = test.batch(&idx)?;
            let cam = gradcam(&x, &setup.source.model, &prompt, depth, layer.as_deref(), class)?;
            let files = cam.save(&dir)?;
            println!("layer {} classes {:?}: {} files in {}", cam.layer, cam.classes, files.len(), dir.display());
            Ok(())
        }
        Cmd::Report { common, prompt } => {
            let cfg = load(&common)?;
            let prompt = match prompt {
                Some(p) => VisualPrompt::load(&p)?,
                None => VisualPrompt::init(cfg.partition()?, cfg.prompt.init, 0),
            };
            let mut models = Vec::new();
            for entry in std::iter::once(&cfg.source).chain(&cfg.receivers) {
                match &entry.source {
                    ModelSource::Manifest(p) => models.push(kiop::models::store::load_model(p)?),
                    ModelSource::Toy(t) => {
                        let net = kiop::models::zoo::toy_cnn(entry_classes(entry)?, kiop::models::zoo::TOY_WIDTHS, t.init_seed);
                        models.push(FrozenModel::register(entry.id.clone(), net, kiop::data::TOY_SIDE));
                    }
                }
            }
            let report = resource_report(&prompt, &models.iter().collect::<Vec<_>>());
            print!("{report}");
            Ok(())
        }
        Cmd::Sweep { common, cores } => {
            let cfg = load(&common)?;
            if cfg.regime == Regime::Vanilla || cfg.regime == Regime::Multi {
                return Err(KiopError::Config(format!("sweep takes a single-receiver prompt regime, not {}", cfg.regime)));
            }
            let outer = *cfg.prompt.sides.last().expect("validated");
            let hole = cfg.prompt.sides[0];
            if let Some(&bad) = cores.iter().find(|&&c| c <= hole || c > outer) {
                return Err(KiopError::InvalidPartition(format!("core side {bad} must lie in ({hole}, {outer}]")));
            }
            let setup = Setup::new(cfg)?;
            let dir = RunDir::create(out_dir(&setup.cfg), &setup.cfg)?;
            let mut log = dir.lines("sweep.jsonl")?;
            println!("core\tsides\tacc_a\tacc_b");
            let rows = run::sweep(&setup.view(), &cores, |row| {
                println!("{}\t{:?}\t{:.4}\t{:.4}", row.core, row.sides, row.acc_a, row.acc_b);
                log.push(row)
            })?;
            dir.write_json("sweep.json", &rows)?;
            Ok(())
        }
    }
}

fn entry_classes(entry: &kiop::config::ModelEntry) -> kiop::Result<usize> {
    Ok(match &entry.dataset.toy {
        Some(_) => kiop::data::TOY_CLASSES,
        None => kiop::data::ingest(&entry.dataset, 1)?.classes,
    })
}

fn check_sides(cfg: &ExperimentConfig, prompt: &VisualPrompt) -> kiop::Result<()> {
    let expected = cfg.partition()?;
    if expected.sides() != prompt.partition().sides() {
        return Err(KiopError::InvalidPartition(format!(
            "prompt sides {:?} differ from the config's {:?}",
            prompt.partition().sides(),
            expected.sides()
        )));
    }
    Ok(())
}

fn mappings(setup: &Setup) -> kiop::Result<Vec<kiop::LabelMapping>> {
    let k = setup.source.model.class_count();
    setup.receivers.iter().enumerate().map(|(i, r)| mapping_for(&setup.cfg, k, r.model.class_count(), i)).collect()
}

/// Config for replaying the run from its directory: pre-trained toy models
/// point at their saved copies.
fn replay_config(cfg: &ExperimentConfig, saved: &[PathBuf], root: &Path) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    cfg.seeds = cfg.seeds.resolved();
    for (entry, path) in std::iter::once(&mut cfg.source).chain(cfg.receivers.iter_mut()).zip(saved) {
        if matches!(entry.source, ModelSource::Toy(_)) {
            entry.source = ModelSource::Manifest(path.strip_prefix(root).unwrap_or(path).to_path_buf());
        }
    }
    cfg
}

fn train(setup: Setup) -> kiop::Result<()> {
    let cfg = setup.cfg.clone();
    let dir = RunDir::create(out_dir(&cfg), &cfg)?;
    let models: Vec<&FrozenModel> = std::iter::once(&setup.source.model).chain(setup.receivers.iter().map(|r| &r.model)).collect();
    let saved = dir.save_models(&models)?;
    dir.write("replay.toml", replay_config(&cfg, &saved, &dir.root).to_toml().as_bytes())?;
    let view = setup.view();
    let mut metrics = dir.lines("metrics.jsonl")?;
    let total = if cfg.regime == Regime::Vanilla { cfg.vanilla.iterations } else { cfg.storing.iterations };
    let every = (total / 20).max(1);
    let progress = |iter: usize, loss: f32, ms: u64| {
        if (iter + 1) % every == 0 || iter + 1 == total {
            eprintln!("iter {}/{total} loss {loss:.4} {ms} ms", iter + 1);
        }
    };

    if cfg.regime == Regime::Vanilla {
        let out = run::run_vanilla(&view, |m| {
            progress(m.base.iter, m.base.loss_total, m.base.wall_ms);
            metrics.push(m)
        })?;
        let student = FrozenModel::register(format!("{}-student", setup.source.model.id()), out.student, setup.source.model.native_side());
        dir.save_models(&[&student])?;
        dir.write_json("eval.json", &out.row)?;
        println!(
            "vanilla\tacc_a_before {:.4}\tacc_a_restored {:.4}\tacc_b {:.4}\tacc_a_registered {:.4}",
            out.row.acc_a_before, out.row.acc_a_restored, out.row.acc_b, out.row.acc_a_registered
        );
        return Ok(());
    }

    let mut synth = dir.lines("synthesis.jsonl")?;
    let out = run::train(&view, |step| {
        progress(step.metrics.iter, step.metrics.loss_total, step.metrics.wall_ms);
        metrics.push(&step.metrics)?;
        for rec in run::synthesis_records(step) {
            synth.push(&rec)?;
        }
        Ok(())
    })?;
    out.prompt.save(dir.path("prompt.kiop"))?;
    dir.write_json(
        "eval.json",
        &serde_json::json!({
            "eval": out.eval,
            "digests_before": out.digests_before,
            "digests_after": out.digests_after,
        }),
    )?;
    println!(
        "{}\tsides {:?}\tacc_a {:.4}\tacc_b {}\t{}",
        out.eval.regime,
        out.eval.sides,
        out.eval.acc_a,
        out.eval.acc_b.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(","),
        dir.root.display()
    );
    Ok(())
}
