//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::backbone::{masked_lm_loss, pretrain, Backbone};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{Precision, RunConfig};
use crate::data::{generate_with_provenance, read_corpus, write_corpus, ScriptInstance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::gradcheck::{gradient_check, CheckSettings};
use crate::metrics::{write_instances, write_rows, LossRow, MetricRow};
use crate::model::{ablation_variants, Model, ModelConfig};
use crate::noise::{domain, NoiseSource};
use crate::tensor::{ParamStore, Real};
use crate::train::{train, TrainConfig};
use crate::vocab::Vocabulary;

#[derive(Debug, Parser)]
#[command(name = "gaussprompt", version, about = "Gaussian prompt learning for script event prediction")]
pub struct Cli {
    /// Base configuration file of dotted `key = value` pairs.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepOver {
    /// Inference sample counts over a trained checkpoint.
    Samples,
    /// Aggregation temperatures, one training run each.
    Lambda,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/dev/test corpora and their vocabulary.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the masked language model on the training chains.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model from a pretrained backbone.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split with a trained checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test the full model and its six ablations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics across sample counts or aggregation temperatures.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "samples")]
        over: SweepOver,
        /// Trained checkpoint, for `--over samples`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pretrained backbone, for `--over lambda`.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every gradient on a tiny fixture.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process exit status for an error.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::NonFinite { .. } => 3,
        Error::GradientCheck(_) => 4,
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `argv`, runs the command and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cfg.run.precision {
        Precision::F32 => dispatch::<f32>(cli, &cfg),
        Precision::F64 => dispatch::<f64>(cli, &cfg),
    }
}

fn dispatch<F: Real>(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::Generate { out } => generate(cfg, out),
        Command::Pretrain { data, out } => run_pretrain::<F>(cfg, data, out),
        Command::Train { data, backbone, out } => run_train::<F>(cfg, data, backbone.as_deref(), out),
        Command::Eval { data, checkpoint, split, out } => run_eval::<F>(cfg, data, checkpoint, split, out),
        Command::Ablate { data, backbone, out } => run_ablate::<F>(cfg, data, backbone.as_deref(), out),
        Command::Sweep { data, over, checkpoint, backbone, split, out } => match over {
            SweepOver::Samples => {
                let ck = checkpoint.as_deref().ok_or_else(|| Error::Config("--over samples needs --checkpoint".into()))?;
                sweep_samples::<F>(cfg, data, ck, split, out)
            }
            SweepOver::Lambda => sweep_lambda::<F>(cfg, data, backbone.as_deref(), split, out),
        },
        Command::Gradcheck { out } => run_gradcheck(cfg, out.as_deref()),
    }
}

fn prepare_out(cfg: &RunConfig, out: &Path, command: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cfg.write_snapshot(&out.join("config.toml"), &format!("resolved configuration of `{command}`"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn split_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.jsonl"))
}

fn load_split(data: &Path, split: &str) -> Result<Vec<ScriptInstance>> {
    let path = split_path(data, split);
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing corpus file {}", path.display()),
        )));
    }
    read_corpus(&path)
}

fn load_vocab(data: &Path) -> Result<Vocabulary> {
    Vocabulary::load(&data.join("vocab.json"))
}

#[derive(Serialize)]
struct Provenance {
    split: &'static str,
    chain_scenario: usize,
    candidate_scenarios: Vec<usize>,
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, out, "generate")?;
    let g = &cfg.generate;
    let all = generate_with_provenance(&g.generator())?;
    let (train, rest) = all.split_at(g.train_count);
    let (dev, test) = rest.split_at(g.dev_count);
    let mut prov = String::new();
    for (name, part) in [("train", train), ("dev", dev), ("test", test)] {
        let instances: Vec<ScriptInstance> = part.iter().map(|p| p.instance.clone()).collect();
        write_corpus(&split_path(out, name), &instances)?;
        for p in part {
            let line = Provenance {
                split: name,
                chain_scenario: p.chain_scenario,
                candidate_scenarios: p.candidate_scenarios.clone(),
            };
            prov.push_str(&serde_json::to_string(&line)?);
            prov.push('\n');
        }
    }
    std::fs::write(out.join("provenance.jsonl"), prov)?;
    Vocabulary::build(g.generator().inventory()).save(&out.join("vocab.json"))?;
    log::info!("wrote {} / {} / {} instances to {}", train.len(), dev.len(), test.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary {
    steps: usize,
    vocabulary_size: usize,
    uniform_baseline: f64,
    heldout_loss: f64,
}

fn run_pretrain<F: Real>(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    prepare_out(cfg, out, "pretrain")?;
    let vocab = load_vocab(data)?;
    let corpus = load_split(data, "train")?;
    let heldout = load_split(data, "dev")?;
    let result = pretrain::<F>(&corpus, &vocab, &cfg.backbone, &cfg.pretrain)?;
    let rows: Vec<LossRow> = result.losses.iter().map(|&(step, loss)| LossRow { step, loss }).collect();
    write_rows(&out.join("pretrain_loss.csv"), &rows)?;
    let heldout_loss = if heldout.is_empty() {
        f64::NAN
    } else {
        masked_lm_loss(&result.store, &result.backbone, &vocab, &heldout, cfg.pretrain.mask_probability, cfg.pretrain.seed)?
    };
    write_json(
        &out.join("pretrain.json"),
        &PretrainSummary {
            steps: cfg.pretrain.steps,
            vocabulary_size: vocab.len(),
            uniform_baseline: (vocab.len() as f64).ln(),
            heldout_loss,
        },
    )?;
    Checkpoint::from_store(CheckpointKind::Backbone, &vocab, &cfg.backbone, None, Some(cfg.to_json()), &result.store)
        .save(&out.join("backbone.json"))?;
    Ok(())
}

/// Backbone parameters for training: a pretrained checkpoint, or a fresh
/// initialization when `run.from_scratch` is set.
pub fn obtain_backbone<F: Real>(cfg: &RunConfig, vocab: &Vocabulary, path: Option<&Path>) -> Result<(ParamStore<F>, Backbone)> {
    if cfg.run.from_scratch {
        let mut store = ParamStore::new();
        let rng = &mut NoiseSource::new(cfg.run.init_seed).rng(&[domain::INIT]);
        let backbone = Backbone::register(&mut store, &cfg.backbone, vocab.len(), rng)?;
        return Ok((store, backbone));
    }
    let path = path.ok_or_else(|| Error::Config("a pretrained --backbone is required unless run.from_scratch = true".into()))?;
    let ck = Checkpoint::load(path)?;
    ck.ensure_vocabulary(vocab)?;
    if ck.backbone_config != cfg.backbone {
        return Err(Error::Config(format!(
            "backbone.* keys differ from the configuration stored in {}",
            path.display()
        )));
    }
    let mut store = ParamStore::<F>::new();
    for (_, p) in ck.store.iter().filter(|(_, p)| p.name.starts_with("backbone.")) {
        store.add(p.name.clone(), p.family, p.value.mapv(F::lit));
    }
    let backbone = Backbone::resolve(&store, &cfg.backbone)?;
    Ok((store, backbone))
}

pub struct TrainedRun<F> {
    pub model: Model,
    pub store: ParamStore<F>,
    pub metrics: Vec<MetricRow>,
    pub best_step: usize,
    pub best_dev_accuracy: f64,
    pub steps_run: usize,
}

/// Builds the model on top of the backbone and trains it.
pub fn train_variant<F: Real>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    vocab: &Vocabulary,
    backbone: (ParamStore<F>, Backbone),
    train_set: &[ScriptInstance],
    dev_set: &[ScriptInstance],
) -> Result<TrainedRun<F>> {
    let (mut store, backbone) = backbone;
    let model = Model::new(model_config.clone(), vocab, backbone, &mut store, train_config.seed)?;
    let out = train(&model, store, vocab, train_set, dev_set, train_config)?;
    Ok(TrainedRun {
        model,
        store: out.best,
        metrics: out.metrics,
        best_step: out.best_step,
        best_dev_accuracy: out.best_dev_accuracy,
        steps_run: out.steps_run,
    })
}

#[derive(Serialize)]
struct TrainSummary {
    steps_run: usize,
    best_step: usize,
    selection_dev_accuracy: f64,
    dev_accuracy: f64,
    dev_mean_loss: f64,
    dev_count: usize,
    ablation_flags: String,
    train_seconds: f64,
}

fn run_train<F: Real>(cfg: &RunConfig, data: &Path, backbone: Option<&Path>, out: &Path) -> Result<()> {
    prepare_out(cfg, out, "train")?;
    let vocab = load_vocab(data)?;
    let train_set = load_split(data, "train")?;
    let dev_set = load_split(data, "dev")?;
    let parts = obtain_backbone::<F>(cfg, &vocab, backbone)?;
    let start = Instant::now();
    let run = train_variant(&cfg.model, &cfg.train, &vocab, parts, &train_set, &dev_set)?;
    let train_seconds = start.elapsed().as_secs_f64();
    write_rows(&out.join("metrics.csv"), &run.metrics)?;
    Checkpoint::from_store(CheckpointKind::Model, &vocab, &cfg.backbone, Some(&run.model.config), Some(cfg.to_json()), &run.store)
        .save(&out.join("model.json"))?;
    let dev = evaluate(&run.model, &run.store, &vocab, &dev_set, &cfg.eval)?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            steps_run: run.steps_run,
            best_step: run.best_step,
            selection_dev_accuracy: run.best_dev_accuracy,
            dev_accuracy: dev.accuracy,
            dev_mean_loss: dev.mean_loss,
            dev_count: dev.count,
            ablation_flags: run.model.config.flags.label(),
            train_seconds,
        },
    )?;
    log::info!("dev accuracy {:.4} after {} steps ({train_seconds:.1}s)", dev.accuracy, run.steps_run);
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    split: String,
    accuracy: f64,
    mean_loss: f64,
    count: usize,
    samples: usize,
    vocabulary_hash: String,
}

fn load_model<F: Real>(checkpoint: &Path, vocab: &Vocabulary) -> Result<(Model, ParamStore<F>)> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.ensure_vocabulary(vocab)?;
    let model = ck.model()?;
    let store = ck.store.cast::<F>();
    Ok((model, store))
}

fn run_eval<F: Real>(cfg: &RunConfig, data: &Path, checkpoint: &Path, split: &str, out: &Path) -> Result<()> {
    let vocab = load_vocab(data)?;
    let dataset = load_split(data, split)?;
    let (model, store) = load_model::<F>(checkpoint, &vocab)?;
    prepare_out(cfg, out, "eval")?;
    let report = evaluate(&model, &store, &vocab, &dataset, &cfg.eval)?;
    write_instances(&out.join("instances.csv"), &report.records)?;
    write_json(
        &out.join("eval.json"),
        &EvalSummary {
            split: split.into(),
            accuracy: report.accuracy,
            mean_loss: report.mean_loss,
            count: report.count,
            samples: cfg.eval.samples,
            vocabulary_hash: vocab.hash(),
        },
    )?;
    println!("{split} accuracy {:.4} over {} instances", report.accuracy, report.count);
    Ok(())
}

fn test_row(run_step: usize, split: &str, report: &crate::eval::EvalReport, n: usize, flags: String, seed: u64) -> MetricRow {
    MetricRow {
        step: run_step,
        split: split.into(),
        accuracy: report.accuracy,
        mean_loss: report.mean_loss,
        n,
        ablation_flags: flags,
        seed,
        wall_clock_ms: 0,
    }
}

fn run_ablate<F: Real>(cfg: &RunConfig, data: &Path, backbone: Option<&Path>, out: &Path) -> Result<()> {
    prepare_out(cfg, out, "ablate")?;
    let vocab = load_vocab(data)?;
    let train_set = load_split(data, "train")?;
    let dev_set = load_split(data, "dev")?;
    let test_set = load_split(data, "test")?;
    let mut rows = Vec::new();
    let mut training = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for flags in ablation_variants() {
            let model_config = ModelConfig { flags, ..cfg.model.clone() };
            let train_config = TrainConfig { seed, ..cfg.train.clone() };
            let parts = obtain_backbone::<F>(cfg, &vocab, backbone)?;
            let run = train_variant(&model_config, &train_config, &vocab, parts, &train_set, &dev_set)?;
            let report = evaluate(&run.model, &run.store, &vocab, &test_set, &cfg.eval)?;
            log::info!("{} seed {seed}: test accuracy {:.4}", model_config.flags.label(), report.accuracy);
            rows.push(test_row(run.best_step, "test", &report, cfg.eval.samples, model_config.flags.label(), seed));
            training.extend(run.metrics);
        }
    }
    write_rows(&out.join("ablation.csv"), &rows)?;
    write_rows(&out.join("ablation_training.csv"), &training)?;
    Ok(())
}

fn sweep_samples<F: Real>(cfg: &RunConfig, data: &Path, checkpoint: &Path, split: &str, out: &Path) -> Result<()> {
    let vocab = load_vocab(data)?;
    let dataset = load_split(data, split)?;
    let (model, store) = load_model::<F>(checkpoint, &vocab)?;
    prepare_out(cfg, out, "sweep --over samples")?;
    let mut rows = Vec::new();
    for &n in &cfg.sweep.samples {
        let options = EvalOptions { samples: n, ..cfg.eval.clone() };
        let report = evaluate(&model, &store, &vocab, &dataset, &options)?;
        log::info!("n = {n}: accuracy {:.4}", report.accuracy);
        rows.push(test_row(0, split, &report, n, model.config.flags.label(), cfg.eval.seed));
    }
    write_rows(&out.join("sweep_samples.csv"), &rows)
}

#[derive(Serialize)]
struct LambdaRow {
    lambda: f64,
    step: usize,
    split: String,
    accuracy: f64,
    mean_loss: f64,
    n: usize,
    ablation_flags: String,
    seed: u64,
    wall_clock_ms: u64,
}

impl LambdaRow {
    fn new(lambda: f64, m: MetricRow) -> Self {
        Self {
            lambda,
            step: m.step,
            split: m.split,
            accuracy: m.accuracy,
            mean_loss: m.mean_loss,
            n: m.n,
            ablation_flags: m.ablation_flags,
            seed: m.seed,
            wall_clock_ms: m.wall_clock_ms,
        }
    }
}

fn sweep_lambda<F: Real>(cfg: &RunConfig, data: &Path, backbone: Option<&Path>, split: &str, out: &Path) -> Result<()> {
    prepare_out(cfg, out, "sweep --over lambda")?;
    let vocab = load_vocab(data)?;
    let train_set = load_split(data, "train")?;
    let dev_set = load_split(data, "dev")?;
    let dataset = load_split(data, split)?;
    let mut rows = Vec::new();
    for &lambda in &cfg.sweep.lambdas {
        let model_config = ModelConfig { lambda, ..cfg.model.clone() };
        let parts = obtain_backbone::<F>(cfg, &vocab, backbone)?;
        let run = train_variant(&model_config, &cfg.train, &vocab, parts, &train_set, &dev_set)?;
        let report = evaluate(&run.model, &run.store, &vocab, &dataset, &cfg.eval)?;
        log::info!("lambda = {lambda}: accuracy {:.4}", report.accuracy);
        let metrics = test_row(run.best_step, split, &report, cfg.eval.samples, model_config.flags.label(), cfg.train.seed);
        rows.push(LambdaRow::new(lambda, metrics));
    }
    write_rows(&out.join("sweep_lambda.csv"), &rows)
}

fn run_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let g = &cfg.gradcheck;
    let settings = CheckSettings {
        step: g.step,
        tolerance: g.tolerance,
        samples_per_family: g.samples_per_family,
        seed: g.seed,
        ..CheckSettings::default()
    };
    let start = Instant::now();
    let report = gradient_check(g.seed, &settings, None)?;
    let seconds = start.elapsed().as_secs_f64();
    print!("{}", report.summary());
    println!("max relative error {:.3e} in {seconds:.2}s", report.max_relative_error());
    if let Some(out) = out {
        prepare_out(cfg, out, "gradcheck")?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::GradientCheck(format!("{} entries above tolerance {}", report.failures.len(), report.tolerance)))
    }
}
