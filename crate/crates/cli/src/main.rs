//! `ifa`: generate synthetic data, train and evaluate models, run the
//! image-shuffle and fusion-ablation experiments, and dump attention traces.
//!
//! Exit status: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime failures.

use clap::{Parser, Subcommand, ValueEnum};
use ifa_core::encoder::EncoderConfig;
use ifa_core::experiment::{
    read_splits, trace_samples, write_splits, Condition, ExperimentConfig, Runner, TraceSummary, Variant,
};
use ifa_core::synthetic::{generate, shuffle_images, Dataset, DatasetSpec};
use ifa_core::train::{evaluate, load_checkpoint, save_checkpoint, EpochRecord, Metrics, TrainConfig};
use ifa_core::Error;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "ifa", version, about = "Dual-stream multimodal relation extraction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/dev/test JSONL splits plus spec.json.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Dataset spec JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write its best-dev checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config JSON (encoder + train settings).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = VariantArg::IfaObjects)]
        variant: VariantArg,
        /// Train on image-shuffled training data.
        #[arg(long)]
        shuffle_train: bool,
    },
    /// Evaluate a checkpoint on one split and write a metrics file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Evaluate on image-shuffled data with this permutation seed.
        #[arg(long)]
        shuffle_seed: Option<u64>,
    },
    /// Text-only and IFA models under standard / shuffled-train / shuffled-test.
    ShuffleExp {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config JSON, or a previous report to re-run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds; overrides the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Vanilla vs w/o text attention vs w/ visual objects.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Per-layer, per-head attention CSVs and the alignment hit rate.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated sample ids; defaults to the whole split.
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<u64>>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also render SVG heatmaps.
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    TextOnly,
    IfaObjects,
    Vanilla,
    WoTextAttn,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::TextOnly => Variant::TextOnly,
            VariantArg::IfaObjects => Variant::IfaObjects,
            VariantArg::Vanilla => Variant::Vanilla,
            VariantArg::WoTextAttn => Variant::WoTextAttn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Dev => "dev",
            SplitArg::Test => "test",
        }
    }
}

type CliResult<T> = Result<T, Error>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData { out, config, seed } => gen_data(&out, config.as_deref(), seed),
        Command::Train { data, out, config, seed, variant, shuffle_train } => {
            train_cmd(&data, &out, config.as_deref(), seed, variant.into(), shuffle_train)
        }
        Command::Eval { data, checkpoint, out, split, shuffle_seed } => eval_cmd(&data, &checkpoint, &out, split, shuffle_seed),
        Command::ShuffleExp { data, out, config, seeds } => experiment(&data, &out, config.as_deref(), seeds, true),
        Command::Ablation { data, out, config, seeds } => experiment(&data, &out, config.as_deref(), seeds, false),
        Command::Trace { checkpoint, data, out, ids, split, svg } => trace_cmd(&checkpoint, &data, &out, ids, split, svg),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {}", path.display(), e)))
}

fn load_data(dir: &Path) -> CliResult<(DatasetSpec, ifa_core::synthetic::Splits)> {
    if !dir.is_dir() {
        return Err(Error::Input(format!("data directory {} does not exist", dir.display())));
    }
    read_splits(dir)
}

fn read_checkpoint(path: &Path) -> CliResult<ifa_core::encoder::IfaModel> {
    if !path.is_file() {
        return Err(Error::Input(format!("checkpoint {} does not exist", path.display())));
    }
    load_checkpoint(path)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn experiment_config(path: Option<&Path>, seeds: Option<Vec<u64>>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_json(&read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seeds {
        if s.is_empty() {
            return Err(Error::Config { field: "seeds".into(), reason: "need at least one seed".into() });
        }
        cfg.seeds = s;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gen_data(out: &Path, config: Option<&Path>, seed: Option<u64>) -> CliResult<()> {
    let mut spec = match config {
        Some(p) => DatasetSpec::from_json(&read_text(p)?)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let splits = generate(&spec)?;
    write_splits(out, &spec, &splits)?;
    eprintln!(
        "wrote {} / {} / {} samples to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    variant: Variant,
    shuffled_train: bool,
    dataset: &'a DatasetSpec,
    encoder: &'a EncoderConfig,
    train: &'a TrainConfig,
    shuffle_seed: u64,
    best_epoch: usize,
    history: &'a [EpochRecord],
    wall_clock_seconds: f64,
}

fn train_cmd(data: &Path, out: &Path, config: Option<&Path>, seed: u64, variant: Variant, shuffle_train: bool) -> CliResult<()> {
    let (spec, splits) = load_data(data)?;
    let cfg = experiment_config(config, Some(vec![seed]))?;
    let start = Instant::now();
    let mut runner = Runner::new(spec.clone(), splits, cfg.clone())?;
    runner.on_train = Some(Box::new(|what| eprintln!("training {}", what)));
    let condition = if shuffle_train { Condition::ShuffleTrain } else { Condition::Standard };
    let (arm, _) = runner.run_arm(variant, condition, seed)?;
    let model = runner.model(variant, condition, seed)?;
    ensure_parent(out)?;
    save_checkpoint(model, out)?;
    let record = TrainRecord {
        variant,
        shuffled_train: shuffle_train,
        dataset: &spec,
        encoder: &arm.encoder,
        train: &arm.train,
        shuffle_seed: cfg.shuffle_seed,
        best_epoch: arm.best_epoch,
        history: &arm.history,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&out.with_extension("history.json"), &record)?;
    let best = &arm.history[arm.best_epoch].dev;
    eprintln!("best epoch {}: dev micro-F1 {:.4}, accuracy {:.4}", arm.best_epoch, best.micro_f1, best.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    metrics: &'a Metrics,
    split: &'a str,
    checkpoint: String,
    config: &'a EncoderConfig,
    model_seed: u64,
    dataset_seed: u64,
    shuffle_seed: Option<u64>,
}

fn split_of(splits: ifa_core::synthetic::Splits, split: SplitArg) -> Dataset {
    match split {
        SplitArg::Train => splits.train,
        SplitArg::Dev => splits.dev,
        SplitArg::Test => splits.test,
    }
}

fn eval_cmd(data: &Path, checkpoint: &Path, out: &Path, split: SplitArg, shuffle_seed: Option<u64>) -> CliResult<()> {
    let (spec, splits) = load_data(data)?;
    let model = read_checkpoint(checkpoint)?;
    let mut set = split_of(splits, split);
    if let Some(s) = shuffle_seed {
        set = shuffle_images(&set, s);
    }
    let metrics = evaluate(&model, &set)?;
    write_json(
        out,
        &MetricsFile {
            metrics: &metrics,
            split: split.name(),
            checkpoint: checkpoint.display().to_string(),
            config: model.config(),
            model_seed: model.config().seed,
            dataset_seed: spec.seed,
            shuffle_seed,
        },
    )?;
    eprintln!("{}: micro-F1 {:.4}, accuracy {:.4}", split.name(), metrics.micro_f1, metrics.accuracy);
    Ok(())
}

fn experiment(data: &Path, out: &Path, config: Option<&Path>, seeds: Option<Vec<u64>>, shuffle: bool) -> CliResult<()> {
    let (spec, splits) = load_data(data)?;
    let cfg = experiment_config(config, seeds)?;
    let mut runner = Runner::new(spec, splits, cfg)?;
    runner.on_train = Some(Box::new(|what| eprintln!("training {}", what)));
    let dir = data.display().to_string();
    let run = if shuffle { runner.shuffle_experiment(&dir)? } else { runner.ablation(&dir)? };
    ensure_parent(out)?;
    std::fs::write(out, run.report.to_json()?)?;
    std::fs::write(out.with_extension("timings.json"), run.timings.to_json()?)?;
    let report = run.report;
    for row in &report.summary {
        eprintln!(
            "{:<24} {:<14} micro-F1 {:.4}  accuracy {:.4}",
            row.variant.label(),
            format!("{:?}", row.condition),
            row.mean_micro_f1,
            row.mean_accuracy
        );
    }
    Ok(())
}

fn trace_cmd(checkpoint: &Path, data: &Path, out: &Path, ids: Option<Vec<u64>>, split: SplitArg, svg: bool) -> CliResult<()> {
    let model = read_checkpoint(checkpoint)?;
    let (_, splits) = load_data(data)?;
    let set = split_of(splits, split);
    let chosen = match ids {
        None => set,
        Some(ids) => {
            let mut picked = Vec::with_capacity(ids.len());
            for id in ids {
                let s = set
                    .get(id)
                    .ok_or_else(|| Error::Input(format!("sample id {} not in the {} split", id, split.name())))?;
                picked.push(s.clone());
            }
            Dataset::new(picked)
        }
    };
    let summary: TraceSummary = trace_samples(&model, &chosen, Some(out), svg)?;
    write_json(&out.join("trace_summary.json"), &summary)?;
    eprintln!(
        "alignment hit rate {:.4} over {} samples (null {:.4}, p = {:.3e})",
        summary.hit_rate, summary.n_scored, summary.null_rate, summary.p_value
    );
    Ok(())
}
