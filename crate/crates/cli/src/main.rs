mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use slu_core::corpus::{load_labeled, load_unlabeled, Dataset, UnlabeledCorpus};
use slu_core::embeddings::WordVectors;
use slu_core::lm::{split_heldout, train_bilm, BiLm};
use slu_core::metrics::{evaluate, write_predictions};
use slu_core::model::SluModel;
use slu_core::report;
use slu_core::train::predict_pairs;
use slu_core::transfer::{self, Condition, PipelineSpec};

use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "slu", version, about = "Joint intent classification and entity tagging with LM-based transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate inputs and print the effective settings without running
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalSplit {
    Dev,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the bidirectional LM on unlabeled text
    PretrainLm {
        #[command(flatten)]
        common: Common,
        /// Continue training from this LM checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train one condition and evaluate it on the test split
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a model checkpoint on a split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint (default: <out>/model.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Low-resource sweep over sizes and seeds for several conditions
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild summary tables and plots from saved run records
    Report {
        #[command(flatten)]
        common: Common,
        /// Run records (default: <out>/records.jsonl)
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// Bad usage, config or input files (exit 2).
    Usage(anyhow::Error),
    /// Failure while running (exit 3).
    Runtime(anyhow::Error),
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Runtime errors from a run, except those that mean the inputs were unusable.
fn classify(e: slu_core::Error) -> Failure {
    use slu_core::Error as E;
    match e {
        E::Format { .. } | E::Validation(_) | E::InvalidArgument(_) | E::Checkpoint(_) => usage(e),
        other => runtime(other),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(usage)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.lm.seed = cfg.seed;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Prints the effective settings and, unless dry-running, stores them next
/// to the outputs.
fn dump_settings(cfg: &ExperimentConfig, command: &str, dry_run: bool) -> CliResult<()> {
    let text = format!("# effective settings for `{command}`\n{}", cfg.to_toml());
    eprintln!("{text}");
    if !dry_run {
        fs::create_dir_all(&cfg.out_dir)
            .with_context(|| format!("creating {}", cfg.out_dir.display()))
            .map_err(runtime)?;
        write(&cfg.out_dir.join(format!("{command}.settings.toml")), &text)?;
    }
    Ok(())
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| usage(anyhow!("the config does not name {what}")))?;
    if !p.exists() {
        return Err(usage(anyhow!("{what} `{}` does not exist", p.display())));
    }
    Ok(p)
}

fn load_dataset(dir: &Path, cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let loaded = load_labeled(dir, cfg.data.format, None)
        .with_context(|| format!("loading {}", dir.display()))
        .map_err(usage)?;
    if loaded.repairs > 0 {
        log::warn!("{}: repaired {} orphan I- tags", dir.display(), loaded.repairs);
    }
    Ok(loaded.dataset)
}

fn load_lm(path: &Path) -> CliResult<BiLm> {
    BiLm::load(path)
        .with_context(|| format!("loading LM checkpoint {}", path.display()))
        .map_err(usage)
}

/// The LM pretraining text and its held-out part.
fn lm_text(cfg: &ExperimentConfig) -> CliResult<(UnlabeledCorpus, UnlabeledCorpus)> {
    let pool = if !cfg.data.unlabeled.is_empty() {
        for p in &cfg.data.unlabeled {
            if !p.exists() {
                return Err(usage(anyhow!("unlabeled file `{}` does not exist", p.display())));
            }
        }
        load_unlabeled(&cfg.data.unlabeled).map_err(usage)?
    } else {
        let mut sets = Vec::new();
        for dir in cfg.data.target.iter().chain(&cfg.data.source) {
            sets.push(load_dataset(dir, cfg)?);
        }
        if sets.is_empty() {
            return Err(usage(anyhow!("no pretraining text: set data.unlabeled or data.target")));
        }
        UnlabeledCorpus::from_sentences(sets.iter().flat_map(|d| d.train_text()))
    };
    match &cfg.data.lm_heldout {
        Some(p) => {
            let held = load_unlabeled(&[p]).map_err(usage)?;
            Ok((pool, held))
        }
        None => Ok(split_heldout(&pool, cfg.data.heldout_fraction, cfg.seed)),
    }
}

fn pretrain_lm(common: &Common, resume: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(common)?;
    dump_settings(&cfg, "pretrain-lm", common.dry_run)?;
    let (train, heldout) = lm_text(&cfg)?;
    let resume = resume.map(load_lm).transpose()?;
    eprintln!(
        "pretraining text: {} sentences ({} tokens), held-out: {} sentences",
        train.len(),
        train.token_count,
        heldout.len()
    );
    if common.dry_run {
        return Ok(());
    }
    let out = train_bilm(&train, &cfg.lm, &heldout, resume).map_err(classify)?;
    let ckpt = cfg.out_dir.join("lm.ckpt");
    out.best.save(&ckpt).map_err(runtime)?;
    let mut log = String::from("epoch,train_loss,heldout_perplexity\n");
    for e in &out.history {
        let loss = e.train_loss.map(|l| l.to_string()).unwrap_or_default();
        log.push_str(&format!("{},{},{}\n", e.epoch, loss, e.heldout_perplexity));
    }
    write(&cfg.out_dir.join("lm_history.csv"), &log)?;
    let report = out.best.perplexity(&heldout, "heldout").map_err(runtime)?;
    write(
        &cfg.out_dir.join("lm_perplexity.json"),
        &serde_json::to_string_pretty(&report).map_err(runtime)?,
    )?;
    println!(
        "held-out perplexity {:.3} (epoch {}), checkpoint {}",
        report.perplexity,
        out.best.meta.best_epoch,
        ckpt.display()
    );
    Ok(())
}

/// Pipeline spec for `condition` on the full target data.
fn build_spec(cfg: &ExperimentConfig, condition: Condition) -> CliResult<PipelineSpec> {
    let target = Arc::new(load_dataset(require(&cfg.data.target, "a target dataset")?, cfg)?);
    let source = if condition.is_st() {
        Some(Arc::new(load_dataset(require(&cfg.data.source, "a source dataset")?, cfg)?))
    } else {
        None
    };
    let lm = if condition.needs_lm() {
        Some(Arc::new(load_lm(require(&cfg.data.lm_checkpoint, "an LM checkpoint")?)?))
    } else {
        None
    };
    let word_vectors = if condition.base() == Condition::Pretrained {
        let p = require(&cfg.data.word_vectors, "word vectors")?;
        Some(Arc::new(WordVectors::load(p).map_err(usage)?))
    } else {
        None
    };
    let (schedule, source_schedule) = cfg.schedule.resolve(condition, cfg.optimizer.lr);
    let spec = PipelineSpec {
        condition,
        target,
        source,
        lm,
        word_vectors,
        slu: cfg.model.clone(),
        schedule,
        source_schedule,
        train: cfg.train_options(),
        seed: cfg.seed,
    };
    spec.validate().map_err(usage)?;
    Ok(spec)
}

fn train(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    dump_settings(&cfg, "train", common.dry_run)?;
    let spec = build_spec(&cfg, cfg.condition)?;
    if common.dry_run {
        return Ok(());
    }
    let mut out = transfer::run(&spec).map_err(classify)?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    out.model.save(&ckpt).map_err(runtime)?;
    out.record.checkpoint = Some(ckpt.display().to_string());
    write(
        &cfg.out_dir.join("record.json"),
        &serde_json::to_string_pretty(&out.record).map_err(runtime)?,
    )?;
    let pairs = predict_pairs(&out.model, &spec.target.test).map_err(runtime)?;
    let items: Vec<_> = spec.target.test.iter().map(|u| u.tokens.clone()).zip(pairs).collect();
    write_predictions(&cfg.out_dir.join("predictions-test.tsv"), &items).map_err(runtime)?;
    println!("{} on {}: test {}", spec.condition, spec.target.name, out.record.test);
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&Path>, split: EvalSplit) -> CliResult<()> {
    let cfg = load_config(common)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    if !ckpt.exists() {
        return Err(usage(anyhow!("model checkpoint `{}` does not exist", ckpt.display())));
    }
    let model = SluModel::load(&ckpt)
        .with_context(|| format!("loading model {}", ckpt.display()))
        .map_err(usage)?;
    let dir = require(&cfg.data.target, "a target dataset")?;
    let data = load_labeled(dir, cfg.data.format, Some(&model.label_space))
        .with_context(|| format!("{} does not fit the model's label space", dir.display()))
        .map_err(usage)?
        .dataset;
    if common.dry_run {
        return Ok(());
    }
    let (name, utts) = match split {
        EvalSplit::Dev => ("dev", &data.dev),
        EvalSplit::Test => ("test", &data.test),
    };
    let pairs = predict_pairs(&model, utts).map_err(classify)?;
    let metrics = evaluate(&pairs).map_err(classify)?;
    fs::create_dir_all(&cfg.out_dir).map_err(runtime)?;
    let items: Vec<_> = utts.iter().map(|u| u.tokens.clone()).zip(pairs).collect();
    write_predictions(&cfg.out_dir.join(format!("predictions-{name}.tsv")), &items).map_err(runtime)?;
    write(
        &cfg.out_dir.join(format!("metrics-{name}.json")),
        &serde_json::to_string_pretty(&metrics).map_err(runtime)?,
    )?;
    println!("{name}: {metrics}");
    Ok(())
}

fn write_summary(out_dir: &Path, result: &transfer::SweepResult) -> CliResult<()> {
    fs::create_dir_all(out_dir).map_err(runtime)?;
    write(&out_dir.join("summary.csv"), &report::summary_csv(&result.records))?;
    let table = report::curve_table(&result.curves, &result.comparisons);
    write(&out_dir.join("curves.csv"), &table)?;
    write(
        &out_dir.join("sweep.json"),
        &serde_json::to_string_pretty(&serde_json::json!({
            "curves": result.curves,
            "comparisons": result.comparisons,
            "trends": result.trends,
        }))
        .map_err(runtime)?,
    )?;
    report::plot_learning_curves(&out_dir.join("learning_curve.svg"), &result.curves, &result.comparisons)
        .map_err(runtime)?;
    println!("{table}");
    Ok(())
}

fn sweep(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    if cfg.conditions.len() < 2 {
        return Err(usage(anyhow!("a sweep compares at least two conditions")));
    }
    dump_settings(&cfg, "sweep", common.dry_run)?;
    let specs = cfg
        .conditions
        .iter()
        .map(|&c| build_spec(&cfg, c))
        .collect::<CliResult<Vec<_>>>()?;
    if common.dry_run {
        return Ok(());
    }
    let result = transfer::low_resource_sweep(&specs, &cfg.sweep.sizes, &cfg.sweep.seeds, cfg.sweep.parallelism)
        .map_err(classify)?;
    report::write_records(&cfg.out_dir.join("records.jsonl"), &result.records).map_err(runtime)?;
    write_summary(&cfg.out_dir, &result)
}

fn report_cmd(common: &Common, records: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(common)?;
    let path = records
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("records.jsonl"));
    if !path.exists() {
        return Err(usage(anyhow!("run records `{}` do not exist", path.display())));
    }
    let recs = report::read_records(&path).map_err(usage)?;
    if recs.is_empty() {
        return Err(usage(anyhow!("`{}` holds no run records", path.display())));
    }
    if common.dry_run {
        return Ok(());
    }
    write_summary(&cfg.out_dir, &transfer::summarize(recs))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::PretrainLm { common, resume } => pretrain_lm(common, resume.as_deref()),
        Command::Train { common } => train(common),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => eval(common, checkpoint.as_deref(), *split),
        Command::Sweep { common } => sweep(common),
        Command::Report { common, records } => report_cmd(common, records.as_deref()),
    };
    match result {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
