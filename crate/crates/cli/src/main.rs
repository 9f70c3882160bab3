//! `tcsm`: data generation, training, evaluation, inference and experiments.
//!
//! Every failure prints exactly one line to stderr of the form
//! `error[CODE]: message` and exits with a nonzero status (2 for usage
//! errors, 1 otherwise).

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcsm::checkpoint::{self, Checkpoint};
use tcsm::data;
use tcsm::experiment::{self, DataSource, ExperimentConfig, Variant};
use tcsm::metrics;
use tcsm::objective::ScheduleConfig;
use tcsm::trainer::{self, Trainer};

#[derive(Debug, Parser)]
#[command(name = "tcsm", version, about = "Transformation-consistent semi-supervised lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML configuration file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic training pool and test set in the directory format.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Write masks for only this many randomly chosen training images.
        #[arg(long)]
        labeled: Option<usize>,
    },
    /// Train one variant and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long)]
        labeled: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict masks for a directory of images.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding the images (or an `images/` subdirectory).
        #[arg(long)]
        input: PathBuf,
    },
    /// Train and evaluate every (budget, seed, variant) combination.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        labeled: Option<usize>,
    },
    /// Supervised-only versus full method over the labeled budgets.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a results directory as markdown plus plot series.
    Report {
        /// Directory containing results.csv (never modified).
        results: PathBuf,
        /// Where to write summary.md and the series files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct CliError {
    code: &'static str,
    message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<tcsm::Error> for CliError {
    fn from(e: tcsm::Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("E_IO", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("E_JSON", e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid usage")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.message.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error[{}]: {message}", e.code);
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::SynthData { common, labeled } => synth_data(&common, labeled),
        Command::Train {
            common,
            variant,
            labeled,
            resume,
        } => train(&common, variant, labeled, resume),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::Infer {
            common,
            checkpoint,
            input,
        } => infer(&common, &checkpoint, &input),
        Command::Experiment {
            common,
            variant,
            labeled,
        } => run_experiment(&common, variant, labeled),
        Command::Sweep { common } => sweep(&common),
        Command::Report { results, out } => report(&results, out.as_deref()),
    }
}

/// Reads a TOML configuration; a missing `train.schedule.ramp_epochs`
/// follows the configured epoch count.
fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new("E_IO", format!("{}: {e}", path.display())))?;
    let bad = |e: toml::de::Error| CliError::new("E_CONFIG", format!("{}: {}", path.display(), e.message()));
    let table: toml::Table = text.parse().map_err(bad)?;
    let ramp_given = table
        .get("train")
        .and_then(|t| t.get("schedule"))
        .and_then(|s| s.get("ramp_epochs"))
        .is_some();
    let mut cfg: ExperimentConfig = table.try_into().map_err(bad)?;
    if !ramp_given {
        cfg.train.schedule.ramp_epochs = ScheduleConfig::for_epochs(cfg.train.epochs).ramp_epochs;
    }
    Ok(cfg)
}

fn config_with_overrides(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.overwrite |= common.overwrite;
    if cfg.seeds.is_empty() {
        return Err(CliError::new("E_CONFIG", "at least one seed is required"));
    }
    Ok(cfg)
}

fn required_out(common: &Common) -> CliResult<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| CliError::new("E_USAGE", "--out <dir> is required for this command"))
}

fn emit(value: &serde_json::Value) {
    println!("{value}");
}

fn synth_data(common: &Common, labeled: Option<usize>) -> CliResult<()> {
    let mut cfg = config_with_overrides(common)?;
    let out = required_out(common)?;
    if let (Some(seed), DataSource::Synthetic { data_seed, .. }) = (common.seed, &mut cfg.data) {
        *data_seed = seed;
    }
    if !matches!(cfg.data, DataSource::Synthetic { .. }) {
        return Err(CliError::new("E_CONFIG", "synth-data needs a synthetic data source"));
    }
    let (train_dir, test_dir) = (out.join("train"), out.join("test"));
    for dir in [&train_dir, &test_dir] {
        if dir.exists() {
            if !common.overwrite {
                return Err(tcsm::Error::Exists(dir.clone()).into());
            }
            fs::remove_dir_all(dir)?;
        }
    }
    let (pool, test) = experiment::prepare_data(&cfg.data, cfg.model.size)?;
    let pool = match labeled {
        Some(m) => {
            let split = experiment::split_for(&pool, m, cfg.seeds[0])?;
            split.iter().cloned().collect()
        }
        None => pool,
    };
    data::write_directory(&pool, &train_dir)?;
    data::write_directory(&test, &test_dir)?;
    emit(&serde_json::json!({
        "train": train_dir,
        "test": test_dir,
        "train_samples": pool.len(),
        "train_masks": pool.iter().filter(|s| s.mask.is_some()).count(),
        "test_samples": test.len(),
    }));
    Ok(())
}

fn train(common: &Common, variant: Variant, labeled: Option<usize>, resume: bool) -> CliResult<()> {
    let cfg = config_with_overrides(common)?;
    let out = required_out(common)?;
    let seed = cfg.seeds[0];
    let ckpt_path = out.join("model.ckpt");
    let progress_path = out.join("progress.jsonl");
    if ckpt_path.exists() && !resume && !common.overwrite {
        return Err(tcsm::Error::Exists(ckpt_path).into());
    }
    fs::create_dir_all(&out)?;

    let (pool, test) = experiment::prepare_data(&cfg.data, cfg.model.size)?;
    let budget = labeled.or_else(|| cfg.labeled.first().copied());
    let split = experiment::split_pool(&pool, budget, seed)?;
    let train_cfg = experiment::variant_train_config(&cfg.train, variant, seed, &split, cfg.match_iterations);
    let data = if variant.uses_unlabeled() {
        split.clone()
    } else {
        split.labeled_only()
    };

    let mut trainer = if resume && ckpt_path.exists() {
        let ck = checkpoint::load_checkpoint(&ckpt_path)?;
        if ck.train_config != train_cfg || ck.model.config() != &cfg.model {
            return Err(CliError::new(
                "E_CONFIG",
                "checkpoint was written with a different configuration",
            ));
        }
        Trainer::resume(ck.model, ck.velocity, ck.epoch, ck.train_config, data.len())?
    } else {
        let model = trainer::init_model(&cfg.model, seed)?;
        let _ = fs::remove_file(&progress_path);
        Trainer::new(model, train_cfg, data.len())?
    };
    let mut progress = OpenOptions::new().create(true).append(true).open(&progress_path)?;
    while trainer.epoch() < trainer.config().epochs {
        let record = trainer.run_epoch(&data, None)?;
        writeln!(progress, "{}", serde_json::to_string(&record)?)?;
        progress.flush()?;
        checkpoint::save_checkpoint(
            &Checkpoint {
                model: trainer.model().clone(),
                velocity: trainer.velocity().to_vec(),
                epoch: trainer.epoch(),
                train_config: trainer.config().clone(),
            },
            &ckpt_path,
        )?;
    }
    let report = trainer::evaluate(trainer.model(), &test)?;
    let summary = serde_json::json!({
        "variant": variant,
        "labeled": data.labeled.len(),
        "unlabeled": data.unlabeled.len(),
        "seed": seed,
        "epochs": trainer.epoch(),
        "checkpoint": ckpt_path,
        "test": report,
    });
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    emit(&summary);
    Ok(())
}

fn eval(common: &Common, ckpt: &Path) -> CliResult<()> {
    let cfg = config_with_overrides(common)?;
    let ck = checkpoint::load_checkpoint(ckpt)?;
    let (_, test) = experiment::prepare_data(&cfg.data, ck.model.config().size)?;
    let report = trainer::evaluate(&ck.model, &test)?;
    let value = serde_json::json!({ "checkpoint": ckpt, "test": report });
    if let Some(out) = &common.out {
        let path = out.join("eval.json");
        if path.exists() && !common.overwrite {
            return Err(tcsm::Error::Exists(path).into());
        }
        fs::create_dir_all(out)?;
        fs::write(path, serde_json::to_string_pretty(&value)?)?;
    }
    emit(&value);
    Ok(())
}

fn infer(common: &Common, ckpt: &Path, input: &Path) -> CliResult<()> {
    let out = required_out(common)?;
    let ck = checkpoint::load_checkpoint(ckpt)?;
    let images_dir = if input.join("images").is_dir() {
        input.join("images")
    } else {
        input.to_path_buf()
    };
    if !images_dir.is_dir() {
        return Err(CliError::new(
            "E_IO",
            format!("{} is not a directory", images_dir.display()),
        ));
    }
    let masks_dir = out.join("masks");
    if masks_dir.exists() && !common.overwrite {
        return Err(tcsm::Error::Exists(masks_dir).into());
    }
    fs::create_dir_all(&masks_dir)?;
    let samples = data::load_directory(&images_dir, None, ck.model.config().size)?;
    for s in &samples {
        let mask = metrics::infer(&ck.model, &s.image)?;
        data::save_mask(&mask, &masks_dir.join(format!("{}.png", s.id)))?;
    }
    emit(&serde_json::json!({ "masks": masks_dir, "count": samples.len() }));
    Ok(())
}

fn run_experiment(common: &Common, variant: Option<Variant>, labeled: Option<usize>) -> CliResult<()> {
    let mut cfg = config_with_overrides(common)?;
    if let Some(v) = variant {
        cfg.variants = vec![v];
    }
    if let Some(m) = labeled {
        cfg.labeled = vec![m];
    }
    let rows = experiment::run_experiment(&cfg)?;
    eprintln!("{} result rows written to {}", rows.len(), cfg.out_dir.display());
    print!("{}", experiment::report(&cfg.out_dir)?.markdown);
    Ok(())
}

fn sweep(common: &Common) -> CliResult<()> {
    let cfg = config_with_overrides(common)?;
    let points = experiment::sweep_labeled_budget(&cfg)?;
    for p in points {
        emit(&serde_json::to_value(p)?);
    }
    Ok(())
}

fn report(results: &Path, out: Option<&Path>) -> CliResult<()> {
    let rep = experiment::report(results)?;
    if let Some(out) = out {
        rep.write_to(out)?;
    }
    print!("{}", rep.markdown);
    Ok(())
}
