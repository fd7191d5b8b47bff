//! `roleret` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime or check failure, 2 usage or configuration error.

use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use roleret::check::model_gradcheck;
use roleret::config::{render_key_values, RunConfig};
use roleret::data::{synth_corpus, Corpus};
use roleret::eval::{ablation_configs, ablation_report, evaluate, format_ablation, Axis, Direction};
use roleret::tensor::{BackwardFault, TensorError};
use roleret::train::{load_checkpoint, save_checkpoint, Trainer};
use roleret::Error;

/// Resolved configuration echo written by every run with an output directory.
const CONFIG_ECHO: &str = "config.txt";
const CHECKPOINT_FILE: &str = "model.ckpt";
const TRAIN_LOG: &str = "train.log";
const METRICS_FILE: &str = "metrics.txt";
const ABLATION_FILE: &str = "ablation.txt";

#[derive(Parser)]
#[command(name = "roleret", version, about = "Role-aware text-to-video retrieval: data synthesis, training, evaluation, ablations and gradient checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus an epoch log.
    Train(TrainArgs),
    /// Score a checkpoint (or a fresh model) on a corpus.
    Eval(EvalArgs),
    /// Score every combination of the chosen design axes.
    Ablate(AblateArgs),
    /// Compare backpropagated gradients of the full model against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Key = value configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for every random draw.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of clips.
    #[arg(long)]
    clips: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for the checkpoint, log and config echo.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
    /// Continue from a checkpoint; `epochs` is the total to reach.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Total number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("model").required(true).args(["ckpt", "random_init"])))]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to score.
    #[arg(long, value_name = "CKPT")]
    ckpt: Option<PathBuf>,
    /// Score a freshly initialized model built from the configuration.
    #[arg(long)]
    random_init: bool,
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// t2v, v2t or both.
    #[arg(long, default_value = "t2v")]
    direction: String,
    /// Restrict the gallery to the first N clips and their captions.
    #[arg(long, value_name = "N")]
    split_gallery: Option<usize>,
    /// Directory for the metrics file and config echo.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated axes: weighting, design, features.
    #[arg(long)]
    axes: String,
    /// Corpus directory; a synthetic corpus from the configuration when absent.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Epochs to train each row before scoring.
    #[arg(long)]
    epochs: Option<usize>,
    /// Directory for the table and config echo.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for the report and config echo.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
    /// Test fixture: break one backward rule so the check must fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// A message plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Display) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

fn runtime(message: impl Display) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Tensor(TensorError::PrecisionRefused(_)) => usage(e),
            _ => runtime(e),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Layers the config file, `--set` overrides and `--seed` over `base`.
fn resolve(mut base: RunConfig, args: &ConfigArgs) -> CliResult<RunConfig> {
    if let Some(path) = &args.config {
        base.apply_file(path).map_err(usage)?;
    }
    for kv in &args.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        base.set(key.trim(), value.trim()).map_err(usage)?;
    }
    if let Some(seed) = args.seed {
        base.set("seed", &seed.to_string()).map_err(usage)?;
    }
    Ok(base)
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
fn prepare_out(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        let occupied = !dir.is_dir() || fs::read_dir(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?.next().is_some();
        if occupied && !force {
            return Err(usage(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn echo_config(dir: &Path, run: &RunConfig) -> CliResult {
    write_file(&dir.join(CONFIG_ECHO), &run.to_text())
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let mut run = resolve(RunConfig::default(), &args.config)?;
    if let Some(clips) = args.clips {
        run.set("clips", &clips.to_string()).map_err(usage)?;
    }
    let out = synth_corpus(&run.synth)?;
    prepare_out(&args.out, args.force)?;
    out.corpus.save(&args.out)?;
    echo_config(&args.out, &run)?;
    println!(
        "wrote {} clips and {} captions to {}",
        out.corpus.clips.len(),
        out.corpus.captions.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let corpus = Corpus::load(&args.data)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            ckpt.config = resolve(ckpt.config.clone(), &args.config)?;
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::from_config(&resolve(RunConfig::default(), &args.config)?, &corpus)?,
    };
    if let Some(epochs) = args.epochs {
        trainer.run.set("epochs", &epochs.to_string()).map_err(usage)?;
    }
    trainer.run.train.validate()?;
    prepare_out(&args.out, args.force)?;
    echo_config(&args.out, &trainer.run)?;

    let log_path = args.out.join(TRAIN_LOG);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(|e| runtime(format!("{}: {e}", log_path.display())))?;
    let remaining = trainer.run.train.epochs.saturating_sub(trainer.epoch);
    if remaining == 0 {
        println!("checkpoint is already at epoch {}; nothing to do", trainer.epoch);
    }
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let mut log_error = None;
    let result = trainer.train(&corpus, remaining, Some(&ckpt_path), |entry| {
        println!("{entry}");
        if let Err(e) = writeln!(log, "{entry}") {
            log_error.get_or_insert(e);
        }
    });
    if let Some(e) = log_error {
        return Err(runtime(format!("{}: {e}", log_path.display())));
    }
    if let Err(e) = result {
        if matches!(e, Error::Diverged { .. }) {
            return Err(runtime(format!(
                "{e}; last good state (epoch {}) saved to {}",
                trainer.epoch,
                ckpt_path.display()
            )));
        }
        return Err(e.into());
    }
    save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    println!("saved epoch {} checkpoint to {}", trainer.epoch, ckpt_path.display());
    Ok(())
}

fn parse_directions(s: &str) -> CliResult<Vec<Direction>> {
    if s == "both" {
        return Ok(vec![Direction::TextToVideo, Direction::VideoToText]);
    }
    s.parse::<Direction>()
        .map(|d| vec![d])
        .map_err(|e| usage(format!("{e}; or `both`")))
}

fn short_name(d: Direction) -> &'static str {
    match d {
        Direction::TextToVideo => "t2v",
        Direction::VideoToText => "v2t",
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let directions = parse_directions(&args.direction)?;
    let mut corpus = Corpus::load(&args.data)?;
    if let Some(n) = args.split_gallery {
        corpus = corpus.first_clips(n)?;
    }
    let trainer = match &args.ckpt {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            ckpt.config = resolve(ckpt.config.clone(), &args.config)?;
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::from_config(&resolve(RunConfig::default(), &args.config)?, &corpus)?,
    };
    let mut pairs = Vec::new();
    for d in directions {
        let report = evaluate(&trainer.model, &corpus, d)?;
        println!("{report}");
        for (k, v) in report.key_values() {
            if k != "direction" {
                pairs.push((format!("{}.{k}", short_name(d)), v));
            }
        }
    }
    if let Some(out) = &args.out {
        prepare_out(out, args.force)?;
        echo_config(out, &trainer.run)?;
        let refs: Vec<(&str, String)> = pairs.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        write_file(&out.join(METRICS_FILE), &render_key_values(&refs))?;
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> CliResult {
    let axes = Axis::parse_list(&args.axes)?;
    let mut base = resolve(RunConfig::default(), &args.config)?;
    if let Some(epochs) = args.epochs {
        base.set("ablate_epochs", &epochs.to_string()).map_err(usage)?;
    }
    let corpus = match &args.data {
        Some(dir) => Corpus::load(dir)?,
        None => synth_corpus(&base.synth)?.corpus,
    };
    base.adopt_corpus(&corpus.manifest);
    let rows = ablation_report(&corpus, &ablation_configs(&base, &axes))?;
    let table = format_ablation(&rows);
    print!("{table}");
    if let Some(out) = &args.out {
        prepare_out(out, args.force)?;
        echo_config(out, &base)?;
        write_file(&out.join(ABLATION_FILE), &table)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    let cfg = resolve(RunConfig::gradcheck_defaults(), &args.config)?;
    let fault = args.inject_fault.then_some(BackwardFault::Tanh);
    let report = model_gradcheck(&cfg, fault)?;
    let mut text = String::new();
    for p in &report.params {
        let flag = if p.max_rel_error > report.tolerance { "FAIL" } else { "ok" };
        text.push_str(&format!("{flag:<4} {:<40} {:>6} {:.3e}\n", p.name, p.entries, p.max_rel_error));
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    text.push_str(&format!(
        "gradcheck {verdict}: {} parameters, {} entries, max relative error {:.3e} (tolerance {:e}), {} failing entries\n",
        report.params.len(),
        report.entries_checked(),
        report.max_rel_error(),
        report.tolerance,
        report.failures.len()
    ));
    print!("{text}");
    if let Some(out) = &args.out {
        prepare_out(out, args.force)?;
        echo_config(out, &cfg)?;
        write_file(&out.join("gradcheck.txt"), &text)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(runtime("gradient check failed"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
