//! Command-line front end: dataset synthesis, training, evaluation,
//! gradient verification, attention export, and complexity estimation.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 verification failure,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coact::config::{ModelConfig, RunConfig};
use coact::error::{Error, Result};
use coact::macc::macc_estimate;
use coact::model::{export_attention_artifacts, gradcheck_model, load_model, save_model};
use coact::synth::{synth_dataset, Dataset};
use coact::tensor::Tensor;
use coact::train::{evaluate_model, Trainer};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "coact", version, about = "Concurrent multi-label sequence recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from the config's synth section.
    Synth(SynthArgs),
    /// Train a model; writes params.json, metrics.json and train_log.csv.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset directory.
    Eval(EvalArgs),
    /// Check reverse-mode gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Export attention artifacts for one sample.
    Export(ExportArgs),
    /// Print the analytic multiply-accumulate counts for a config.
    Macc(MaccArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON config with a "synth" section.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generator seed (overrides the config's model.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (overrides the config's data_dir).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's model.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's model.epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// params.json written by `train`.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Overrides the threshold stored in the params file.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write the metrics JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional config; defaults to the built-in tiny configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Self-test: corrupt this group's analytic gradient; the check must
    /// then fail.
    #[arg(long)]
    corrupt_group: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    params: PathBuf,
    /// Sample feature map (TNSR file).
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MaccArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Export(args) => cmd_export(args),
        Command::Macc(args) => cmd_macc(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 1 })
        }
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn resolve_dir(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(format!("no {what} given (flag or config)")))
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    let out = resolve_dir(args.out, &cfg.out_dir, "output directory")?;
    // Destination paths are transient and stay out of the echoed config so
    // identical (config, seed) runs produce byte-identical directories.
    cfg.out_dir = None;
    cfg.data_dir = None;
    let spec = cfg
        .synth
        .clone()
        .ok_or_else(|| Error::config("config has no synth section"))?;
    prepare_out_dir(&out, args.force)?;
    let dataset = synth_dataset(&spec, cfg.model.seed)?;
    dataset.save_dir(&out)?;
    cfg.echo_into(&out)?;
    println!(
        "wrote {} samples ({} activities) to {}",
        dataset.len(),
        dataset.activities(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.model.epochs = epochs;
    }
    let data_dir = resolve_dir(args.data, &cfg.data_dir, "dataset directory")?;
    let out = resolve_dir(args.out, &cfg.out_dir, "output directory")?;
    cfg.data_dir = None;
    cfg.out_dir = None;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let data = Dataset::load_dir(&data_dir)?;
    let mut trainer = Trainer::new(&cfg.model, &data, cfg.augment.clone())?;
    let mut log = String::from("epoch,lr,loss\n");
    let stats = trainer.run_epochs(&data, cfg.model.epochs)?;
    for s in &stats {
        log.push_str(&format!("{},{},{}\n", s.epoch, s.lr, s.loss));
        if s.epoch % 10 == 0 || s.epoch + 1 == cfg.model.epochs {
            println!("epoch {:>4}  lr {:<9}  loss {:.6}", s.epoch, s.lr, s.loss);
        }
    }
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;

    save_model(
        &out.join("params.json"),
        &cfg.model,
        &trainer.params,
        &trainer.masks,
    )?;
    let metrics = trainer.evaluate(&data, cfg.model.threshold)?;
    let metrics_path = out.join("metrics.json");
    fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&metrics).expect("metrics serialize"),
    )
    .map_err(|e| Error::io(&metrics_path, e))?;
    cfg.echo_into(&out)?;
    println!(
        "trained {} epochs; train micro-F1 {:.4}; artifacts in {}",
        stats.len(),
        metrics.f1_micro,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let (config, params, masks) = load_model(&args.params)?;
    let data = Dataset::load_dir(&args.data)?;
    let threshold = args.threshold.unwrap_or(config.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let metrics = evaluate_model(&config, &params, &masks, &data, threshold)?;
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    println!("{text}");
    if let Some(path) = args.out {
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let model = match &args.config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelConfig::tiny(),
    };
    let report = gradcheck_model(
        &model,
        args.seed,
        GRADCHECK_TOLERANCE,
        args.corrupt_group.as_deref(),
    )?;
    for g in &report.groups {
        println!(
            "group {:<20} max_rel_err {:.3e}  {}",
            g.name,
            g.max_rel_err,
            if g.pass { "PASS" } else { "FAIL" }
        );
    }
    if report.pass {
        println!(
            "gradcheck PASS ({} groups, tolerance {:.0e})",
            report.groups.len(),
            report.tolerance
        );
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAIL (tolerance {:.0e})", report.tolerance);
        Ok(ExitCode::from(2))
    }
}

fn cmd_export(args: ExportArgs) -> Result<ExitCode> {
    let (config, params, masks) = load_model(&args.params)?;
    let sample = Tensor::read_tnsr(&args.sample)?;
    prepare_out_dir(&args.out, args.force)?;
    let files = export_attention_artifacts(&config, &params, &masks, &sample, &args.out)?;
    RunConfig {
        model: config,
        ..RunConfig::default()
    }
    .echo_into(&args.out)?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_macc(args: MaccArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load(&args.config)?;
    let report = macc_estimate(&cfg.model);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(ExitCode::SUCCESS)
}
