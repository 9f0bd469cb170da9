//! `san`: synthesize data, train, evaluate and profile from one config.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for failures while running.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use san::commands::{cmd_eval, cmd_profile, cmd_synth, cmd_train};
use san::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "san",
    version,
    about = "Side adapter network for open-vocabulary segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run config; fields not given come from the preset.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Preset to start from (desk, paper_vitb16); overrides the file's.
    #[arg(long)]
    preset: Option<String>,
    /// Dotted override, e.g. `--set train.mode=two_stage`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset, frozen backbone and class prototypes.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and write checkpoints plus a JSON-lines metrics log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report mIoU of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count trainable parameters and FLOPs, and time the forward pass.
    Profile {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load(args: &ConfigArgs) -> san::Result<RunConfig> {
    let mut doc = match &args.config {
        None => serde_json::Value::Object(Default::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| san::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| san::Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    if let (Some(preset), Some(map)) = (&args.preset, doc.as_object_mut()) {
        map.insert("preset".into(), preset.clone().into());
    }
    RunConfig::from_value(doc, &args.sets)
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json<T: serde::Serialize>(v: &T) -> san::Result<()> {
    emit(&serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> san::Result<()> {
    match cli.command {
        Command::Synth { cfg } => print_json(&cmd_synth(&load(&cfg)?)?),
        Command::Train { cfg, out, resume } => {
            let config = load(&cfg)?;
            let reports = cmd_train(&config, &out, resume.as_deref())?;
            if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
                eprintln!(
                    "iterations {}..={}: loss {:.4} -> {:.4}",
                    first.iter, last.iter, first.loss, last.loss
                );
            }
            emit(&out.join("final.sant").display().to_string());
            Ok(())
        }
        Command::Eval { cfg, checkpoint, out } => print_json(&cmd_eval(&load(&cfg)?, &checkpoint, out.as_deref())?),
        Command::Profile { cfg } => print_json(&cmd_profile(&load(&cfg)?)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
