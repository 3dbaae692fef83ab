//! `afft`: synthetic data generation, training, evaluation, fusion-strategy
//! comparison and attention export from one flat config file.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "afft", version, about = "Multi-modal feature fusion and action anticipation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val/test feature files, a manifest and a vocabulary.
    SynthGen(RunArgs),
    /// Fit a model, writing last.ckpt every epoch and best.ckpt on validation gains.
    Train(RunArgs),
    /// Report top-k and class-mean recall of a checkpoint on one split.
    Eval(RunArgs),
    /// Train uni-modal, score-fusion and mid-level fusion pipelines and tabulate them.
    CompareFusion(RunArgs),
    /// Export modality rollout and temporal attention CSVs for a checkpoint.
    AttnExport(RunArgs),
    /// Print the resolved configuration.
    Config(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(o) = &self.out {
            cfg.set("out", &o.display().to_string())?;
        }
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (args, f): (&RunArgs, fn(&RunConfig) -> Result<(), Failure>) = match &cli.command {
        Command::SynthGen(a) => (a, commands::synth_gen),
        Command::Train(a) => (a, commands::train),
        Command::Eval(a) => (a, commands::eval),
        Command::CompareFusion(a) => (a, commands::compare),
        Command::AttnExport(a) => (a, commands::attn_export),
        Command::Config(a) => (a, |c| {
            print!("{}", c.to_text());
            Ok(())
        }),
    };
    let cfg = args.resolve()?;
    afft_core::trainer::with_thread_pool(|| f(&cfg))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", Failure::usage(first));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
