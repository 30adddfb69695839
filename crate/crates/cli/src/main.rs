use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use disco::eval::ThetaMode;
use disco_cli::commands::{cmd_eval, cmd_gen, cmd_info, cmd_params, cmd_rollout, cmd_train, RolloutOptions};
use disco_cli::config::{EvalConfig, SplitName};
use disco_cli::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "disco", version, about = "Generate PDE data, train context-conditioned operators and evaluate them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct EvalArgs {
    /// Evaluation config (JSON); only its `eval` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Keep the parameters inferred from the first context.
    #[arg(long)]
    frozen: bool,
    #[arg(long)]
    max_windows: Option<usize>,
    #[arg(long)]
    adapt_lr: Option<f64>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum Split {
    Train,
    Val,
    Test,
    Held,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trajectory dataset.
    Gen { config: PathBuf, out: PathBuf },
    /// Train a model and write a checkpoint plus an epoch CSV.
    Train { config: PathBuf, data: PathBuf, out: PathBuf },
    /// Multi-horizon NRMSE of a checkpoint and the identity baseline.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Autoregressive rollout of one window.
    Rollout {
        checkpoint: PathBuf,
        data: PathBuf,
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16")]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        traj: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Directory for PGM frames (2D data only).
        #[arg(long)]
        images: Option<PathBuf>,
        /// Long-format CSV of the predicted frames.
        #[arg(long)]
        frames_csv: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Parameter-space projection and cluster purity over context windows.
    Params {
        checkpoint: PathBuf,
        data: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Print container metadata.
    Info { path: PathBuf },
}

fn eval_config(a: &EvalArgs) -> Result<EvalConfig> {
    let mut cfg = match &a.config {
        Some(p) => disco_cli::commands::read_config(p)?.eval,
        None => EvalConfig::default(),
    };
    if let Some(s) = a.split {
        cfg.split = match s {
            Split::Train => SplitName::Train,
            Split::Val => SplitName::Val,
            Split::Test => SplitName::Test,
            Split::Held => SplitName::Held,
            Split::All => SplitName::All,
        };
    }
    if a.frozen {
        cfg.theta_mode = ThetaMode::Frozen;
    }
    cfg.max_windows = a.max_windows.or(cfg.max_windows);
    cfg.adapt_lr = a.adapt_lr.or(cfg.adapt_lr);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let h = cmd_gen(&config, &out)?;
            println!("wrote {} trajectories x {} frames of {}", h.trajectories, h.frames, h.fields.join(","));
        }
        Command::Train { config, data, out } => {
            let s = cmd_train(&config, &data, &out)?;
            match s.final_val_loss {
                Some(v) => println!("trained {} epochs, final validation loss {v:.6}", s.epochs),
                None => println!("wrote initial weights (0 epochs)"),
            }
        }
        Command::Eval { checkpoint, data, out, eval } => {
            let s = cmd_eval(&checkpoint, &data, &out, &eval_config(&eval)?)?;
            for (h, v) in s.model.horizons.iter().zip(&s.model.nrmse) {
                let id = s.identity.nrmse_at(*h).unwrap_or(f64::NAN);
                println!("t+{h}: nrmse {v:.6} (identity {id:.6})");
            }
        }
        Command::Rollout {
            checkpoint,
            data,
            out,
            horizons,
            traj,
            start,
            images,
            frames_csv,
            eval,
        } => {
            if horizons.is_empty() || horizons.contains(&0) {
                return Err(CliError::Config {
                    path: "--horizons".into(),
                    message: "horizons must be >= 1".into(),
                });
            }
            let opts = RolloutOptions {
                traj,
                start,
                images,
                frames_csv,
            };
            let r = cmd_rollout(&checkpoint, &data, &horizons, &out, &eval_config(&eval)?, &opts)?;
            for (h, v) in r.horizons.iter().zip(&r.nrmse) {
                println!("t+{h}: nrmse {v:.6}");
            }
            if r.truncated {
                println!("rollout truncated after {} steps (non-finite prediction)", r.frames.len());
            }
        }
        Command::Params { checkpoint, data, out, eval } => {
            let s = cmd_params(&checkpoint, &data, &out, &eval_config(&eval)?)?;
            println!("{} contexts, purity {:.4} (permutation null {:.4})", s.contexts, s.purity, s.null_purity);
        }
        Command::Info { path } => println!("{}", cmd_info(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
