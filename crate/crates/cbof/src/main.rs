//! Experiment CLI: train, eval, sweep, gradcheck, and count-params.

use cbof::config::{parse_sizes, RunConfig};
use cbof::train::{
    cmd_count_params, cmd_eval, cmd_gradcheck, cmd_sweep, cmd_train, TrainOutcome,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cbof", about = "Train and evaluate size-agnostic image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Assert single-threaded bitwise reproducibility (always on here;
    /// recorded in the manifest).
    #[arg(long)]
    deterministic: bool,
    /// Comma-separated training/evaluation sizes, e.g. 20,24,28,32,36.
    #[arg(long)]
    sizes: Option<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> cbof::Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if self.deterministic {
            config.deterministic = true;
        }
        if let Some(sizes) = &self.sizes {
            config.sizes = parse_sizes(sizes)?;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.to_string_lossy().into_owned();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics plus checkpoints.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the test set at each size.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint to load; defaults to best.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a grid of codebook sizes and spatial levels.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated codebook sizes.
        #[arg(long, default_value = "8,16,32,64,128")]
        codewords: String,
        /// Comma-separated spatial levels.
        #[arg(long, default_value = "0,1")]
        levels: String,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Exact parameter counts for the published head configurations.
    CountParams,
}

fn run() -> cbof::Result<ExitCode> {
    match Cli::parse().command {
        Command::Train(common) => {
            let config = common.resolve()?;
            let outcome: TrainOutcome = cmd_train(&config)?;
            let plural = if outcome.epochs_run == 1 { "" } else { "s" };
            println!(
                "trained {} epoch{plural}; artifacts in {}",
                outcome.epochs_run,
                outcome.out_dir.display()
            );
            if let Some(loss) = outcome.final_train_loss {
                println!("final train loss {loss:.6}");
            }
            if let (Some(epoch), Some(err)) = (outcome.best_epoch, outcome.best_valid_error) {
                println!("best epoch {epoch} with mean validation error {err:.4}%");
            }
        }
        Command::Eval { common, checkpoint } => {
            let config = common.resolve()?;
            let checkpoint = checkpoint
                .unwrap_or_else(|| PathBuf::from(&config.out_dir).join(cbof::train::BEST_CHECKPOINT));
            let sizes = config.sizes.clone();
            let rows = cmd_eval(&config, &checkpoint, &sizes)?;
            let metric = if config.regression { "mae" } else { "error%" };
            println!("size,{metric}");
            for (size, err) in rows {
                println!("{size},{err}");
            }
        }
        Command::Sweep {
            common,
            codewords,
            levels,
        } => {
            let config = common.resolve()?;
            let codewords = parse_sizes(&codewords)?;
            let levels = parse_sizes(&levels)?;
            let rows = cmd_sweep(&config, &codewords, &levels)?;
            println!("level,codewords,head_params,test_error%");
            for row in rows {
                println!(
                    "{},{},{},{}",
                    row.level, row.codewords, row.head_params, row.test_error
                );
            }
        }
        Command::Gradcheck { seed } => {
            let reports = cmd_gradcheck(seed)?;
            let mut failed = false;
            for r in &reports {
                println!(
                    "{:24} max_rel_err {:.3e}  {}",
                    r.component,
                    r.max_rel_err,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
                failed |= !r.passed();
            }
            if failed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::CountParams => {
            println!("head,params");
            for (name, count) in cmd_count_params()? {
                println!("{name},{count}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
