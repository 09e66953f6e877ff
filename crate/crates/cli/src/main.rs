use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;

use seqfb_cli::{run_experiment, run_validation, write_csv, ExperimentConfig, PolicyKind};

/// Linear feedback code experiments: MSE sweeps and closed-form validation.
#[derive(Debug, Parser)]
#[command(name = "seqfb", version)]
struct Args {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    /// Monte Carlo trials per cell; 0 skips simulation.
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; stdout when neither this nor the config sets one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit the closed-form vs oracle gain report instead of the MSE sweep.
    #[arg(long)]
    validate: bool,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    if let Some(n) = args.trials {
        cfg.trials = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.out.is_some() {
        cfg.output = args.out;
    }
    cfg.validate()?;

    let sink: Box<dyn Write> = match &cfg.output {
        Some(path) => Box::new(File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let sink = BufWriter::new(sink);
    if args.validate {
        write_csv(&run_validation(&cfg)?, sink)
    } else {
        if cfg.trials > 0 && cfg.trials < seqfb_core::montecarlo::MIN_MSE_TRIALS {
            anyhow::bail!("trials: need 0 or at least {}", seqfb_core::montecarlo::MIN_MSE_TRIALS);
        }
        write_csv(&run_experiment(&cfg)?, sink)
    }
}
