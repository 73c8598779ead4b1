mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Run;
use config::{RunConfig, Variant};
use error::CliError;

#[derive(Parser)]
#[command(name = "klprior", version, about = "KL-regularized actor-critic experiments on toy control tasks")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config's list.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write demos.csv.
    DemoGen,
    /// Fit a behavioral reference policy and write reference.json.
    Clone {
        /// Overrides reference.variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Pretrain and run the regularized actor-critic.
    Train,
    /// Constant-variance sweep over ablation.constants.
    Ablation,
    /// Predictive-std grid of the reference policy.
    Heatmap,
    /// Deterministic evaluation of a trained policy.
    Eval {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !cli.seed.is_empty() {
        cfg.seeds = cli.seed.clone();
    }
    if let Some(o) = &cli.outdir {
        cfg.outdir = o.clone();
    }
    let variant = match &cli.command {
        Command::Clone { variant: Some(v) } => Some(v.parse::<Variant>()?),
        _ => None,
    };
    if let Some(v) = variant {
        cfg.reference.variant = v;
    }
    cfg.validate()?;
    for &seed in &cfg.seeds {
        let effective = cfg.for_seed(seed);
        let dir = cfg.run_dir(seed);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, effective.to_json() + "\n").map_err(|e| CliError::io(&path, e))?;
        let run = Run {
            cfg: &effective,
            seed,
            dir,
            quiet: cli.quiet,
        };
        match &cli.command {
            Command::DemoGen => commands::demo_gen(&run)?,
            Command::Clone { .. } => commands::clone(&run, effective.reference.variant)?,
            Command::Train => commands::train_cmd(&run)?,
            Command::Ablation => commands::ablation(&run)?,
            Command::Heatmap => commands::heatmap(&run)?,
            Command::Eval { policy } => commands::eval(&run, policy.as_deref())?,
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
