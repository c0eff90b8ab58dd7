//! `fiss`: runs federated incremental segmentation experiments.
//!
//! Log verbosity follows `RUST_LOG` (default `info`).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fiss_core::harness::{dump_datasets, load_config, run};
use fiss_core::Method;
use log::{error, info};

#[derive(Parser)]
#[command(
    name = "fiss",
    version,
    about = "Federated incremental semantic segmentation simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its results directory.
    Run {
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config method (fbl, finetune, fbl-no-apl, fbl-no-fsc, fbl-no-frc).
        #[arg(long)]
        method: Option<String>,
    },
    /// Write the synthetic training pools and test set of a config.
    DumpData {
        config: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            method,
        } => {
            let mut cfg =
                load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(name) = method {
                cfg.method = Method::parse(&name)?;
            }
            let artifacts =
                run(&cfg, &out).with_context(|| format!("running into {}", out.display()))?;
            let r = &artifacts.result;
            info!("final mIoU {:.4}", r.final_miou);
            println!(
                "{} seed={} final_miou={:.4} old_miou={} new_miou={} out={}",
                r.method.name(),
                r.seed,
                r.final_miou,
                r.old_class_miou.map_or("-".into(), |v| format!("{v:.4}")),
                r.new_class_miou.map_or("-".into(), |v| format!("{v:.4}")),
                artifacts.out_dir.display()
            );
        }
        Command::DumpData { config, out } => {
            let cfg =
                load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            dump_datasets(&cfg, &out).with_context(|| format!("dumping into {}", out.display()))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
