use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use bevcomm::conformance::{verify_fixtures, write_fixtures};
use bevcomm::experiment::{ensure_writable, sweep, write_results, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "bevcomm",
    version,
    about = "Collaborative BEV perception sweeps and wire-format conformance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy x seed x sigma_e x budget combination from a TOML config.
    Sweep {
        config: PathBuf,
        /// Output directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Verify golden wire frames against their manifest.
    Conformance {
        #[arg(long, default_value = "crates/core/tests/fixtures")]
        dir: PathBuf,
        /// Regenerate the fixtures and manifest instead of verifying.
        #[arg(long)]
        write: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Sweep {
            config,
            out,
            threads,
            seed_override,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed_override {
                cfg.seeds = vec![seed];
            }
            if let Some(out) = out {
                cfg.output = out;
            }
            ensure_writable(&cfg.output)?;
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .context("configuring thread pool")?;
            }
            let rows = sweep(&cfg)?;
            let (csv, json) = write_results(&cfg, &rows, &cfg.output)?;
            println!("{} rows -> {}, {}", rows.len(), csv.display(), json.display());
        }
        Command::Conformance { dir, write } => {
            if write {
                let m = write_fixtures(&dir)?;
                println!("wrote {} fixtures to {}", m.fixtures.len(), dir.display());
                return Ok(());
            }
            let reports = verify_fixtures(&dir)?;
            let mut failed = 0;
            for r in &reports {
                println!("{} {}: {}", if r.ok { "ok  " } else { "FAIL" }, r.file, r.detail);
                failed += usize::from(!r.ok);
            }
            if failed > 0 {
                bail!("{failed} of {} fixtures failed", reports.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
