mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

/// Variational implicit-solvent solvation energies on a grid.
#[derive(Parser, Debug)]
#[command(name = "vism", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-consistent solve for one molecule; writes energy.json.
    Solve(Common),
    /// Fit (γ, P_h, ε per atom type) to a manifest of experimental energies.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Lines of `molecule_path dG`; an `@nonpolar` line skips electrostatics.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Total energy over a decreasing list of TV exponents.
    SweepQ(Common),
    /// Total energy over a list of volume exponents N.
    SweepN(Common),
    /// Sharp-interface Born ion against the analytic energy.
    Born(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Molecule file (`x y z charge radius type_tag` per line).
    #[arg(long)]
    molecule: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads [default: VISM_THREADS, else all cores].
    #[arg(long)]
    threads: Option<usize>,
    /// Write field dumps as `i j k value` text.
    #[arg(long)]
    csv: bool,
    /// Write u (and ψ) field dumps.
    #[arg(long)]
    dump_fields: bool,
}

const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_USAGE: u8 = 64;

fn build_config(common: &Common, manifest: Option<PathBuf>) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &common.molecule {
        cfg.molecule = Some(m.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(m) = manifest {
        cfg.manifest = Some(m);
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    cfg.csv |= common.csv;
    cfg.dump_fields |= common.dump_fields;
    cfg.resolve()
}

fn thread_count(cfg: &RunConfig) -> anyhow::Result<Option<usize>> {
    if cfg.threads.is_some() {
        return Ok(cfg.threads);
    }
    match std::env::var("VISM_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => anyhow::bail!("VISM_THREADS must be a positive integer, got `{s}`"),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (common, manifest) = match &cli.command {
        Command::Solve(c) | Command::SweepQ(c) | Command::SweepN(c) | Command::Born(c) => (c, None),
        Command::Fit { common, manifest } => (common, manifest.clone()),
    };
    let cfg = build_config(common, manifest)?;
    if let Some(n) = thread_count(&cfg)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| anyhow::anyhow!("creating {}: {e}", out.display()))?;
    vism::io::write_atomic(&out.join("effective_config.toml"), cfg.to_toml()?.as_bytes())?;
    match cli.command {
        Command::Solve(_) => commands::solve(&cfg),
        Command::Fit { .. } => commands::fit(&cfg),
        Command::SweepQ(_) => commands::sweep_q(&cfg),
        Command::SweepN(_) => commands::sweep_n(&cfg),
        Command::Born(_) => commands::born(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NOT_CONVERGED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
