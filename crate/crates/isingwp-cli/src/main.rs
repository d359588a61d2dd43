//! `isingwp`: wavepacket preparation, spectra, ADAPT training, scattering, noise studies
//! and skewness analysis driven by a TOML run config.

mod config;
mod run;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use serde_json::json;

use config::RunConfig;
use run::Output;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Subcommand {
    Prepare,
    Spectra,
    Adapt,
    Scatter,
    NoiseLab,
    Skewness,
    Compare,
}

impl Subcommand {
    fn name(self) -> &'static str {
        match self {
            Subcommand::Prepare => "prepare",
            Subcommand::Spectra => "spectra",
            Subcommand::Adapt => "adapt",
            Subcommand::Scatter => "scatter",
            Subcommand::NoiseLab => "noise-lab",
            Subcommand::Skewness => "skewness",
            Subcommand::Compare => "compare",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "isingwp", version, about = "Wavepacket scattering in the Ising field theory")]
struct Cli {
    #[arg(value_enum)]
    subcommand: Subcommand,
    /// TOML run config, or the manifest.json of an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    verbose: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &cli.out {
        cfg.output.directory = dir.clone();
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    std::fs::create_dir_all(&cfg.output.directory).with_context(|| format!("creating {}", cfg.output.directory.display()))?;
    let mut out = Output { dir: cfg.output.directory.clone(), formats: cfg.output.formats.clone(), artifacts: Vec::new(), verbose: cli.verbose };
    match cli.subcommand {
        Subcommand::Prepare => run::prepare(&cfg, &mut out)?,
        Subcommand::Spectra => run::spectra(&cfg, &mut out)?,
        Subcommand::Adapt => run::adapt(&cfg, &mut out)?,
        Subcommand::Scatter => run::scatter(&cfg, &mut out)?,
        Subcommand::NoiseLab => run::noise_lab(&cfg, &mut out)?,
        Subcommand::Skewness => run::skewness(&cfg, &mut out)?,
        Subcommand::Compare => run::compare_tables(&cfg, &mut out)?,
    }
    let manifest = json!({
        "tool": "isingwp",
        "version": env!("CARGO_PKG_VERSION"),
        "library_version": isingwp::VERSION,
        "subcommand": cli.subcommand.name(),
        "config": cfg,
        "seeds": cfg.seeds(),
        "threads": rayon::current_num_threads(),
        "artifacts": out.artifacts.clone(),
    });
    out.json_always("manifest.json", &manifest)?;
    Ok(())
}
