//! Command-line front end: `fit`, `simulate`, `bench` and `psc`.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{cmd_bench, cmd_fit, cmd_psc, cmd_simulate, compute_psc, resolve_study, ModelSource, PscTable};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "svar", version, about = "Sparse vector autoregression via partial spectral coherence")]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed for `simulate` and `bench`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads for parallel fits (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-stage sparse VAR fit of a CSV file (rows = time, columns = series).
    Fit { data: PathBuf },
    /// Simulate a Gaussian VAR to `<out-dir>/data.csv`.
    Simulate {
        /// Model as JSON or coefficients CSV.
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        model: Option<PathBuf>,
        /// Built-in generator, e.g. `table1-delta1`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, short = 'T')]
        t_len: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
    },
    /// Monte Carlo study; writes `metrics.csv`, `records.jsonl`, `selection_frequency.csv` and `study.json`.
    Bench {
        /// Study configuration JSON.
        #[arg(conflicts_with = "preset")]
        study: Option<PathBuf>,
        /// Built-in study: table1-delta{1,4,25,100}.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Squared partial spectral coherence per frequency to `<out-dir>/psc.csv`.
    Psc {
        #[arg(long, required_unless_present = "model")]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Frequencies when only a model is given.
        #[arg(long)]
        n_freq: Option<usize>,
    },
}

/// Executes a parsed command line and returns a one-line summary.
pub fn run(cli: Cli) -> CliResult<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::input("--threads must be at least 1"));
        }
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Fit { data } => {
            let r = cmd_fit(&data, &config, out)?;
            Ok(format!(
                "p* = {}, m* = {}, BIC = {:.4}; wrote {}",
                r.p_star(),
                r.m_star(),
                r.bic(),
                out.display()
            ))
        }
        Command::Simulate {
            model,
            preset,
            t_len,
            burn_in,
        } => {
            let source = match (model, preset) {
                (Some(p), _) => ModelSource::File(p),
                (None, Some(name)) => ModelSource::Preset(name),
                (None, None) => return Err(CliError::input("simulate needs a model file or --preset")),
            };
            let s = &mut config.simulate;
            s.t_len = t_len.unwrap_or(s.t_len);
            s.burn_in = burn_in.unwrap_or(s.burn_in);
            s.seed = cli.seed.unwrap_or(s.seed);
            let path = out.join("data.csv");
            let series = cmd_simulate(&source, s, &path)?;
            Ok(format!("{} x {} series written to {}", series.len(), series.dim(), path.display()))
        }
        Command::Bench {
            study,
            preset,
            replications,
        } => {
            let cfg = resolve_study(&config.bench, study.as_deref(), preset.as_deref(), replications, cli.seed)?;
            let table = cmd_bench(&cfg, out)?;
            let mut summary = table.to_csv();
            summary.push_str(&format!("wrote {}", out.display()));
            Ok(summary)
        }
        Command::Psc { data, model, n_freq } => {
            config.psc.n_freq = n_freq.unwrap_or(config.psc.n_freq);
            let path = out.join("psc.csv");
            let t = cmd_psc(data.as_deref(), model.as_deref(), &config, &path)?;
            Ok(format!(
                "{} pairs x {} frequencies written to {}",
                t.pairs.len(),
                t.frequencies.len(),
                path.display()
            ))
        }
    }
}
