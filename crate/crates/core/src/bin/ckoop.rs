use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use conformal_koopman::harness::{self, ExperimentConfig};
use conformal_koopman::{Error, Result};

/// Koopman tracking controllers with conformal error bounds.
#[derive(Debug, Parser)]
#[command(name = "ckoop", version)]
struct Cli {
    /// TOML configuration file; omitted sections come from the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `report.out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Root seed (overrides `data.seed`).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// `dubins-paper` or `flapper-doc`.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the training and identification datasets.
    Collect,
    /// Build the lifting and identify the latent linear model.
    Fit,
    /// Synthesize the feedback gain and contraction metric.
    Synth,
    /// Calibrate the nonconformity-score quantiles.
    Calibrate,
    /// Run the seeded closed-loop rollouts.
    Run,
    /// Check the logged rollouts against their bounds.
    Validate,
    /// Render plots and the markdown report.
    Report,
    /// Every stage in order.
    All,
    /// Print the resolved configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, cli.preset.as_deref())?,
        None => ExperimentConfig::preset(cli.preset.as_deref().unwrap_or("dubins-paper"))?,
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.report.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    }
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Collect => {
            harness::pipeline::write_config(&cfg)?;
            let s = harness::collect(&cfg)?;
            println!(
                "collected {} training and {} identification records",
                s.train_records, s.identification_records
            );
        }
        Command::Fit => {
            let f = harness::fit(&cfg)?;
            let d = &f.diagnostics;
            println!(
                "latent dim {}, spectral radius {}, controllability σmin {:e}, prediction loss {:e}",
                d.latent_dim, d.spectral_radius, d.controllability_sigma_min, d.prediction_loss
            );
        }
        Command::Synth => {
            let c = harness::synth(&cfg)?;
            let max = c.closed_loop_moduli.iter().fold(0.0f64, |a, b| a.max(*b));
            println!(
                "certificate {:e}, max closed-loop modulus {max}, sqrt(m_bar/m_under) {}",
                c.certificate, c.metric_condition
            );
        }
        Command::Calibrate => {
            let c = harness::calibrate(&cfg)?;
            println!("{}", conformal_koopman::conformal::CalibrationResult::CSV_HEADER);
            for r in &c.results {
                println!("{}", r.csv_row());
            }
            for w in &c.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Run => {
            let idx = harness::run(&cfg)?;
            let failed = idx.entries.iter().filter(|e| e.failed).count();
            println!("{} rollouts written ({failed} aborted)", idx.entries.len());
        }
        Command::Validate => print!("{}", harness::validate(&cfg)?.table()),
        Command::Report => println!("{}", harness::render_report(&cfg)?.display()),
        Command::All => print!("{}", harness::all(&cfg)?.table()),
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
