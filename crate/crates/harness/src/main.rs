use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use sckpd_harness::config::{Action, RunConfig};
use sckpd_harness::error::{HarnessError, Result};
use sckpd_harness::fit::{fit, load_input, solve_for, write_fit, write_json};
use sckpd_harness::simulate::{simulate_dynamic, simulate_static, write_simulation, GroundTruth};
use sckpd_harness::summary::{coverage, summarize, DrawTable};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "SCKPD_THREADS";

#[derive(Parser)]
#[command(name = "sckpd", version, about = "Simulate and fit Kronecker-structured precision models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set hmc.n_draws=200`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::from_file(p, &self.set),
            None => RunConfig::from_layers(None, &self.set),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a data set and its ground truth into the output directory.
    Simulate(ConfigArgs),
    /// Sample the posterior and write draws, summary and diagnostics.
    Fit(ConfigArgs),
    /// Rebuild a summary from a draws CSV, optionally scoring it against truth.
    Summarize {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the prior targets and solved hyperparameters for the input data.
    CheckHyper(ConfigArgs),
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| HarnessError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.load()?;
            let mode = cfg.resolve_mode(Action::Simulate)?;
            let sim = if mode.is_dynamic() { simulate_dynamic(&cfg)? } else { simulate_static(&cfg)? };
            write_simulation(&sim, &cfg.output_dir)?;
            eprintln!("wrote {} observations to {}", sim.data.n(), cfg.output_dir.display());
        }
        Command::Fit(args) => {
            let cfg = args.load()?;
            let mode = cfg.resolve_mode(Action::Fit)?;
            cfg.validate(mode)?;
            let data = load_input(&cfg, mode)?;
            let start = Instant::now();
            let out = fit(&cfg, &data)?;
            write_fit(&out, &cfg.output_dir)?;
            for (mode, c, hit) in [(1, out.hyper.c1, out.hyper.boundary1), (2, out.hyper.c2, out.hyper.boundary2)] {
                if hit {
                    eprintln!("warning: mode {mode} shape equation has no root (c = {c:.6}); its diagonal prior is the a -> 0 limit");
                }
            }
            let d = &out.diagnostics;
            eprintln!(
                "{} draws in {:.1}s: acceptance {:.3}, divergent {}, max rhat {:.3}, min ess {:.0}",
                out.draws.rows.len(),
                start.elapsed().as_secs_f64(),
                d.acceptance_rate,
                d.n_divergent,
                d.max_rhat,
                d.min_ess
            );
        }
        Command::Summarize { draws, truth, out } => {
            let summary = summarize(&DrawTable::read_csv(&draws)?)?;
            let value = match truth {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
                    let truth: GroundTruth = serde_json::from_str(&text)?;
                    serde_json::json!({ "summary": summary, "coverage": coverage(&truth, &summary)? })
                }
                None => serde_json::to_value(&summary)?,
            };
            match out {
                Some(p) => write_json(&p, &value)?,
                None => println!("{}", serde_json::to_string_pretty(&value)?),
            }
        }
        Command::CheckHyper(args) => {
            let cfg = args.load()?;
            let mode = cfg.resolve_mode(Action::Fit)?;
            let data = load_input(&cfg, mode)?;
            let mut relaxed = cfg.clone();
            relaxed.model.boundary_policy = sckpd_harness::config::BoundaryPolicy::Allow;
            let (_, _, report) = solve_for(&relaxed, &data)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
