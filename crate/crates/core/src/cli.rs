//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::bundle::{checkpoint_path, ensure_dir, write_bundle, write_grid};
use crate::config::{parse_config, parse_knot_spec, RunConfig};
use crate::error::{Error, Result};
use crate::orchestrator::{finalize, grid_search_single_knot, run_pa_optimization, RunState};

#[derive(Debug, Parser)]
#[command(
    name = "mfg-forge",
    version,
    about = "Principal-agent mean-field game solver for REC markets"
)]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `algo.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Knot grid `start:step:count` (overrides `knots.R`).
    #[arg(long)]
    pub knots: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full principal-agent optimisation.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Inner equilibrium at fixed penalty weights.
    SolveInner {
        #[command(flatten)]
        common: Common,
        /// Comma-separated weights, one per knot.
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Principal loss over a grid of single-knot weights.
    GridSearch {
        #[command(flatten)]
        common: Common,
        /// Weight grid `start:step:count`.
        #[arg(long, default_value = "0.05:0.025:15")]
        grid: String,
        /// Overrides `algo.eval_batches`.
        #[arg(long)]
        batches: Option<usize>,
        /// Overrides `algo.N_paths`.
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Equilibrium checks on a checkpoint.
    Diagnose {
        /// Checkpoint file.
        #[arg(long, alias = "checkpoint")]
        resume: PathBuf,
    },
    /// Re-emits the CSV outputs of a checkpoint.
    Export {
        #[arg(long, alias = "checkpoint")]
        resume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut config = parse_config(path)?;
    apply_overrides(&mut config, common)?;
    Ok(config)
}

fn apply_overrides(config: &mut RunConfig, common: &Common) -> Result<()> {
    if let Some(seed) = common.seed {
        config.algo.seed = seed;
    }
    if let Some(spec) = &common.knots {
        config.knots = parse_knot_spec(spec)?;
    }
    config.validate()
}

fn optimize(common: &Common, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut state = match resume {
        Some(path) => {
            let state = RunState::load(path)?;
            if common.config.is_some() {
                let requested = load_config(common)?;
                if requested != state.config {
                    return Err(Error::Config(format!(
                        "--config differs from the configuration stored in {}",
                        path.display()
                    )));
                }
            } else {
                let mut expected = state.config.clone();
                apply_overrides(&mut expected, common)?;
                if expected != state.config {
                    return Err(Error::Config(format!(
                        "--seed/--knots differ from the configuration stored in {}",
                        path.display()
                    )));
                }
            }
            info!("resuming at outer step {}", state.next_outer);
            state
        }
        None => RunState::new(load_config(common)?)?,
    };
    ensure_dir(out)?;
    let ck = checkpoint_path(out);
    let result = run_pa_optimization(&mut state, &mut |s| s.save(&ck))?;
    write_bundle(out, &state, &result)?;
    info!(
        "done: w = {:?}, loss {:.6} ± {:.6}, stop = {}",
        result.w,
        result.loss_mean,
        result.loss_se,
        result.stop.label()
    );
    Ok(())
}

fn solve_inner(common: &Common, weights: &[f64], out: &Path) -> Result<()> {
    let config = load_config(common)?;
    let mut state = RunState::fixed_weights(config, weights)?;
    ensure_dir(out)?;
    let ck = checkpoint_path(out);
    let result = run_pa_optimization(&mut state, &mut |s| s.save(&ck))?;
    write_bundle(out, &state, &result)
}

fn grid_search(common: &Common, grid: &str, batches: Option<usize>, paths: Option<usize>, out: &Path) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(b) = batches {
        config.algo.eval_batches = b;
    }
    if let Some(n) = paths {
        config.algo.n_paths = n;
    }
    config.validate()?;
    let weights = parse_grid(grid)?;
    let curve = grid_search_single_knot(&config, &weights)?;
    write_grid(out, &config, &curve)
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    parse_knot_spec(text).map_err(|_| Error::Config(format!("--grid expects start:step:count, got {text:?}")))
}

fn diagnose(path: &Path) -> Result<()> {
    let state = RunState::load(path)?;
    let result = finalize(&state)?;
    let d = &result.diagnostics;
    println!("checkpoint = {}", path.display());
    println!("complete = {}", state.is_complete());
    println!("outer_steps = {}", state.next_outer);
    println!("w = {:?}", result.w);
    println!("principal_loss = {:.6} +- {:.6}", result.loss_mean, result.loss_se);
    println!(
        "fbsde_loss = {:.3e} (TOL_F {:.1e})",
        result.fbsde_loss, state.config.algo.tol_f
    );
    println!(
        "clearing_residual = {:.3e} [{}]",
        d.clearing_residual,
        if d.clearing_residual < 1e-10 { "ok" } else { "FAIL" }
    );
    println!("price_deviation = {:.4e}", d.price_deviation);
    println!("negative_control_fraction = {:?}", d.negativity);
    for (k, p) in d.percentiles.iter().enumerate() {
        println!("terminal_median_{} = {:.4}", k + 1, p[3]);
    }
    Ok(())
}

fn export(path: &Path, out: &Path) -> Result<()> {
    let state = RunState::load(path)?;
    let result = finalize(&state)?;
    write_bundle(out, &state, &result)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Optimize { common, out, resume } => optimize(common, out, resume.as_deref()),
        Command::SolveInner { common, weights, out } => solve_inner(common, weights, out),
        Command::GridSearch {
            common,
            grid,
            batches,
            paths,
            out,
        } => grid_search(common, grid, *batches, *paths, out),
        Command::Diagnose { resume } => diagnose(resume),
        Command::Export { resume, out } => export(resume, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
