//! The principal-agent loop: ball sampling, warm-started inner solves,
//! buffer and surrogate updates, principal steps, stopping and checkpoints.
//!
//! Random streams are derived from the master seed with these labels:
//!
//! | label                 | use                                          |
//! |-----------------------|----------------------------------------------|
//! | `nets`, `calibrate`   | network initialisation, input standardisation |
//! | `surrogate/init`      | surrogate initialisation                     |
//! | `outer/<n>/ball`      | candidates of outer step `n`                 |
//! | `inner/<n>/<i>`       | training of candidate `i`                    |
//! | `eval/<n>`            | loss batch shared by all candidates of step `n` |
//! | `surrogate/<n>`       | surrogate minibatches                        |
//! | `final/train`, `final/eval/<b>` | final solve and evaluation         |
//! | `grid/<i>/train`, `grid/eval/<b>` | single-knot grid search          |

use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_config_str, serialize_config, RunConfig};
use crate::diagnostics::{
    control_summaries, market_clearing_residual, mean_and_se, negativity_report, price_constancy, terminal_inventory,
    terminal_percentiles, ControlSummary,
};
use crate::error::{Error, Result};
use crate::fbsde::{fbsde_loss, simulate_paths, EnsembleNets, FbsdeTrainer, InputNorm, ProblemSpec, SampleBatch};
use crate::nn::{AdamConfig, AdamState};
use crate::principal::{
    agent_value_estimate, phi0_recover, principal_grad_step, principal_sample_loss, psi, psi_inverse, sample_ball,
    BufferRecord, EpsilonSchedule, MemoryBuffer, PrincipalState, Surrogate,
};
use crate::rec::{build_rec_spec, price_path, RecProblem};
use crate::seed::{derive_seed, stream};

/// Percentile levels reported for terminal inventories.
pub const PERCENTILES: [f64; 7] = [5.0, 10.0, 25.0, 50.0, 75.0, 90.0, 95.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Full outer optimisation.
    Optimize,
    /// Inner solve at fixed weights.
    FixedWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Running,
    Tolerance,
    MaxOuterSteps,
    FixedWeights,
}

impl StopReason {
    pub fn label(self) -> &'static str {
        match self {
            StopReason::Running => "running",
            StopReason::Tolerance => "tolerance",
            StopReason::MaxOuterSteps => "max_outer_steps",
            StopReason::FixedWeights => "fixed_weights",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Search,
    Final,
}

/// One FBSDE training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbsdeLossRecord {
    pub phase: Phase,
    pub outer: usize,
    pub candidate: usize,
    pub iteration: usize,
    pub loss: f64,
}

/// Work done so far; stands in for wall-clock figures in outputs so that
/// bundles stay reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkCounters {
    pub outer_steps: u64,
    pub candidates_trained: u64,
    pub candidates_failed: u64,
    pub inner_iterations: u64,
    pub principal_steps: u64,
}

/// The outer step's incumbent evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalLossRecord {
    pub outer: usize,
    pub loss: f64,
    /// Surrogate prediction at the incumbent after fitting.
    pub surrogate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub config: RunConfig,
    pub mode: Mode,
    pub principal: PrincipalState,
    pub trainer: FbsdeTrainer,
    pub next_outer: usize,
    pub stop: StopReason,
    pub final_solved: bool,
    /// `(outer steps done, u)`; the first row is the initial point.
    pub u_trajectory: Vec<(usize, Vec<f64>)>,
    pub principal_losses: Vec<PrincipalLossRecord>,
    pub fbsde_history: Vec<FbsdeLossRecord>,
    pub counters: WorkCounters,
}

fn problem(config: &RunConfig, weights: &[f64]) -> Result<RecProblem> {
    build_rec_spec(config.rec.clone(), config.penalty(weights)?)
}

fn fresh_trainer(config: &RunConfig, weights: &[f64]) -> Result<FbsdeTrainer> {
    let spec = problem(config, weights)?;
    let seed = config.algo.seed;
    let mut nets = EnsembleNets::new(
        spec.dims(),
        config.populations(),
        config.rec.steps(),
        &config.nets.hidden,
        config.nets.activation,
        derive_seed(seed, "nets"),
    )?;
    nets.calibrate_inputs(&spec, &config.counts(), derive_seed(seed, "calibrate"))?;
    Ok(FbsdeTrainer::new(nets, AdamConfig::with_lr(config.algo.lr_fbsde)))
}

fn fresh_principal(config: &RunConfig, u: Vec<f64>) -> Result<PrincipalState> {
    let a = &config.algo;
    let surrogate = Surrogate::new(
        u.len(),
        &config.nets.hidden,
        config.nets.activation,
        a.lr_surrogate,
        derive_seed(a.seed, "surrogate/init"),
    )?;
    Ok(PrincipalState {
        u_adam: AdamState::new(u.len(), AdamConfig::with_lr(a.lr_principal)),
        u,
        surrogate,
        buffer: MemoryBuffer::new(a.buffer_capacity),
        eps: a.eps0,
        j: 0,
    })
}

impl RunState {
    /// Start of a full optimisation at `u⁰`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let u0 = config.u0()?;
        let trainer = fresh_trainer(&config, &psi(&u0))?;
        let principal = fresh_principal(&config, u0.clone())?;
        Ok(Self {
            config,
            mode: Mode::Optimize,
            principal,
            trainer,
            next_outer: 0,
            stop: StopReason::Running,
            final_solved: false,
            u_trajectory: vec![(0, u0)],
            principal_losses: Vec::new(),
            fbsde_history: Vec::new(),
            counters: WorkCounters::default(),
        })
    }

    /// Inner solve only, at the given positive weights.
    pub fn fixed_weights(config: RunConfig, weights: &[f64]) -> Result<Self> {
        if weights.len() != config.knots.len() {
            return Err(Error::Config(format!(
                "--weights needs {} values (one per knot), got {}",
                config.knots.len(),
                weights.len()
            )));
        }
        let mut config = config;
        config.algo.u0 = Some(psi_inverse(weights)?);
        let mut state = Self::new(config)?;
        state.mode = Mode::FixedWeights;
        state.stop = StopReason::FixedWeights;
        Ok(state)
    }

    /// Weights the inner problem is solved at: `ψ(u)`.
    pub fn weights(&self) -> Vec<f64> {
        psi(&self.principal.u)
    }

    pub fn is_complete(&self) -> bool {
        self.final_solved
    }
}

/// Candidate result of one outer step.
struct Candidate {
    trainer: FbsdeTrainer,
    history: Vec<f64>,
    loss: f64,
}

fn train_and_score(
    config: &RunConfig,
    mut trainer: FbsdeTrainer,
    u: &[f64],
    train_seed: u64,
    eval_seed: u64,
) -> Result<Candidate> {
    let w = psi(u);
    let spec = problem(config, &w)?;
    let a = &config.algo;
    let report = trainer.train(&spec, &config.counts(), a.n_f, a.tol_f, train_seed)?;
    let batch = simulate_paths(&spec, &trainer.nets, &config.counts(), eval_seed)?;
    let loss = principal_sample_loss(&batch, &config.rec, &w, &config.knots, &config.principal)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("principal loss is {loss}")));
    }
    Ok(Candidate {
        trainer,
        history: report.history,
        loss,
    })
}

fn worker_count() -> Option<usize> {
    std::env::var("MFG_FORGE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
}

/// One pass of the outer loop body.
pub fn outer_step(state: &mut RunState) -> Result<()> {
    let n = state.next_outer;
    let config = state.config.clone();
    let a = &config.algo;
    let seed = a.seed;
    let mut ball_rng = stream(seed, &format!("outer/{n}/ball"));
    let candidates = sample_ball(&state.principal.u, state.principal.eps, a.n_s, &mut ball_rng);
    let eval_seed = derive_seed(seed, &format!("eval/{n}"));

    let outcomes: Vec<Result<Candidate>> = if a.parallel_candidates {
        let start = state.trainer.clone();
        let run = || {
            candidates
                .par_iter()
                .enumerate()
                .map(|(i, u)| {
                    train_and_score(
                        &config,
                        start.clone(),
                        u,
                        derive_seed(seed, &format!("inner/{n}/{i}")),
                        eval_seed,
                    )
                })
                .collect()
        };
        match worker_count() {
            Some(threads) => rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("MFG_FORGE_THREADS: {e}")))?
                .install(run),
            None => run(),
        }
    } else {
        let mut out = Vec::with_capacity(candidates.len());
        for (i, u) in candidates.iter().enumerate() {
            let result = train_and_score(
                &config,
                state.trainer.clone(),
                u,
                derive_seed(seed, &format!("inner/{n}/{i}")),
                eval_seed,
            );
            // warm start: the next candidate continues from this one
            if let Ok(c) = &result {
                state.trainer = c.trainer.clone();
            }
            out.push(result);
        }
        out
    };

    let mut incumbent_loss = None;
    let mut succeeded = 0;
    for (i, (u, outcome)) in candidates.iter().zip(outcomes).enumerate() {
        match outcome {
            Ok(c) => {
                state.counters.candidates_trained += 1;
                state.counters.inner_iterations += c.history.len() as u64;
                state
                    .fbsde_history
                    .extend(c.history.iter().enumerate().map(|(it, &loss)| FbsdeLossRecord {
                        phase: Phase::Search,
                        outer: n,
                        candidate: i,
                        iteration: it,
                        loss,
                    }));
                state.principal.buffer.push(BufferRecord {
                    u: u.clone(),
                    loss: c.loss,
                    step: n,
                });
                if i == 0 {
                    incumbent_loss = Some(c.loss);
                    if a.parallel_candidates {
                        state.trainer = c.trainer;
                    }
                }
                succeeded += 1;
            }
            Err(Error::Numerical(msg)) => {
                state.counters.candidates_failed += 1;
                warn!("outer step {n}, candidate {i} skipped: {msg}");
            }
            Err(other) => return Err(other),
        }
    }
    if succeeded == 0 {
        return Err(Error::Numerical(format!(
            "all {} candidates of outer step {n} failed; last accepted u = {:?}",
            candidates.len(),
            state.principal.u
        )));
    }

    let p = &mut state.principal;
    let mut fit_rng = stream(seed, &format!("surrogate/{n}"));
    p.surrogate.fit(&p.buffer, a.n_a, a.n_b, &mut fit_rng)?;
    if let Some(loss) = incumbent_loss {
        state.principal_losses.push(PrincipalLossRecord {
            outer: n,
            loss,
            surrogate: p.surrogate.predict(&p.u)?,
        });
    }
    let previous = p.u.clone();
    p.u = principal_grad_step(&p.surrogate, &p.u, a.n_p, &mut p.u_adam)?;
    p.j += a.n_p;
    state.counters.principal_steps += a.n_p as u64;
    let schedule = EpsilonSchedule {
        eps0: a.eps0,
        decay: a.eps_decay,
        min: a.eps_min(),
    };
    p.eps = schedule.update(p.eps);
    state.next_outer = n + 1;
    state.counters.outer_steps += 1;
    state.u_trajectory.push((n + 1, p.u.clone()));

    let moved = previous
        .iter()
        .zip(&p.u)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    info!(
        "outer step {n}: incumbent loss {:?}, w = {:?}, |du| = {moved:.3e}, eps = {:.4}",
        incumbent_loss,
        psi(&p.u),
        p.eps
    );
    if moved < a.tol {
        state.stop = StopReason::Tolerance;
    } else if state.next_outer >= a.n_o {
        state.stop = StopReason::MaxOuterSteps;
    }
    Ok(())
}

/// Trains the inner problem at `ψ(u)` up to `max_inner_iters` iterations.
pub fn final_solve(state: &mut RunState) -> Result<()> {
    let config = &state.config;
    let spec = problem(config, &state.weights())?;
    let report = state.trainer.train(
        &spec,
        &config.counts(),
        config.algo.max_inner_iters,
        config.algo.tol_f,
        derive_seed(config.algo.seed, "final/train"),
    )?;
    let outer = state.next_outer;
    state.counters.inner_iterations += report.history.len() as u64;
    state
        .fbsde_history
        .extend(report.history.iter().enumerate().map(|(it, &loss)| FbsdeLossRecord {
            phase: Phase::Final,
            outer,
            candidate: 0,
            iteration: it,
            loss,
        }));
    if !report.converged {
        warn!(
            "final inner solve stopped after {} iterations above TOL_F (last loss {:.3e})",
            report.history.len(),
            report.history.last().copied().unwrap_or(f64::NAN)
        );
    }
    state.final_solved = true;
    Ok(())
}

/// Runs the loop from the state's current position to completion.
/// `checkpoint` is called after every `checkpoint_every` outer steps and
/// once the final solve is done.
pub fn run_pa_optimization(
    state: &mut RunState,
    checkpoint: &mut dyn FnMut(&RunState) -> Result<()>,
) -> Result<RunResult> {
    while state.stop == StopReason::Running {
        if state.next_outer >= state.config.algo.n_o {
            state.stop = StopReason::MaxOuterSteps;
            break;
        }
        outer_step(state)?;
        let every = state.config.algo.checkpoint_every;
        if every > 0 && state.next_outer.is_multiple_of(every) && state.stop == StopReason::Running {
            checkpoint(state)?;
        }
    }
    if !state.final_solved {
        final_solve(state)?;
        checkpoint(state)?;
    }
    finalize(state)
}

/// Statistics of the evaluation batches at the final weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub phi0: f64,
    pub loss_mean: f64,
    pub loss_se: f64,
    pub eval_losses: Vec<f64>,
    /// Agent costs without offset, averaged over the evaluation batches.
    pub v_hat: Vec<f64>,
    pub fbsde_loss: f64,
    pub stop: StopReason,
    pub counters: WorkCounters,
    pub diagnostics: Diagnostics,
}

/// Equilibrium statistics of the first evaluation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub prices: Vec<f64>,
    pub clearing_residual: f64,
    pub price_deviation: f64,
    pub percentiles: Vec<Vec<f64>>,
    pub controls: Vec<ControlSummary>,
    pub terminal: Vec<Vec<f64>>,
    pub negativity: Vec<f64>,
}

impl Diagnostics {
    pub fn of_batch(batch: &SampleBatch, config: &RunConfig) -> Self {
        let prices = price_path(batch, &config.rec);
        Self {
            clearing_residual: market_clearing_residual(batch, &config.rec),
            price_deviation: price_constancy(&prices),
            percentiles: terminal_percentiles(batch, &PERCENTILES),
            controls: control_summaries(batch, &config.rec),
            terminal: (0..batch.populations.len())
                .map(|k| terminal_inventory(batch, k))
                .collect(),
            negativity: negativity_report(batch, &config.rec),
            prices,
        }
    }
}

/// Evaluates the current nets at `ψ(u)` on `eval_batches` fresh batches.
/// Deterministic in the state.
pub fn finalize(state: &RunState) -> Result<RunResult> {
    let config = &state.config;
    let w = state.weights();
    let spec = problem(config, &w)?;
    let mut losses = Vec::with_capacity(config.algo.eval_batches);
    let mut v_sum = vec![0.0; config.populations()];
    let mut first = None;
    for b in 0..config.algo.eval_batches {
        let batch = simulate_paths(
            &spec,
            &state.trainer.nets,
            &config.counts(),
            derive_seed(config.algo.seed, &format!("final/eval/{b}")),
        )?;
        losses.push(principal_sample_loss(
            &batch,
            &config.rec,
            &w,
            &config.knots,
            &config.principal,
        )?);
        let v = agent_value_estimate(&batch, &config.rec, &spec.penalty);
        v_sum.iter_mut().zip(&v).for_each(|(s, v)| *s += v);
        if first.is_none() {
            first = Some(batch);
        }
    }
    let batch = first.expect("eval_batches is at least 1");
    let v_hat: Vec<f64> = v_sum.iter().map(|s| s / losses.len() as f64).collect();
    let (loss_mean, loss_se) = mean_and_se(&losses);
    Ok(RunResult {
        u: state.principal.u.clone(),
        phi0: phi0_recover(&v_hat, &config.principal),
        w,
        loss_mean,
        loss_se,
        eval_losses: losses,
        v_hat,
        fbsde_loss: fbsde_loss(&batch, &spec),
        stop: state.stop,
        counters: state.counters,
        diagnostics: Diagnostics::of_batch(&batch, config),
    })
}

/// One point of the single-knot study.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub w: f64,
    pub mean: f64,
    pub se: f64,
    pub converged: bool,
    pub iterations: usize,
    pub last_fbsde_loss: f64,
}

/// Loss curve over single-knot weights. Each point trains the inner problem
/// (warm-started from the previous point) for up to `max_inner_iters`
/// iterations or `TOL_F`, then averages `L̂_P` over `eval_batches` batches.
/// Every point is evaluated on the same batch seeds.
pub fn grid_search_single_knot(config: &RunConfig, grid: &[f64]) -> Result<Vec<GridPoint>> {
    if config.knots.len() != 1 {
        return Err(Error::Config(format!(
            "grid search needs exactly one knot, got {}",
            config.knots.len()
        )));
    }
    if grid.is_empty() || grid.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::Config(format!("grid weights must be positive, got {grid:?}")));
    }
    let a = &config.algo;
    let mut trainer = fresh_trainer(config, &grid[..1])?;
    let mut curve = Vec::with_capacity(grid.len());
    for (i, &w) in grid.iter().enumerate() {
        let spec = problem(config, &[w])?;
        let report = trainer.train(
            &spec,
            &config.counts(),
            a.max_inner_iters,
            a.tol_f,
            derive_seed(a.seed, &format!("grid/{i}/train")),
        )?;
        if !report.converged {
            warn!("grid point w = {w}: inner solve did not reach TOL_F");
        }
        let mut losses = Vec::with_capacity(a.eval_batches);
        for b in 0..a.eval_batches {
            let batch = simulate_paths(
                &spec,
                &trainer.nets,
                &config.counts(),
                derive_seed(a.seed, &format!("grid/eval/{b}")),
            )?;
            losses.push(principal_sample_loss(
                &batch,
                &config.rec,
                &[w],
                &config.knots,
                &config.principal,
            )?);
        }
        let (mean, se) = mean_and_se(&losses);
        info!(
            "grid point w = {w}: loss {mean:.5} ± {se:.5} after {} iterations",
            report.history.len()
        );
        curve.push(GridPoint {
            w,
            mean,
            se,
            converged: report.converged,
            iterations: report.history.len(),
            last_fbsde_loss: *report.history.last().expect("at least one iteration"),
        });
    }
    Ok(curve)
}

// Checkpoint encoding.

fn mode_code(m: Mode) -> u64 {
    match m {
        Mode::Optimize => 0,
        Mode::FixedWeights => 1,
    }
}

fn stop_code(s: StopReason) -> u64 {
    match s {
        StopReason::Running => 0,
        StopReason::Tolerance => 1,
        StopReason::MaxOuterSteps => 2,
        StopReason::FixedWeights => 3,
    }
}

fn put_adam(ck: &mut Checkpoint, name: &str, adam: &AdamState) {
    ck.put_f64(&format!("{name}.m"), &adam.m);
    ck.put_f64(&format!("{name}.v"), &adam.v);
    ck.put_u64(&format!("{name}.t"), &[adam.t]);
}

fn get_adam(ck: &Checkpoint, name: &str, into: &mut AdamState) -> Result<()> {
    let m = ck.f64s(&format!("{name}.m"))?;
    let v = ck.f64s(&format!("{name}.v"))?;
    if m.len() != into.m.len() || v.len() != into.v.len() {
        return Err(Error::Contract(format!(
            "checkpoint optimiser state {name} has the wrong length"
        )));
    }
    into.m = m.to_vec();
    into.v = v.to_vec();
    into.t = scalar_u64(ck, &format!("{name}.t"))?;
    Ok(())
}

fn scalar_u64(ck: &Checkpoint, name: &str) -> Result<u64> {
    ck.u64s(name)?
        .first()
        .copied()
        .ok_or_else(|| Error::Contract(format!("checkpoint section {name} is empty")))
}

fn put_exact(into: &mut [f64], from: &[f64], name: &str) -> Result<()> {
    if into.len() != from.len() {
        return Err(Error::Contract(format!(
            "checkpoint section {name} has {} values, expected {}",
            from.len(),
            into.len()
        )));
    }
    into.copy_from_slice(from);
    Ok(())
}

impl RunState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_text("config", &serialize_config(&self.config));
        ck.put_u64(
            "progress",
            &[
                mode_code(self.mode),
                stop_code(self.stop),
                self.next_outer as u64,
                self.principal.j as u64,
                self.final_solved as u64,
            ],
        );
        let c = &self.counters;
        ck.put_u64(
            "counters",
            &[
                c.outer_steps,
                c.candidates_trained,
                c.candidates_failed,
                c.inner_iterations,
                c.principal_steps,
            ],
        );
        let p = &self.principal;
        ck.put_f64("u", &p.u);
        put_adam(&mut ck, "u_adam", &p.u_adam);
        ck.put_f64("eps", &[p.eps]);
        ck.put_f64("surrogate.params", &p.surrogate.params);
        put_adam(&mut ck, "surrogate.adam", &p.surrogate.adam);
        ck.put_f64("surrogate.target", &[p.surrogate.target_mean, p.surrogate.target_scale]);
        ck.put_u64("buffer.meta", &[p.buffer.capacity() as u64, p.buffer.inserted()]);
        ck.put_f64(
            "buffer.u",
            &p.buffer.records().flat_map(|r| r.u.iter().copied()).collect::<Vec<_>>(),
        );
        ck.put_f64("buffer.loss", &p.buffer.records().map(|r| r.loss).collect::<Vec<_>>());
        ck.put_u64(
            "buffer.step",
            &p.buffer.records().map(|r| r.step as u64).collect::<Vec<_>>(),
        );
        let nets = &self.trainer.nets;
        ck.put_f64("theta", &nets.params);
        put_adam(&mut ck, "theta_adam", &self.trainer.adam);
        ck.put_f64(
            "norm.shift",
            &nets
                .norms
                .iter()
                .flat_map(|n| n.shift.iter().copied())
                .collect::<Vec<_>>(),
        );
        ck.put_f64(
            "norm.scale",
            &nets
                .norms
                .iter()
                .flat_map(|n| n.scale.iter().copied())
                .collect::<Vec<_>>(),
        );
        ck.put_u64(
            "u_trajectory.outer",
            &self.u_trajectory.iter().map(|(n, _)| *n as u64).collect::<Vec<_>>(),
        );
        ck.put_f64(
            "u_trajectory.u",
            &self
                .u_trajectory
                .iter()
                .flat_map(|(_, u)| u.iter().copied())
                .collect::<Vec<_>>(),
        );
        ck.put_u64(
            "principal_loss.outer",
            &self.principal_losses.iter().map(|r| r.outer as u64).collect::<Vec<_>>(),
        );
        ck.put_f64(
            "principal_loss.loss",
            &self.principal_losses.iter().map(|r| r.loss).collect::<Vec<_>>(),
        );
        ck.put_f64(
            "principal_loss.surrogate",
            &self.principal_losses.iter().map(|r| r.surrogate).collect::<Vec<_>>(),
        );
        let h = &self.fbsde_history;
        ck.put_u64(
            "fbsde.index",
            &h.iter()
                .flat_map(|r| {
                    [
                        (r.phase == Phase::Final) as u64,
                        r.outer as u64,
                        r.candidate as u64,
                        r.iteration as u64,
                    ]
                })
                .collect::<Vec<_>>(),
        );
        ck.put_f64("fbsde.loss", &h.iter().map(|r| r.loss).collect::<Vec<_>>());
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck, path)
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        let wrap = |e: Error| match e {
            Error::Contract(m) | Error::Config(m) => bad(m),
            other => other,
        };
        let config = parse_config_str(ck.text("config").map_err(wrap)?, "embedded configuration").map_err(wrap)?;
        let knots = config.knots.len();
        let progress = ck.u64s("progress").map_err(wrap)?;
        let counters = ck.u64s("counters").map_err(wrap)?;
        if progress.len() != 5 || counters.len() != 5 {
            return Err(bad("progress or counter section has the wrong length".into()));
        }
        let mode = match progress[0] {
            0 => Mode::Optimize,
            1 => Mode::FixedWeights,
            c => return Err(bad(format!("unknown run mode {c}"))),
        };
        let stop = match progress[1] {
            0 => StopReason::Running,
            1 => StopReason::Tolerance,
            2 => StopReason::MaxOuterSteps,
            3 => StopReason::FixedWeights,
            c => return Err(bad(format!("unknown stop reason {c}"))),
        };

        let restore = || -> Result<Self> {
            let u = ck.f64s("u")?.to_vec();
            if u.len() != knots {
                return Err(Error::Contract(format!("u has {} entries for {knots} knots", u.len())));
            }
            let mut principal = fresh_principal(&config, u)?;
            get_adam(ck, "u_adam", &mut principal.u_adam)?;
            principal.eps = ck.f64s("eps")?.first().copied().unwrap_or(f64::NAN);
            principal.j = progress[3] as usize;
            let s = &mut principal.surrogate;
            put_exact(&mut s.params, ck.f64s("surrogate.params")?, "surrogate.params")?;
            get_adam(ck, "surrogate.adam", &mut s.adam)?;
            let target = ck.f64s("surrogate.target")?;
            if target.len() != 2 {
                return Err(Error::Contract("surrogate.target needs two values".into()));
            }
            (s.target_mean, s.target_scale) = (target[0], target[1]);

            let meta = ck.u64s("buffer.meta")?;
            let losses = ck.f64s("buffer.loss")?;
            let steps = ck.u64s("buffer.step")?;
            let bu = ck.f64s("buffer.u")?;
            if meta.len() != 2 || steps.len() != losses.len() || bu.len() != losses.len() * knots {
                return Err(Error::Contract("buffer sections are inconsistent".into()));
            }
            let records = losses
                .iter()
                .zip(steps)
                .zip(bu.chunks(knots.max(1)))
                .map(|((&loss, &step), u)| BufferRecord {
                    u: u.to_vec(),
                    loss,
                    step: step as usize,
                })
                .collect();
            principal.buffer = MemoryBuffer::restore(meta[0] as usize, records, meta[1]);

            let spec = problem(&config, &psi(&principal.u))?;
            let mut nets = EnsembleNets::zeros(
                spec.dims(),
                config.populations(),
                config.rec.steps(),
                &config.nets.hidden,
                config.nets.activation,
            )?;
            put_exact(&mut nets.params, ck.f64s("theta")?, "theta")?;
            let shift = ck.f64s("norm.shift")?;
            let scale = ck.f64s("norm.scale")?;
            let total: usize = nets.norms.iter().map(|n| n.shift.len()).sum();
            if shift.len() != total || scale.len() != total {
                return Err(Error::Contract(
                    "input standardisation sections have the wrong length".into(),
                ));
            }
            let mut at = 0;
            for norm in &mut nets.norms {
                let d = norm.shift.len();
                *norm = InputNorm {
                    shift: shift[at..at + d].to_vec(),
                    scale: scale[at..at + d].to_vec(),
                };
                at += d;
            }
            let mut trainer = FbsdeTrainer::new(nets, AdamConfig::with_lr(config.algo.lr_fbsde));
            get_adam(ck, "theta_adam", &mut trainer.adam)?;

            let outer = ck.u64s("u_trajectory.outer")?;
            let us = ck.f64s("u_trajectory.u")?;
            if us.len() != outer.len() * knots {
                return Err(Error::Contract("u trajectory sections are inconsistent".into()));
            }
            let u_trajectory = outer
                .iter()
                .zip(us.chunks(knots.max(1)))
                .map(|(&n, u)| (n as usize, u.to_vec()))
                .collect();

            let po = ck.u64s("principal_loss.outer")?;
            let pl = ck.f64s("principal_loss.loss")?;
            let ps = ck.f64s("principal_loss.surrogate")?;
            if po.len() != pl.len() || pl.len() != ps.len() {
                return Err(Error::Contract("principal loss sections are inconsistent".into()));
            }
            let principal_losses = po
                .iter()
                .zip(pl)
                .zip(ps)
                .map(|((&outer, &loss), &surrogate)| PrincipalLossRecord {
                    outer: outer as usize,
                    loss,
                    surrogate,
                })
                .collect();

            let idx = ck.u64s("fbsde.index")?;
            let fl = ck.f64s("fbsde.loss")?;
            if idx.len() != 4 * fl.len() {
                return Err(Error::Contract("FBSDE history sections are inconsistent".into()));
            }
            let fbsde_history = idx
                .chunks(4)
                .zip(fl)
                .map(|(i, &loss)| FbsdeLossRecord {
                    phase: if i[0] == 1 { Phase::Final } else { Phase::Search },
                    outer: i[1] as usize,
                    candidate: i[2] as usize,
                    iteration: i[3] as usize,
                    loss,
                })
                .collect();

            Ok(Self {
                mode,
                principal,
                trainer,
                next_outer: progress[2] as usize,
                stop,
                final_solved: progress[4] == 1,
                u_trajectory,
                principal_losses,
                fbsde_history,
                counters: WorkCounters {
                    outer_steps: counters[0],
                    candidates_trained: counters[1],
                    candidates_failed: counters[2],
                    inner_iterations: counters[3],
                    principal_steps: counters[4],
                },
                config: config.clone(),
            })
        };
        restore().map_err(wrap)
    }
}
