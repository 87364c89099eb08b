//! The principal's outer problem.
//!
//! Weights live in an unconstrained space `u ∈ ℝ^N̄` and are mapped to
//! admissible penalty weights by `w = ψ(u)` (componentwise softplus). The
//! offset `φ₀` is eliminated: for fixed weights the best feasible offset is
//!
//! ```text
//! φ₀ = min_i (R0_i − Π_i·V̂) / (Π_i·1)
//! ```
//!
//! and substituting it gives the sample loss
//!
//! ```text
//! L̂_P(w) = λ max_i (Π_i·V̂ − R0_i)/(Π_i·1) + Σ_k π_k mean_l(−U(X_T) − λ ĝ(X_T))
//! ```
//!
//! where `ĝ` is the penalty with zero offset and `V̂_k` the agents' estimated
//! expected cost under `ĝ`. A small network fitted to buffered `(u, L̂_P)`
//! pairs supplies gradients in `u`.

use std::collections::VecDeque;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::SampleBatch;
use crate::nn::{fill_init, forward_batch, net_on_tape, softplus, Activation, AdamConfig, AdamState, NetSpec, Tape};
use crate::rec::{optimal_controls, penalty_eval, price_path, running_cost, PenaltyFunction, RecParams};

/// `ψ(u) = ln(1 + e^u)` componentwise.
pub fn psi(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&x| softplus(x)).collect()
}

/// Inverse of [`psi`]; defined for strictly positive weights.
pub fn psi_inverse(w: &[f64]) -> Result<Vec<f64>> {
    w.iter()
        .map(|&x| {
            if x > 0.0 && x.is_finite() {
                Ok(x + (-(-x).exp()).ln_1p())
            } else {
                Err(Error::Config(format!("weight {x} has no preimage under softplus")))
            }
        })
        .collect()
}

/// Trapezoid rule on a uniform grid with spacing `dt`.
pub fn running_cost_integral(f: &[f64], dt: f64) -> f64 {
    match f.len() {
        0 | 1 => 0.0,
        n => dt * (f[1..n - 1].iter().sum::<f64>() + 0.5 * (f[0] + f[n - 1])),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Utility {
    #[default]
    Identity,
    /// CRRA: `x^(1−η)/(1−η)`, or `ln x` at `η = 1`. Defined for `x > 0`.
    Power { eta: f64 },
    /// CARA: `(1 − e^(−a x))/a`.
    Exponential { a: f64 },
}

impl Utility {
    pub fn eval(&self, x: f64) -> Result<f64> {
        match *self {
            Utility::Identity => Ok(x),
            Utility::Power { eta } => {
                if x <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "power utility is undefined at terminal inventory {x}"
                    )));
                }
                if (eta - 1.0).abs() < 1e-12 {
                    Ok(x.ln())
                } else {
                    Ok(x.powf(1.0 - eta) / (1.0 - eta))
                }
            }
            Utility::Exponential { a } => Ok(-(-a * x).exp_m1() / a),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Utility::Identity => Ok(()),
            Utility::Power { eta } if eta > 0.0 && eta.is_finite() => Ok(()),
            Utility::Exponential { a } if a > 0.0 && a.is_finite() => Ok(()),
            other => Err(Error::Config(format!("utility parameters out of range: {other:?}"))),
        }
    }
}

/// Constraint structure and preferences of the principal.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalConfig {
    /// `s × K`, nonnegative, no zero row.
    pub constraint: Array2<f64>,
    /// Reservation costs, length `s`.
    pub r0: Vec<f64>,
    pub lambda: f64,
    pub utility: Utility,
}

impl PrincipalConfig {
    /// Single averaged constraint `π·V ≤ R0`.
    pub fn averaged(pi: &[f64], r0: f64, lambda: f64) -> Self {
        Self {
            constraint: Array2::from_shape_vec((1, pi.len()), pi.to_vec()).expect("row"),
            r0: vec![r0],
            lambda,
            utility: Utility::Identity,
        }
    }

    pub fn validate(&self, populations: usize) -> Result<()> {
        let (s, k) = self.constraint.dim();
        if k != populations || s != self.r0.len() || s == 0 {
            return Err(Error::Config(format!(
                "constraint matrix is {s}x{k} with {} reservation costs for {populations} populations",
                self.r0.len()
            )));
        }
        if self.constraint.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::Config("constraint matrix must be nonnegative".into()));
        }
        if let Some(i) = self.constraint.axis_iter(Axis(0)).position(|row| row.sum() <= 0.0) {
            return Err(Error::Config(format!("constraint row {} is zero", i + 1)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        self.utility.validate()
    }

    fn rows(&self) -> impl Iterator<Item = (ndarray::ArrayView1<'_, f64>, f64)> + '_ {
        self.constraint.axis_iter(Axis(0)).zip(self.r0.iter().copied())
    }
}

/// Per-population expected agent cost under `g_hat`: mean over paths of the
/// trapezoidal running cost plus `g_hat(X_T)`.
pub fn agent_value_estimate(batch: &SampleBatch, params: &RecParams, g_hat: &PenaltyFunction) -> Vec<f64> {
    let dt = batch.grid.dt();
    let m_steps = batch.grid.steps;
    let prices = price_path(batch, params);
    let mut costs = vec![0.0; m_steps + 1];
    batch
        .populations
        .iter()
        .zip(&params.populations)
        .map(|(pop, p)| {
            let n = pop.samples();
            let mut total = 0.0;
            for l in 0..n {
                for (m, c) in costs.iter_mut().enumerate() {
                    let u = optimal_controls(p, pop.y[[m, l, 0]], pop.y[[m, l, 1]], prices[m]);
                    *c = running_cost(p, &u, prices[m]);
                }
                total += running_cost_integral(&costs, dt) + penalty_eval(g_hat, pop.x[[m_steps, l, 0]]);
            }
            total / n as f64
        })
        .collect()
}

/// Per-population `mean_l(−U(X_T) − λ ĝ(X_T))`.
pub fn terminal_terms(batch: &SampleBatch, g_hat: &PenaltyFunction, config: &PrincipalConfig) -> Result<Vec<f64>> {
    let m = batch.grid.steps;
    batch
        .populations
        .iter()
        .map(|pop| {
            let n = pop.samples();
            let mut total = 0.0;
            for l in 0..n {
                let x = pop.x[[m, l, 0]];
                total += -config.utility.eval(x)? - config.lambda * penalty_eval(g_hat, x);
            }
            Ok(total / n as f64)
        })
        .collect()
}

/// `λ max_i (Π_i·V̂ − R0_i)/(Π_i·1) + Σ_k π_k terminal_k`.
pub fn reformulated_loss(v_hat: &[f64], terminal: &[f64], pi: &[f64], config: &PrincipalConfig) -> f64 {
    let worst = config
        .rows()
        .map(|(row, r0)| (row.dot(&ndarray::aview1(v_hat)) - r0) / row.sum())
        .fold(f64::NEG_INFINITY, f64::max);
    let tail: f64 = pi.iter().zip(terminal).map(|(p, t)| p * t).sum();
    config.lambda * worst + tail
}

/// The largest offset satisfying every constraint row.
pub fn phi0_recover(v_hat: &[f64], config: &PrincipalConfig) -> f64 {
    config
        .rows()
        .map(|(row, r0)| (r0 - row.dot(&ndarray::aview1(v_hat))) / row.sum())
        .fold(f64::INFINITY, f64::min)
}

/// Objective with an explicit offset, or `None` when `φ₀` violates a constraint.
/// `v_hat` is the agent cost without offset; the offset adds `φ₀` to every entry.
pub fn constrained_objective(
    phi0: f64,
    v_hat: &[f64],
    terminal: &[f64],
    pi: &[f64],
    config: &PrincipalConfig,
) -> Option<f64> {
    let feasible = config
        .rows()
        .all(|(row, r0)| row.iter().zip(v_hat).map(|(p, v)| p * (v + phi0)).sum::<f64>() <= r0 + 1e-12);
    feasible.then(|| {
        pi.iter()
            .zip(terminal)
            .map(|(p, t)| p * (t - config.lambda * phi0))
            .sum()
    })
}

/// `L̂_P` of a batch simulated under weights `w` at the given knots.
pub fn principal_sample_loss(
    batch: &SampleBatch,
    params: &RecParams,
    weights: &[f64],
    knots: &[f64],
    config: &PrincipalConfig,
) -> Result<f64> {
    let g_hat = PenaltyFunction::new(0.0, weights.to_vec(), knots.to_vec())?;
    let v_hat = agent_value_estimate(batch, params, &g_hat);
    let terminal = terminal_terms(batch, &g_hat, config)?;
    let pi: Vec<f64> = params.populations.iter().map(|p| p.pi).collect();
    Ok(reformulated_loss(&v_hat, &terminal, &pi, config))
}

/// `n` points in the closed Euclidean `ε`-ball around `u`; the first is `u`.
pub fn sample_ball(u: &[f64], eps: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let dim = u.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    out.push(u.to_vec());
    while out.len() < n {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let radius = eps * rng.random::<f64>().powf(1.0 / dim as f64);
        out.push(u.iter().zip(&dir).map(|(c, d)| c + radius * d / norm).collect());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferRecord {
    pub u: Vec<f64>,
    pub loss: f64,
    pub step: usize,
}

/// Bounded FIFO memory of evaluated candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    records: VecDeque<BufferRecord>,
    inserted: u64,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            records: VecDeque::with_capacity(capacity),
            inserted: 0,
        }
    }

    pub fn push(&mut self, record: BufferRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total insertions, including evicted records.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn records(&self) -> impl Iterator<Item = &BufferRecord> {
        self.records.iter()
    }

    pub(crate) fn restore(capacity: usize, records: Vec<BufferRecord>, inserted: u64) -> Self {
        Self {
            capacity,
            records: records.into(),
            inserted,
        }
    }

    /// `n` indices drawn uniformly with replacement.
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.records.len())).collect()
    }
}

/// Learned map `u ↦ L̂_P(ψ(u))`. The network regresses standardised targets
/// (buffer mean and standard deviation, refreshed at every fit).
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub spec: NetSpec,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub target_mean: f64,
    pub target_scale: f64,
}

impl Surrogate {
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, lr: f64, seed: u64) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let spec = NetSpec::new(widths, activation, seed);
        spec.validate()?;
        let mut params = vec![0.0; spec.param_count()];
        fill_init(&spec, &mut params);
        let adam = AdamState::new(params.len(), AdamConfig::with_lr(lr));
        Ok(Self {
            spec,
            params,
            adam,
            target_mean: 0.0,
            target_scale: 1.0,
        })
    }

    pub fn predict(&self, u: &[f64]) -> Result<f64> {
        let w = Array2::from_shape_vec((1, u.len()), psi(u)).expect("row");
        let out = forward_batch(&self.params, &self.spec, w.view())?;
        Ok(out[[0, 0]] * self.target_scale + self.target_mean)
    }

    /// Prediction and its gradient in `u`.
    pub fn value_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        if u.len() != self.spec.input_dim() {
            return Err(Error::Contract(format!(
                "surrogate expects {} weights, got {}",
                self.spec.input_dim(),
                u.len()
            )));
        }
        let mut tape = Tape::new();
        let theta = tape.constant(Array2::from_shape_vec((1, self.params.len()), self.params.clone()).expect("row"));
        let uu = tape.parameter(Array2::from_shape_vec((1, u.len()), u.to_vec()).expect("row"));
        let w = tape.softplus(uu);
        let out = net_on_tape(&mut tape, &self.spec, theta, 0, w);
        let raw = tape.scalar_value(out);
        let grads = tape.backward(out)?;
        let g = grads
            .flat(&tape, uu)
            .into_iter()
            .map(|g| g * self.target_scale)
            .collect();
        Ok((raw * self.target_scale + self.target_mean, g))
    }

    /// `steps` minibatch MSE updates on the buffer. Returns the last minibatch loss
    /// (in standardised units).
    pub fn fit(&mut self, buffer: &MemoryBuffer, steps: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        if buffer.is_empty() {
            return Err(Error::Contract("surrogate fit on an empty buffer".into()));
        }
        if batch == 0 {
            return Err(Error::Contract("surrogate batch size must be positive".into()));
        }
        let n = buffer.len() as f64;
        let mean = buffer.records().map(|r| r.loss).sum::<f64>() / n;
        let var = buffer.records().map(|r| (r.loss - mean).powi(2)).sum::<f64>() / n;
        self.target_mean = mean;
        self.target_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };

        let dim = self.spec.input_dim();
        let mut last = f64::NAN;
        for _ in 0..steps {
            let idx = buffer.sample(batch, rng);
            let mut inputs = Array2::zeros((batch, dim));
            let mut targets = Array2::zeros((batch, 1));
            for (r, &i) in idx.iter().enumerate() {
                let rec = &buffer.records[i];
                for (j, &v) in rec.u.iter().enumerate() {
                    inputs[[r, j]] = v;
                }
                targets[[r, 0]] = (rec.loss - self.target_mean) / self.target_scale;
            }
            let mut tape = Tape::new();
            let theta =
                tape.parameter(Array2::from_shape_vec((1, self.params.len()), self.params.clone()).expect("row"));
            let u = tape.constant(inputs);
            let w = tape.softplus(u);
            let pred = net_on_tape(&mut tape, &self.spec, theta, 0, w);
            let y = tape.constant(targets);
            let r = tape.sub(pred, y);
            let sq = tape.square(r);
            let loss = tape.mean(sq);
            last = tape.scalar_value(loss);
            let g = tape.backward(loss)?.flat(&tape, theta);
            self.adam.step(&mut self.params, &g)?;
        }
        Ok(last)
    }
}

/// `n_p` Adam steps on `u` down the surrogate's gradient.
pub fn principal_grad_step(surrogate: &Surrogate, u: &[f64], n_p: usize, adam: &mut AdamState) -> Result<Vec<f64>> {
    let mut u = u.to_vec();
    for _ in 0..n_p {
        let (_, g) = surrogate.value_and_grad(&u)?;
        adam.step(&mut u, &g)?;
    }
    Ok(u)
}

/// Geometric decay of the sampling radius with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub eps0: f64,
    pub decay: f64,
    pub min: f64,
}

impl EpsilonSchedule {
    pub fn new(eps0: f64) -> Self {
        Self {
            eps0,
            decay: 0.95,
            min: 0.01 * eps0,
        }
    }

    pub fn update(&self, eps: f64) -> f64 {
        (self.decay * eps).max(self.min)
    }
}

/// Mutable state of the outer optimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalState {
    pub u: Vec<f64>,
    pub u_adam: AdamState,
    pub surrogate: Surrogate,
    pub buffer: MemoryBuffer,
    pub eps: f64,
    /// Principal steps taken so far.
    pub j: usize,
}
