//! Renewable Energy Certificate (REC) market model.
//!
//! Agents in population `k` control expansion `α`, rental `g` and trading `Γ`.
//! State `X = (x, c)` is inventory and generation capacity, the adjoint is
//! `Y = (Y^X, Y^C)`, and noise is `(W, B)`. The equilibrium system is
//!
//! ```text
//! dx   = (h − (1/ζ + 1/γ) Y^X − S/γ + c) dt + σ dW
//! dc   = −(Y^C/β) dt
//! dY^X = Z^X dW,               Y^X_T = ∂g(x_T)
//! dY^C = −Y^X dt + Z^C dB,     Y^C_T = 0
//! S    = −Σ_k (π_k/γ_k) E[Y^X_k] / Σ_k (π_k/γ_k)
//! ```
//!
//! with optimal controls `α = −Y^C/β`, `g = −Y^X/ζ` and `Γ = −(Y^X + S)/γ`.
//! This trading rule is the one consistent with both the inventory drift
//! (`dx = h + c + g + Γ`) and the clearing price (`Σ_k π_k E[Γ_k] = 0`).

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{Dims, LawVars, ProblemSpec, SampleBatch, TimeGrid};
use crate::nn::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// `φ₀ + Σ w_j (R_j − x)⁺`
    #[default]
    Put,
    /// `φ₀ + Σ w_j (x − R_j)⁺`
    Call,
}

/// Piecewise-linear terminal penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyFunction {
    pub phi0: f64,
    pub weights: Vec<f64>,
    pub knots: Vec<f64>,
    pub orientation: Orientation,
}

impl PenaltyFunction {
    /// Put-style penalty.
    pub fn new(phi0: f64, weights: Vec<f64>, knots: Vec<f64>) -> Result<Self> {
        let g = Self {
            phi0,
            weights,
            knots,
            orientation: Orientation::Put,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(Error::Config("penalty needs at least one knot".into()));
        }
        if self.weights.len() != self.knots.len() {
            return Err(Error::Config(format!(
                "penalty has {} weights for {} knots",
                self.weights.len(),
                self.knots.len()
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("penalty weights must be nonnegative, got {w}")));
        }
        if self.knots.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::Config(format!(
                "knots must be strictly increasing, got {:?}",
                self.knots
            )));
        }
        Ok(())
    }
}

pub fn penalty_eval(g: &PenaltyFunction, x: f64) -> f64 {
    let hinge = |r: f64| match g.orientation {
        Orientation::Put => (r - x).max(0.0),
        Orientation::Call => (x - r).max(0.0),
    };
    g.phi0 + g.weights.iter().zip(&g.knots).map(|(w, r)| w * hinge(*r)).sum::<f64>()
}

/// Derivative with the kink assigned to the active side (`x ≤ R` for puts,
/// `x ≥ R` for calls).
pub fn penalty_derivative(g: &PenaltyFunction, x: f64) -> f64 {
    g.weights
        .iter()
        .zip(&g.knots)
        .map(|(w, r)| match g.orientation {
            Orientation::Put if x <= *r => -w,
            Orientation::Call if x >= *r => *w,
            _ => 0.0,
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationParams {
    pub pi: f64,
    pub h: f64,
    pub sigma: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub beta: f64,
    pub v: f64,
    pub eta: f64,
}

/// How `η` parameterises the initial inventory law `Normal(v, ·)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaMode {
    #[default]
    Variance,
    Std,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecParams {
    pub populations: Vec<PopulationParams>,
    pub horizon: f64,
    pub dt: f64,
    pub lambda: f64,
    pub r0: f64,
    pub eta_mode: EtaMode,
}

impl RecParams {
    /// Number of time steps `M = round(T/Δt)`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            horizon: self.horizon,
            steps: self.steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.populations.is_empty() {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("T must be positive, got {}", self.horizon)));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(Error::Config(format!("dt must lie in (0, T], got {}", self.dt)));
        }
        let m = self.steps() as f64;
        if (m * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(Error::Config(format!(
                "dt = {} does not divide T = {} into whole steps",
                self.dt, self.horizon
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !self.r0.is_finite() {
            return Err(Error::Config("R0 must be finite".into()));
        }
        for (k, p) in self.populations.iter().enumerate() {
            let name = |field: &str| format!("population.{}.{field}", k + 1);
            for (field, value) in [("zeta", p.zeta), ("gamma", p.gamma), ("beta", p.beta)] {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(Error::Config(format!("{} must be positive, got {value}", name(field))));
                }
            }
            if !(p.pi > 0.0) {
                return Err(Error::Config(format!("{} must be positive, got {}", name("pi"), p.pi)));
            }
            if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
                return Err(Error::Config(format!(
                    "{} must be nonnegative, got {}",
                    name("sigma"),
                    p.sigma
                )));
            }
            if !(p.eta >= 0.0 && p.eta.is_finite()) {
                return Err(Error::Config(format!(
                    "{} must be nonnegative, got {}",
                    name("eta"),
                    p.eta
                )));
            }
            if !(p.h.is_finite() && p.v.is_finite()) {
                return Err(Error::Config(format!("{} and {} must be finite", name("h"), name("v"))));
            }
        }
        let total: f64 = self.populations.iter().map(|p| p.pi).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("pi must sum to 1, got {total}")));
        }
        Ok(())
    }

    /// The parameters of the reference REC experiments.
    pub fn table12() -> Self {
        let pop = |pi, h, sigma, zeta, gamma, v| PopulationParams {
            pi,
            h,
            sigma,
            zeta,
            gamma,
            beta: 1.0,
            v,
            eta: 0.1,
        };
        Self {
            populations: vec![
                pop(0.25, 0.2, 0.1, 1.75, 1.25, 0.6),
                pop(0.75, 0.5, 0.15, 1.25, 1.75, 0.2),
            ],
            horizon: 1.0,
            dt: 1.0 / 52.0,
            lambda: 6.0,
            r0: 0.0,
            eta_mode: EtaMode::Variance,
        }
    }

    fn price_weights(&self) -> Vec<f64> {
        let raw: Vec<f64> = self.populations.iter().map(|p| p.pi / p.gamma).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|c| c / total).collect()
    }
}

/// Clearing price from the per-population means of `Y^X`.
pub fn equilibrium_price(mean_yx: &[f64], params: &RecParams) -> f64 {
    -params
        .price_weights()
        .iter()
        .zip(mean_yx)
        .map(|(c, m)| c * m)
        .sum::<f64>()
}

/// Clearing price at every grid point of a simulated batch.
pub fn price_path(batch: &SampleBatch, params: &RecParams) -> Vec<f64> {
    (0..=batch.grid.steps)
        .map(|m| {
            let means: Vec<f64> = batch.law.mean_y.iter().map(|a| a[[m, 0]]).collect();
            equilibrium_price(&means, params)
        })
        .collect()
}

/// `(dx, dc)` drift of one agent.
pub fn rec_forward_drift(p: &PopulationParams, c: f64, y_x: f64, y_c: f64, s: f64) -> (f64, f64) {
    (
        p.h - (1.0 / p.zeta + 1.0 / p.gamma) * y_x - s / p.gamma + c,
        -y_c / p.beta,
    )
}

/// `(dY^X, dY^C)` drift of one agent.
pub fn rec_backward_drift(y_x: f64) -> (f64, f64) {
    (0.0, -y_x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controls {
    pub expansion: f64,
    pub rental: f64,
    pub trading: f64,
}

pub fn optimal_controls(p: &PopulationParams, y_x: f64, y_c: f64, s: f64) -> Controls {
    Controls {
        expansion: -y_c / p.beta,
        rental: -y_x / p.zeta,
        trading: -(y_x + s) / p.gamma,
    }
}

/// Instantaneous agent cost `ζ/2 g² + γ/2 Γ² + β/2 α² + S Γ`.
pub fn running_cost(p: &PopulationParams, u: &Controls, s: f64) -> f64 {
    0.5 * p.zeta * u.rental * u.rental
        + 0.5 * p.gamma * u.trading * u.trading
        + 0.5 * p.beta * u.expansion * u.expansion
        + s * u.trading
}

/// The REC market as a two-dimensional MV-FBSDE.
#[derive(Debug, Clone, PartialEq)]
pub struct RecProblem {
    pub params: RecParams,
    pub penalty: PenaltyFunction,
    grid: TimeGrid,
}

pub fn build_rec_spec(params: RecParams, penalty: PenaltyFunction) -> Result<RecProblem> {
    params.validate()?;
    penalty.validate()?;
    let grid = params.grid();
    Ok(RecProblem { params, penalty, grid })
}

impl RecProblem {
    /// Price node `1 × 1` from the law's `Y^X` means.
    fn price(&self, tape: &mut Tape, law: &LawVars) -> Var {
        let weights = self.params.price_weights();
        let mut acc: Option<Var> = None;
        for (c, &my) in weights.iter().zip(law.mean_y) {
            let yx = tape.column(my, 0);
            let term = tape.scale(yx, -c);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        acc.expect("at least one population")
    }
}

impl ProblemSpec for RecProblem {
    fn populations(&self) -> usize {
        self.params.populations.len()
    }

    fn dims(&self) -> Dims {
        Dims { d_x: 2, d_y: 2, d_w: 2 }
    }

    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn forward_drift(&self, tape: &mut Tape, k: usize, _t: f64, x: Var, y: Var, law: &LawVars) -> Var {
        let p = &self.params.populations[k];
        let n = tape.value(x).nrows();
        let s = self.price(tape, law);
        let s_rows = tape.broadcast_rows(s, n);
        let c = tape.column(x, 1);
        let y_x = tape.column(y, 0);
        let y_c = tape.column(y, 1);

        let a = tape.scale(y_x, -(1.0 / p.zeta + 1.0 / p.gamma));
        let b = tape.scale(s_rows, -1.0 / p.gamma);
        let ab = tape.add(a, b);
        let abc = tape.add(ab, c);
        let dx = tape.shift(abc, p.h);
        let dc = tape.scale(y_c, -1.0 / p.beta);
        tape.concat(&[dx, dc])
    }

    fn backward_drift(&self, tape: &mut Tape, _k: usize, _t: f64, _x: Var, y: Var, _law: &LawVars) -> Var {
        let n = tape.value(y).nrows();
        let zero = tape.constant(Array2::zeros((n, 1)));
        let y_x = tape.column(y, 0);
        let dyc = tape.scale(y_x, -1.0);
        tape.concat(&[zero, dyc])
    }

    fn diffusion(&self, k: usize, _t: f64) -> Array2<f64> {
        let mut d = Array2::zeros((2, 2));
        d[[0, 0]] = self.params.populations[k].sigma;
        d
    }

    /// `(∂g(x_T), 0)`. The step function has zero derivative almost
    /// everywhere, so the target enters the tape as a constant.
    fn terminal_map(&self, tape: &mut Tape, _k: usize, x_terminal: Var) -> Var {
        let xt = tape.value(x_terminal);
        let mut out = Array2::zeros((xt.nrows(), 2));
        for (r, row) in xt.rows().into_iter().enumerate() {
            out[[r, 0]] = penalty_derivative(&self.penalty, row[0]);
        }
        tape.constant(out)
    }

    fn sample_initial(&self, k: usize, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let p = &self.params.populations[k];
        let sd = match self.params.eta_mode {
            EtaMode::Variance => p.eta.sqrt(),
            EtaMode::Std => p.eta,
        };
        let normal = Normal::new(p.v, sd).expect("validated eta");
        let mut x0 = Array2::zeros((n, 2));
        for r in 0..n {
            x0[[r, 0]] = normal.sample(rng);
        }
        x0
    }
}
