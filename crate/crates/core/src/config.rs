//! Run configuration: TOML file format, defaults and validation.
//!
//! ```toml
//! [compliance]
//! dt = "1/52"        # number or "a/b"
//! T = 1.0
//! K = 2
//! lambda = 6.0
//! R0 = 0.0
//!
//! [population.1]
//! pi = 0.25
//! h = 0.2
//! # sigma, zeta, gamma, beta, v, eta
//!
//! [knots]
//! R = [0.9]
//!
//! [algo]   # every key optional
//! N_O = 200
//!
//! [nets]   # optional
//! hidden = [32, 32]
//! activation = "tanh"
//! ```
//!
//! Optional `[principal]` keys: `constraint` (rows of Π, default `[π]`),
//! `R0` (vector, default `[compliance.R0]`), `utility` (`identity`, `power`,
//! `exponential`) and `utility_param`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::principal::{psi_inverse, PrincipalConfig, Utility};
use crate::rec::{EtaMode, PenaltyFunction, PopulationParams, RecParams};

/// Counters, tolerances and optimiser settings of the outer/inner loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    #[serde(rename = "N_O")]
    pub n_o: usize,
    #[serde(rename = "N_S")]
    pub n_s: usize,
    #[serde(rename = "N_F")]
    pub n_f: usize,
    #[serde(rename = "N_A")]
    pub n_a: usize,
    #[serde(rename = "N_P")]
    pub n_p: usize,
    #[serde(rename = "N_B")]
    pub n_b: usize,
    /// Sample paths per population.
    #[serde(rename = "N_paths")]
    pub n_paths: usize,
    #[serde(rename = "TOL")]
    pub tol: f64,
    #[serde(rename = "TOL_F")]
    pub tol_f: f64,
    pub eps0: f64,
    pub eps_decay: f64,
    /// Defaults to `0.01 · eps0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_min: Option<f64>,
    /// Iteration cap for stand-alone inner solves and the final solve.
    pub max_inner_iters: usize,
    /// Fresh batches for the final loss estimate and grid-search points.
    pub eval_batches: usize,
    pub lr_fbsde: f64,
    pub lr_surrogate: f64,
    pub lr_principal: f64,
    pub buffer_capacity: usize,
    /// Outer steps between checkpoints (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    /// Train the candidates of an outer step concurrently.
    pub parallel_candidates: bool,
    /// Initial unconstrained weights; defaults to `ψ⁻¹(0.1)` per knot.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u0: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            n_o: 200,
            n_s: 16,
            n_f: 200,
            n_a: 100,
            n_p: 5,
            n_b: 64,
            n_paths: 512,
            tol: 1e-3,
            tol_f: 1e-3,
            eps0: 0.5,
            eps_decay: 0.95,
            eps_min: None,
            max_inner_iters: 2000,
            eval_batches: 100,
            lr_fbsde: 1e-3,
            lr_surrogate: 1e-3,
            lr_principal: 1e-2,
            buffer_capacity: 2048,
            checkpoint_every: 1,
            parallel_candidates: false,
            u0: None,
            seed: 0,
        }
    }
}

impl AlgoConfig {
    pub fn eps_min(&self) -> f64 {
        self.eps_min.unwrap_or(0.01 * self.eps0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetsConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetsConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
        }
    }
}

/// A validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub rec: RecParams,
    pub knots: Vec<f64>,
    pub principal: PrincipalConfig,
    pub algo: AlgoConfig,
    pub nets: NetsConfig,
    /// `dt` as written in the file when given as a fraction, for round trips.
    dt_text: Option<String>,
}

/// Equality of content; the spelling of `dt` is not compared.
impl PartialEq for RunConfig {
    fn eq(&self, other: &Self) -> bool {
        self.rec == other.rec
            && self.knots == other.knots
            && self.principal == other.principal
            && self.algo == other.algo
            && self.nets == other.nets
    }
}

impl RunConfig {
    pub fn populations(&self) -> usize {
        self.rec.populations.len()
    }

    pub fn pi(&self) -> Vec<f64> {
        self.rec.populations.iter().map(|p| p.pi).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        vec![self.algo.n_paths; self.populations()]
    }

    pub fn u0(&self) -> Result<Vec<f64>> {
        match &self.algo.u0 {
            Some(u) => Ok(u.clone()),
            None => psi_inverse(&vec![0.1; self.knots.len()]),
        }
    }

    /// Zero-offset penalty with the given weights at the configured knots.
    pub fn penalty(&self, weights: &[f64]) -> Result<PenaltyFunction> {
        PenaltyFunction::new(0.0, weights.to_vec(), self.knots.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.rec.validate()?;
        let k = self.populations();
        self.principal.validate(k)?;
        if self.knots.is_empty() {
            return Err(Error::Config("knots.R must list at least one knot".into()));
        }
        if self.knots.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::Config(format!(
                "knots.R must be strictly increasing, got {:?}",
                self.knots
            )));
        }
        let a = &self.algo;
        for (name, v) in [
            ("N_O", a.n_o),
            ("N_S", a.n_s),
            ("N_F", a.n_f),
            ("N_A", a.n_a),
            ("N_B", a.n_b),
            ("N_paths", a.n_paths),
            ("max_inner_iters", a.max_inner_iters),
            ("eval_batches", a.eval_batches),
            ("buffer_capacity", a.buffer_capacity),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("algo.{name} must be at least 1")));
            }
        }
        if a.n_s < self.knots.len() {
            return Err(Error::Config(format!(
                "algo.N_S = {} must be at least the number of knots ({})",
                a.n_s,
                self.knots.len()
            )));
        }
        for (name, v) in [
            ("TOL", a.tol),
            ("TOL_F", a.tol_f),
            ("eps0", a.eps0),
            ("lr_fbsde", a.lr_fbsde),
            ("lr_surrogate", a.lr_surrogate),
            ("lr_principal", a.lr_principal),
        ] {
            if !(v > 0.0) || v.is_nan() {
                return Err(Error::Config(format!("algo.{name} must be positive, got {v}")));
            }
        }
        if !(a.eps_decay > 0.0 && a.eps_decay <= 1.0) {
            return Err(Error::Config(format!(
                "algo.eps_decay must lie in (0, 1], got {}",
                a.eps_decay
            )));
        }
        if !(a.eps_min() >= 0.0 && a.eps_min() <= a.eps0) {
            return Err(Error::Config(format!(
                "algo.eps_min must lie in [0, eps0], got {}",
                a.eps_min()
            )));
        }
        if let Some(u) = &a.u0 {
            if u.len() != self.knots.len() || u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "algo.u0 needs {} finite entries, got {:?}",
                    self.knots.len(),
                    u
                )));
            }
        }
        if self.nets.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "nets.hidden widths must be positive, got {:?}",
                self.nets.hidden
            )));
        }
        Ok(())
    }

    /// Reference REC market with the given knots and default algorithm settings.
    pub fn table12(knots: Vec<f64>) -> Self {
        let rec = RecParams::table12();
        let principal = PrincipalConfig::averaged(&[0.25, 0.75], rec.r0, rec.lambda);
        Self {
            rec,
            knots,
            principal,
            algo: AlgoConfig::default(),
            nets: NetsConfig::default(),
            dt_text: Some("1/52".into()),
        }
    }
}

/// Ten knots `0.8, 0.84, …, 1.16`.
pub fn ten_knots() -> Vec<f64> {
    knot_grid(0.8, 0.04, 10)
}

/// `count` knots `start + i·step`, rounded to 12 decimals.
pub fn knot_grid(start: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect()
}

/// Parses `start:step:count`.
pub fn parse_knot_spec(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Config(format!("--knots expects start:step:count, got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let step: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count == 0 || !(step > 0.0) {
        return Err(bad());
    }
    Ok(knot_grid(start, step, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Number {
    Float(f64),
    Text(String),
}

impl Number {
    fn value(&self, field: &str) -> Result<f64> {
        match self {
            Number::Float(v) => Ok(*v),
            Number::Text(t) => {
                let bad = || Error::Config(format!("{field}: cannot read {t:?} as a number or a/b fraction"));
                match t.split_once('/') {
                    Some((a, b)) => {
                        let a: f64 = a.trim().parse().map_err(|_| bad())?;
                        let b: f64 = b.trim().parse().map_err(|_| bad())?;
                        Ok(a / b)
                    }
                    None => t.trim().parse().map_err(|_| bad()),
                }
            }
        }
    }
}

fn number<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Number, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Float(f64),
        Text(String),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::Int(i) => Number::Float(i as f64),
        Raw::Float(f) => Number::Float(f),
        Raw::Text(t) => Number::Text(t),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCompliance {
    #[serde(deserialize_with = "number")]
    dt: Number,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(rename = "K")]
    k: usize,
    lambda: f64,
    #[serde(rename = "R0")]
    r0: f64,
    #[serde(default, skip_serializing_if = "is_default")]
    eta_mode: EtaMode,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKnots {
    #[serde(rename = "R")]
    r: Vec<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrincipal {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constraint: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R0", default, skip_serializing_if = "Option::is_none")]
    r0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    utility: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    utility_param: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    compliance: RawCompliance,
    population: BTreeMap<String, PopulationParams>,
    knots: RawKnots,
    #[serde(default)]
    algo: AlgoConfig,
    #[serde(default)]
    nets: NetsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    principal: Option<RawPrincipal>,
}

/// Parses and validates configuration text. `origin` names the source in errors.
pub fn parse_config_str(text: &str, origin: &str) -> Result<RunConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {}", e.to_string().trim())))?;
    let c = raw.compliance;
    let dt = c.dt.value("compliance.dt")?;
    let dt_text = match &c.dt {
        Number::Text(t) => Some(t.clone()),
        Number::Float(_) => None,
    };
    let mut populations = Vec::with_capacity(c.k);
    for k in 1..=c.k {
        let p = raw
            .population
            .get(&k.to_string())
            .ok_or_else(|| Error::Config(format!("{origin}: missing section [population.{k}] (K = {})", c.k)))?;
        populations.push(*p);
    }
    if let Some(extra) = raw
        .population
        .keys()
        .find(|key| key.parse::<usize>().map(|k| k == 0 || k > c.k).unwrap_or(true))
    {
        return Err(Error::Config(format!(
            "{origin}: unexpected section [population.{extra}] (K = {})",
            c.k
        )));
    }
    let rec = RecParams {
        populations,
        horizon: c.horizon,
        dt,
        lambda: c.lambda,
        r0: c.r0,
        eta_mode: c.eta_mode,
    };
    let pi: Vec<f64> = rec.populations.iter().map(|p| p.pi).collect();
    let rp = raw.principal.unwrap_or_default();
    let constraint = match rp.constraint {
        Some(rows) => {
            let s = rows.len();
            let width = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != width) {
                return Err(Error::Config(format!(
                    "{origin}: principal.constraint rows differ in length"
                )));
            }
            Array2::from_shape_vec((s, width), rows.concat())
                .map_err(|e| Error::Config(format!("{origin}: principal.constraint: {e}")))?
        }
        None => Array2::from_shape_vec((1, pi.len()), pi.clone()).expect("row"),
    };
    let utility = match (rp.utility.as_deref(), rp.utility_param) {
        (None | Some("identity"), None) => Utility::Identity,
        (Some("power"), Some(eta)) => Utility::Power { eta },
        (Some("exponential"), Some(a)) => Utility::Exponential { a },
        (u, p) => {
            return Err(Error::Config(format!(
                "{origin}: principal.utility {u:?} with utility_param {p:?} is not recognised"
            )))
        }
    };
    let principal = PrincipalConfig {
        constraint,
        r0: rp.r0.unwrap_or_else(|| vec![rec.r0]),
        lambda: rec.lambda,
        utility,
    };
    let config = RunConfig {
        rec,
        knots: raw.knots.r,
        principal,
        algo: raw.algo,
        nets: raw.nets,
        dt_text,
    };
    config
        .validate()
        .map_err(|e| Error::Config(format!("{origin}: {}", strip_kind(&e))))?;
    Ok(config)
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Contract(m) | Error::Numerical(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

/// Configuration text that parses back to an equal [`RunConfig`].
pub fn serialize_config(config: &RunConfig) -> String {
    let dt = match &config.dt_text {
        Some(t) if Number::Text(t.clone()).value("dt").ok() == Some(config.rec.dt) => Number::Text(t.clone()),
        _ => Number::Float(config.rec.dt),
    };
    let default_constraint = Array2::from_shape_vec((1, config.populations()), config.pi()).expect("row");
    let p = &config.principal;
    let (utility, utility_param) = match p.utility {
        Utility::Identity => (None, None),
        Utility::Power { eta } => (Some("power".to_string()), Some(eta)),
        Utility::Exponential { a } => (Some("exponential".to_string()), Some(a)),
    };
    let principal = RawPrincipal {
        constraint: (p.constraint != default_constraint)
            .then(|| p.constraint.rows().into_iter().map(|r| r.to_vec()).collect()),
        r0: (p.r0 != vec![config.rec.r0]).then(|| p.r0.clone()),
        utility,
        utility_param,
    };
    let has_principal = principal.constraint.is_some() || principal.r0.is_some() || principal.utility.is_some();
    let raw = RawConfig {
        compliance: RawCompliance {
            dt,
            horizon: config.rec.horizon,
            k: config.populations(),
            lambda: config.rec.lambda,
            r0: config.rec.r0,
            eta_mode: config.rec.eta_mode,
        },
        population: config
            .rec
            .populations
            .iter()
            .enumerate()
            .map(|(k, p)| ((k + 1).to_string(), *p))
            .collect(),
        knots: RawKnots {
            r: config.knots.clone(),
        },
        algo: config.algo.clone(),
        nets: config.nets.clone(),
        principal: has_principal.then_some(principal),
    };
    toml::to_string(&raw).expect("configuration is always serialisable")
}
