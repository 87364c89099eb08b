//! Discretised McKean–Vlasov FBSDE engine (deep BSDE method).
//!
//! For `K` populations sharing one set of dimensions, each sample path `l` of
//! population `k` follows the Euler scheme
//!
//! ```text
//! X_m = X_{m-1} + φ_k(t_{m-1}, X_{m-1}, law_{m-1}, Y_{m-1}) Δt + σ_k(t_{m-1}) ΔW_m
//! Y_m = Y_{m-1} + ρ_k(t_{m-1}, X_{m-1}, law_{m-1}, Y_{m-1}) Δt + Z_{k,m}(X_{m-1}, Y_{m-1}) ΔW_m
//! X_0 = ξ,   Y_0 = Y0_k(X_0)
//! ```
//!
//! where `law_{m-1}` holds the cross-sample means of `X` and `Y` of every
//! population at `t_{m-1}`. All populations advance in lockstep so that the
//! law is always computed from a complete cross-section. The whole rollout is
//! recorded on a [`Tape`], so gradients flow through the law coupling too.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{fill_init, net_on_tape, Activation, AdamConfig, AdamState, NetSpec, Tape, Var};
use crate::seed;

/// State, adjoint and noise dimensions, common to all populations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_x: usize,
    pub d_y: usize,
    pub d_w: usize,
}

/// Uniform grid `t_m = m·T/M`, `m = 0..=M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(Error::Config(format!(
                "time grid needs T > 0 and M >= 1, got T = {horizon}, M = {steps}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.dt()
    }
}

/// Law inputs for the coefficient maps, as tape nodes (`1 × d` per population).
pub struct LawVars<'a> {
    pub mean_x: &'a [Var],
    pub mean_y: &'a [Var],
}

/// A `K`-population MV-FBSDE. Coefficient maps are recorded on the tape with
/// `x: n × d_x`, `y: n × d_y` inputs and must return `n × d_x` (forward) or
/// `n × d_y` (backward) nodes.
pub trait ProblemSpec: Sync {
    fn populations(&self) -> usize;
    fn dims(&self) -> Dims;
    fn grid(&self) -> TimeGrid;

    fn forward_drift(&self, tape: &mut Tape, k: usize, t: f64, x: Var, y: Var, law: &LawVars) -> Var;

    fn backward_drift(&self, tape: &mut Tape, k: usize, t: f64, x: Var, y: Var, law: &LawVars) -> Var;

    /// Deterministic `d_x × d_w` diffusion matrix.
    fn diffusion(&self, k: usize, t: f64) -> Array2<f64>;

    /// Terminal target for `Y_T` given `X_T` (`n × d_y`).
    fn terminal_map(&self, tape: &mut Tape, k: usize, x_terminal: Var) -> Var;

    /// Draws `n` initial states (`n × d_x`).
    fn sample_initial(&self, k: usize, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64>;
}

/// Cross-sample means per population and grid point: `mean_x[k]` is
/// `(M+1) × d_x`, `mean_y[k]` is `(M+1) × d_y`. Higher moments can be added
/// alongside without changing the coefficient interface.
#[derive(Debug, Clone, PartialEq)]
pub struct LawStats {
    pub mean_x: Vec<Array2<f64>>,
    pub mean_y: Vec<Array2<f64>>,
}

/// Per-population arithmetic mean of one cross-section (`n × d` → `d`).
pub fn law_stats(cross_section: &Array2<f64>) -> Result<Vec<f64>> {
    if cross_section.nrows() == 0 {
        return Err(Error::Contract("law statistics of an empty population".into()));
    }
    Ok(cross_section.mean_axis(Axis(0)).expect("non-empty").to_vec())
}

/// Simulated paths of one population.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationPaths {
    /// `(M+1) × n × d_x`
    pub x: Array3<f64>,
    /// `(M+1) × n × d_y`
    pub y: Array3<f64>,
    /// `M × n × (d_y·d_w)`; entry `m-1` multiplies `ΔW_m`.
    pub z: Array3<f64>,
    /// `M × n × d_w`; entry `m-1` is `ΔW_m`.
    pub noise: Array3<f64>,
}

impl PopulationPaths {
    pub fn samples(&self) -> usize {
        self.x.len_of(Axis(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub grid: TimeGrid,
    pub populations: Vec<PopulationPaths>,
    pub law: LawStats,
}

/// Random inputs of one batch: initial states and Brownian increments.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs {
    /// `n_k × d_x` per population.
    pub x0: Vec<Array2<f64>>,
    /// `M × n_k × d_w` per population.
    pub noise: Vec<Array3<f64>>,
}

impl BatchInputs {
    pub fn draw(spec: &dyn ProblemSpec, counts: &[usize], seed: u64) -> Result<Self> {
        check_counts(spec, counts)?;
        let grid = spec.grid();
        let d_w = spec.dims().d_w;
        let sd = grid.dt().sqrt();
        let mut rng = seed::stream(seed, "batch");
        let mut x0 = Vec::with_capacity(counts.len());
        let mut noise = Vec::with_capacity(counts.len());
        for (k, &n) in counts.iter().enumerate() {
            x0.push(spec.sample_initial(k, n, &mut rng));
            let mut dw = Array3::zeros((grid.steps, n, d_w));
            for v in dw.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = sd * z;
            }
            noise.push(dw);
        }
        Ok(Self { x0, noise })
    }
}

fn check_counts(spec: &dyn ProblemSpec, counts: &[usize]) -> Result<()> {
    if counts.len() != spec.populations() {
        return Err(Error::Contract(format!(
            "{} sample counts given for {} populations",
            counts.len(),
            spec.populations()
        )));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Contract(format!("population {} has no samples", k + 1)));
    }
    Ok(())
}

/// Fixed affine input map `v ↦ (v − shift) / scale` in front of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    fn from_moments(mean: &[f64], sd: &[f64]) -> Self {
        Self {
            shift: mean.to_vec(),
            scale: sd.iter().map(|&s| if s > 1e-8 { s } else { 1.0 }).collect(),
        }
    }

    fn is_identity(&self) -> bool {
        self.shift.iter().all(|&s| s == 0.0) && self.scale.iter().all(|&s| s == 1.0)
    }

    fn apply(&self, tape: &mut Tape, v: Var) -> Var {
        if self.is_identity() {
            return v;
        }
        let d = self.scale.len();
        let diag = Array2::from_shape_fn((d, d), |(i, j)| if i == j { 1.0 / self.scale[i] } else { 0.0 });
        let offset = Array2::from_shape_fn((1, d), |(_, j)| -self.shift[j] / self.scale[j]);
        let diag = tape.constant(diag);
        let offset = tape.constant(offset);
        let scaled = tape.matmul(v, diag);
        tape.add_bias(scaled, offset)
    }
}

/// Initial-value network `Y0_k` and per-step control networks `Z_{k,m}` for
/// every population, stored in one flat parameter vector. Each member net has
/// a fixed input standardisation (identity unless calibrated).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleNets {
    pub y0_spec: NetSpec,
    pub z_spec: NetSpec,
    pub populations: usize,
    pub steps: usize,
    pub params: Vec<f64>,
    /// Indexed `k·(M+1) + m`.
    pub norms: Vec<InputNorm>,
}

impl EnsembleNets {
    /// Fresh initialisation; every member net gets its own derived seed. Output
    /// layers start at zero, so the untrained ensemble has `Y0 ≡ 0` and `Z ≡ 0`.
    pub fn new(
        dims: Dims,
        populations: usize,
        steps: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut nets = Self::zeros(dims, populations, steps, hidden, activation)?;
        for k in 0..populations {
            for m in 0..=steps {
                let mut spec = if m == 0 {
                    nets.y0_spec.clone()
                } else {
                    nets.z_spec.clone()
                };
                spec.init_seed = seed::derive_seed(seed, &format!("net/{k}/{m}"));
                let off = nets.offset(k, m);
                let member = &mut nets.params[off..off + spec.param_count()];
                fill_init(&spec, member);
                let out = spec.layout().pop().expect("at least one layer");
                member[out.weights].iter_mut().for_each(|p| *p = 0.0);
            }
        }
        Ok(nets)
    }

    /// All parameters zero: `Y0 ≡ 0` and `Z ≡ 0`.
    pub fn zeros(
        dims: Dims,
        populations: usize,
        steps: usize,
        hidden: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let widths = |input: usize, output: usize| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(output);
            w
        };
        let y0_spec = NetSpec::new(widths(dims.d_x, dims.d_y), activation, 0);
        let z_spec = NetSpec::new(widths(dims.d_x + dims.d_y, dims.d_y * dims.d_w), activation, 0);
        y0_spec.validate()?;
        z_spec.validate()?;
        let per_pop = y0_spec.param_count() + steps * z_spec.param_count();
        let norms = (0..populations)
            .flat_map(|_| {
                std::iter::once(InputNorm::identity(dims.d_x))
                    .chain((0..steps).map(move |_| InputNorm::identity(dims.d_x + dims.d_y)))
            })
            .collect();
        Ok(Self {
            y0_spec,
            z_spec,
            populations,
            steps,
            params: vec![0.0; populations * per_pop],
            norms,
        })
    }

    pub fn norm(&self, k: usize, m: usize) -> &InputNorm {
        &self.norms[k * (self.steps + 1) + m]
    }

    /// Sets every input standardisation from one reference rollout with
    /// all-zero networks (so `Y ≡ 0`): forward-state inputs use the per-step
    /// cross-sectional mean and standard deviation, adjoint inputs use the mean
    /// of the terminal target and the largest standard deviation among its
    /// components. Degenerate deviations fall back to 1.
    pub fn calibrate_inputs(&mut self, spec: &dyn ProblemSpec, counts: &[usize], seed: u64) -> Result<()> {
        let mut blank = self.clone();
        blank.params.iter_mut().for_each(|p| *p = 0.0);
        blank
            .norms
            .iter_mut()
            .for_each(|n| *n = InputNorm::identity(n.shift.len()));
        let inputs = BatchInputs::draw(spec, counts, seed)?;
        let mut ro = rollout(spec, &blank, &inputs, None)?;
        let d_y = spec.dims().d_y;
        for k in 0..self.populations {
            let pop = &ro.batch.populations[k];
            let xt = pop.x.index_axis(Axis(0), self.steps).to_owned();
            let xt = ro.tape.constant(xt);
            let target = spec.terminal_map(&mut ro.tape, k, xt);
            let target = ro.tape.value(target);
            let y_mean = target.mean_axis(Axis(0)).expect("non-empty").to_vec();
            let y_sd = target.std_axis(Axis(0), 0.0);
            let y_scale = y_sd.iter().copied().fold(0.0, f64::max);
            let base = k * (self.steps + 1);
            for m in 0..self.steps {
                let x = pop.x.index_axis(Axis(0), m);
                let mut mean = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
                let mut sd = x.std_axis(Axis(0), 0.0).to_vec();
                if m == 0 {
                    self.norms[base] = InputNorm::from_moments(&mean, &sd);
                }
                // the Z net of step m + 1 reads the state at m
                mean.extend_from_slice(&y_mean);
                sd.extend(std::iter::repeat_n(y_scale, d_y));
                self.norms[base + m + 1] = InputNorm::from_moments(&mean, &sd);
            }
        }
        Ok(())
    }

    fn per_population(&self) -> usize {
        self.y0_spec.param_count() + self.steps * self.z_spec.param_count()
    }

    /// Offset of net `m` of population `k` (`m = 0` is `Y0`, `m ≥ 1` is `Z_m`).
    pub fn offset(&self, k: usize, m: usize) -> usize {
        let base = k * self.per_population();
        if m == 0 {
            base
        } else {
            base + self.y0_spec.param_count() + (m - 1) * self.z_spec.param_count()
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn check(&self, spec: &dyn ProblemSpec) -> Result<()> {
        let d = spec.dims();
        if self.populations != spec.populations()
            || self.steps != spec.grid().steps
            || self.y0_spec.input_dim() != d.d_x
            || self.y0_spec.output_dim() != d.d_y
            || self.z_spec.input_dim() != d.d_x + d.d_y
            || self.z_spec.output_dim() != d.d_y * d.d_w
        {
            return Err(Error::Contract(
                "network ensemble does not match the problem dimensions".into(),
            ));
        }
        Ok(())
    }
}

/// A recorded rollout: tape, parameter leaf, loss node and the path values.
pub struct Rollout {
    pub tape: Tape,
    pub theta: Var,
    pub loss: Var,
    pub batch: SampleBatch,
}

/// Records one batch on a fresh tape. With `law_override`, the coefficient
/// maps receive those constant means instead of the batch's own.
pub fn rollout(
    spec: &dyn ProblemSpec,
    nets: &EnsembleNets,
    inputs: &BatchInputs,
    law_override: Option<&LawStats>,
) -> Result<Rollout> {
    nets.check(spec)?;
    let counts: Vec<usize> = inputs.x0.iter().map(|a| a.nrows()).collect();
    check_counts(spec, &counts)?;
    let k_pops = spec.populations();
    let grid = spec.grid();
    let dims = spec.dims();
    let dt = grid.dt();
    let m_steps = grid.steps;
    for (k, x0) in inputs.x0.iter().enumerate() {
        if x0.ncols() != dims.d_x || inputs.noise[k].dim() != (m_steps, counts[k], dims.d_w) {
            return Err(Error::Contract(format!(
                "batch inputs of population {} have the wrong shape",
                k + 1
            )));
        }
    }

    let mut tape = Tape::new();
    let theta = tape.parameter(Array2::from_shape_vec((1, nets.len()), nets.params.clone()).expect("flat row"));

    let mut paths: Vec<PopulationPaths> = counts
        .iter()
        .map(|&n| PopulationPaths {
            x: Array3::zeros((m_steps + 1, n, dims.d_x)),
            y: Array3::zeros((m_steps + 1, n, dims.d_y)),
            z: Array3::zeros((m_steps, n, dims.d_y * dims.d_w)),
            noise: Array3::zeros((m_steps, n, dims.d_w)),
        })
        .collect();
    let mut law = LawStats {
        mean_x: vec![Array2::zeros((m_steps + 1, dims.d_x)); k_pops],
        mean_y: vec![Array2::zeros((m_steps + 1, dims.d_y)); k_pops],
    };

    let mut xs = Vec::with_capacity(k_pops);
    let mut ys = Vec::with_capacity(k_pops);
    for k in 0..k_pops {
        let x = tape.constant(inputs.x0[k].clone());
        let x_in = nets.norm(k, 0).apply(&mut tape, x);
        let y = net_on_tape(&mut tape, &nets.y0_spec, theta, nets.offset(k, 0), x_in);
        paths[k].noise.assign(&inputs.noise[k]);
        record(&tape, &mut paths[k], 0, x, y, k)?;
        xs.push(x);
        ys.push(y);
    }

    for m in 1..=m_steps {
        let t_prev = grid.time(m - 1);
        let (mean_x, mean_y) = law_nodes(&mut tape, &xs, &ys, law_override, m - 1);
        for k in 0..k_pops {
            law.mean_x[k].row_mut(m - 1).assign(&tape.value(mean_x[k]).row(0));
            law.mean_y[k].row_mut(m - 1).assign(&tape.value(mean_y[k]).row(0));
        }
        let law_vars = LawVars {
            mean_x: &mean_x,
            mean_y: &mean_y,
        };
        let mut next_x = Vec::with_capacity(k_pops);
        let mut next_y = Vec::with_capacity(k_pops);
        for k in 0..k_pops {
            let (x, y) = (xs[k], ys[k]);
            let dw_values = inputs.noise[k].index_axis(Axis(0), m - 1).to_owned();

            let fwd = spec.forward_drift(&mut tape, k, t_prev, x, y, &law_vars);
            let bwd = spec.backward_drift(&mut tape, k, t_prev, x, y, &law_vars);

            let sigma = spec.diffusion(k, t_prev);
            let shock = tape.constant(dw_values.dot(&sigma.t()));
            let fwd_dt = tape.scale(fwd, dt);
            let x_drifted = tape.add(x, fwd_dt);
            let x_new = tape.add(x_drifted, shock);

            let z_in = tape.concat(&[x, y]);
            let z_in = nets.norm(k, m).apply(&mut tape, z_in);
            let z = net_on_tape(&mut tape, &nets.z_spec, theta, nets.offset(k, m), z_in);
            let dw = tape.constant(dw_values);
            let z_dw = tape.row_mat_vec(z, dw);
            let bwd_dt = tape.scale(bwd, dt);
            let y_drifted = tape.add(y, bwd_dt);
            let y_new = tape.add(y_drifted, z_dw);

            paths[k].z.index_axis_mut(Axis(0), m - 1).assign(tape.value(z));
            record(&tape, &mut paths[k], m, x_new, y_new, k)?;
            next_x.push(x_new);
            next_y.push(y_new);
        }
        xs = next_x;
        ys = next_y;
    }
    for k in 0..k_pops {
        let px = paths[k].x.index_axis(Axis(0), m_steps).to_owned();
        let py = paths[k].y.index_axis(Axis(0), m_steps).to_owned();
        law.mean_x[k]
            .row_mut(m_steps)
            .assign(&law_stats(&px)?.into_iter().collect::<ndarray::Array1<_>>());
        law.mean_y[k]
            .row_mut(m_steps)
            .assign(&law_stats(&py)?.into_iter().collect::<ndarray::Array1<_>>());
    }

    let mut per_pop = Vec::with_capacity(k_pops);
    for k in 0..k_pops {
        let target = spec.terminal_map(&mut tape, k, xs[k]);
        let r = tape.sub(ys[k], target);
        let sq = tape.square(r);
        let total = tape.sum(sq);
        per_pop.push(tape.scale(total, 1.0 / counts[k] as f64));
    }
    let mut acc = per_pop[0];
    for &p in &per_pop[1..] {
        acc = tape.add(acc, p);
    }
    let loss = tape.scale(acc, 1.0 / k_pops as f64);
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(Error::Numerical(format!("FBSDE loss is {loss_value}")));
    }

    Ok(Rollout {
        tape,
        theta,
        loss,
        batch: SampleBatch {
            grid,
            populations: paths,
            law,
        },
    })
}

fn law_nodes(
    tape: &mut Tape,
    xs: &[Var],
    ys: &[Var],
    law_override: Option<&LawStats>,
    m: usize,
) -> (Vec<Var>, Vec<Var>) {
    match law_override {
        Some(law) => {
            let row = |a: &Array2<f64>| a.slice(s![m..m + 1, ..]).to_owned();
            let mx = law.mean_x.iter().map(|a| tape.constant(row(a))).collect();
            let my = law.mean_y.iter().map(|a| tape.constant(row(a))).collect();
            (mx, my)
        }
        None => {
            let mx = xs.iter().map(|&x| tape.column_mean(x)).collect();
            let my = ys.iter().map(|&y| tape.column_mean(y)).collect();
            (mx, my)
        }
    }
}

fn record(tape: &Tape, paths: &mut PopulationPaths, m: usize, x: Var, y: Var, k: usize) -> Result<()> {
    let (vx, vy) = (tape.value(x), tape.value(y));
    if vx.iter().chain(vy.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite state at timestep {m} in population {}",
            k + 1
        )));
    }
    paths.x.index_axis_mut(Axis(0), m).assign(vx);
    paths.y.index_axis_mut(Axis(0), m).assign(vy);
    Ok(())
}

/// Simulates one batch with fresh inputs drawn from `seed`.
pub fn simulate_paths(spec: &dyn ProblemSpec, nets: &EnsembleNets, counts: &[usize], seed: u64) -> Result<SampleBatch> {
    let inputs = BatchInputs::draw(spec, counts, seed)?;
    Ok(rollout(spec, nets, &inputs, None)?.batch)
}

/// Terminal mismatch `(1/K) Σ_k (1/N_k) ‖Y_T − terminal_map(X_T)‖²` of a batch.
pub fn fbsde_loss(batch: &SampleBatch, spec: &dyn ProblemSpec) -> f64 {
    let m = batch.grid.steps;
    let mut tape = Tape::new();
    let mut total = 0.0;
    for (k, p) in batch.populations.iter().enumerate() {
        let xt = tape.constant(p.x.index_axis(Axis(0), m).to_owned());
        let target = spec.terminal_map(&mut tape, k, xt);
        let yt = p.y.index_axis(Axis(0), m);
        let sq: f64 = (&yt - tape.value(target)).mapv(|r| r * r).sum();
        total += sq / p.samples() as f64;
    }
    total / batch.populations.len() as f64
}

/// Outcome of one call to [`FbsdeTrainer::train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss of every executed iteration, measured before that iteration's update.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Network ensemble plus its optimiser state; persists across calls so that
/// successive solves warm-start from the previous solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeTrainer {
    pub nets: EnsembleNets,
    pub adam: AdamState,
}

impl FbsdeTrainer {
    pub fn new(nets: EnsembleNets, config: AdamConfig) -> Self {
        let adam = AdamState::new(nets.len(), config);
        Self { nets, adam }
    }

    /// Up to `max_steps` iterations of simulate → loss → gradient → Adam, with
    /// fresh inputs every iteration (stream `iter/<i>` of `seed`). Stops right
    /// after the first update whose pre-update loss is below `tol`.
    ///
    /// On a numerical failure the nets keep the parameters of the last
    /// successful update and the error names that iteration.
    pub fn train(
        &mut self,
        spec: &dyn ProblemSpec,
        counts: &[usize],
        max_steps: usize,
        tol: f64,
        seed: u64,
    ) -> Result<TrainReport> {
        if max_steps == 0 {
            return Err(Error::Contract("FBSDE training needs at least one step".into()));
        }
        let mut history = Vec::with_capacity(max_steps);
        for it in 0..max_steps {
            let inputs = BatchInputs::draw(spec, counts, seed::derive_seed(seed, &format!("iter/{it}")))?;
            let fail = |e: Error| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "{msg} (FBSDE iteration {it}; parameters kept from iteration {})",
                    it as i64 - 1
                )),
                other => other,
            };
            let ro = rollout(spec, &self.nets, &inputs, None).map_err(fail)?;
            let loss = ro.tape.scalar_value(ro.loss);
            let grads = ro.tape.backward(ro.loss)?;
            let g = grads.flat(&ro.tape, ro.theta);
            self.adam.step(&mut self.nets.params, &g).map_err(fail)?;
            history.push(loss);
            if loss < tol {
                return Ok(TrainReport {
                    history,
                    converged: true,
                });
            }
        }
        Ok(TrainReport {
            history,
            converged: false,
        })
    }
}

/// Trains `nets` from a fresh optimiser state; returns the trained nets and the loss history.
pub fn train_fbsde(
    spec: &dyn ProblemSpec,
    nets: EnsembleNets,
    counts: &[usize],
    max_steps: usize,
    tol: f64,
    seed: u64,
    adam: AdamConfig,
) -> Result<(EnsembleNets, Vec<f64>)> {
    let mut trainer = FbsdeTrainer::new(nets, adam);
    let report = trainer.train(spec, counts, max_steps, tol, seed)?;
    Ok((trainer.nets, report.history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// `dX = (a − κ E[X]) dt + s dW`, `dY = Z dW`, `Y_T = c·X_T`, `X_0 = x0`,
    /// all `d`-dimensional with diagonal noise.
    struct Toy {
        k: usize,
        d: usize,
        a: f64,
        kappa: f64,
        s: f64,
        c: f64,
        x0: f64,
        grid: TimeGrid,
    }

    impl Toy {
        fn new(steps: usize) -> Self {
            Self {
                k: 1,
                d: 1,
                a: 0.3,
                kappa: 0.0,
                s: 0.2,
                c: 1.0,
                x0: 0.5,
                grid: TimeGrid::new(1.0, steps).unwrap(),
            }
        }
    }

    impl ProblemSpec for Toy {
        fn populations(&self) -> usize {
            self.k
        }
        fn dims(&self) -> Dims {
            Dims {
                d_x: self.d,
                d_y: self.d,
                d_w: self.d,
            }
        }
        fn grid(&self) -> TimeGrid {
            self.grid
        }
        fn forward_drift(&self, tape: &mut Tape, k: usize, _t: f64, x: Var, _y: Var, law: &LawVars) -> Var {
            let n = tape.value(x).nrows();
            let m = tape.broadcast_rows(law.mean_x[k], n);
            let pull = tape.scale(m, -self.kappa);
            tape.shift(pull, self.a)
        }
        fn backward_drift(&self, tape: &mut Tape, _k: usize, _t: f64, _x: Var, y: Var, _law: &LawVars) -> Var {
            tape.scale(y, 0.0)
        }
        fn diffusion(&self, _k: usize, _t: f64) -> Array2<f64> {
            Array2::eye(self.d) * self.s
        }
        fn terminal_map(&self, tape: &mut Tape, _k: usize, x: Var) -> Var {
            tape.scale(x, self.c)
        }
        fn sample_initial(&self, _k: usize, n: usize, _rng: &mut ChaCha8Rng) -> Array2<f64> {
            Array2::from_elem((n, self.d), self.x0)
        }
    }

    fn zero_nets(spec: &Toy) -> EnsembleNets {
        EnsembleNets::zeros(spec.dims(), spec.k, spec.grid.steps, &[8], Activation::Tanh).unwrap()
    }

    fn counts(spec: &Toy, n: usize) -> Vec<usize> {
        vec![n; spec.k]
    }

    #[test]
    fn noiseless_zero_nets_follow_the_drift() {
        let mut spec = Toy::new(10);
        spec.s = 0.0;
        let b = simulate_paths(&spec, &zero_nets(&spec), &[4], 1).unwrap();
        let p = &b.populations[0];
        for m in 0..=10 {
            for l in 0..4 {
                assert_abs_diff_eq!(p.x[[m, l, 0]], 0.5 + 0.3 * m as f64 / 10.0, epsilon = 1e-12);
                assert_eq!(p.y[[m, l, 0]], 0.0);
            }
        }
    }

    #[test]
    fn forward_path_is_the_euler_sum_of_the_inputs() {
        let spec = Toy::new(7);
        let inputs = BatchInputs::draw(&spec, &[5], 3).unwrap();
        let b = rollout(&spec, &zero_nets(&spec), &inputs, None).unwrap().batch;
        let dt = 1.0 / 7.0;
        for l in 0..5 {
            let mut x = 0.5;
            for m in 1..=7 {
                x += 0.3 * dt + 0.2 * inputs.noise[0][[m - 1, l, 0]];
                assert_abs_diff_eq!(b.populations[0].x[[m, l, 0]], x, epsilon = 1e-12);
            }
        }
        assert_eq!(b.populations[0].noise, inputs.noise[0]);
    }

    #[test]
    fn single_step_grid() {
        let spec = Toy::new(1);
        let inputs = BatchInputs::draw(&spec, &[3], 9).unwrap();
        let b = rollout(&spec, &zero_nets(&spec), &inputs, None).unwrap().batch;
        assert_eq!(b.populations[0].x.dim(), (2, 3, 1));
        assert_eq!(b.populations[0].z.dim(), (1, 3, 1));
        for l in 0..3 {
            let expect = 0.5 + 0.3 + 0.2 * inputs.noise[0][[0, l, 0]];
            assert_abs_diff_eq!(b.populations[0].x[[1, l, 0]], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn law_is_the_cross_section_mean_and_feeds_the_drift() {
        let mut spec = Toy::new(20);
        spec.kappa = 1.0;
        spec.s = 0.0;
        let b = simulate_paths(&spec, &zero_nets(&spec), &[6], 2).unwrap();
        // Deterministic mean ODE: m' = a − κ m.
        let dt = 0.05;
        let mut m = 0.5;
        for step in 0..=20 {
            assert_abs_diff_eq!(b.law.mean_x[0][[step, 0]], m, epsilon = 1e-12);
            let col = b.populations[0].x.slice(s![step, .., 0]).to_owned();
            assert_abs_diff_eq!(b.law.mean_x[0][[step, 0]], col.mean().unwrap(), epsilon = 1e-12);
            m += (0.3 - m) * dt;
        }
    }

    #[test]
    fn law_override_replaces_the_batch_mean() {
        let mut spec = Toy::new(4);
        spec.kappa = 1.0;
        spec.s = 0.0;
        let nets = zero_nets(&spec);
        let inputs = BatchInputs::draw(&spec, &[2], 0).unwrap();
        let law = LawStats {
            mean_x: vec![Array2::zeros((5, 1))],
            mean_y: vec![Array2::zeros((5, 1))],
        };
        let b = rollout(&spec, &nets, &inputs, Some(&law)).unwrap().batch;
        assert_abs_diff_eq!(b.populations[0].x[[4, 0, 0]], 0.5 + 0.3, epsilon = 1e-12);
    }

    #[test]
    fn loss_of_one_population_is_the_mean_squared_norm() {
        let mut spec = Toy::new(1);
        spec.d = 2;
        spec.c = 0.0;
        let mut b = simulate_paths(&spec, &zero_nets(&spec), &[1], 0).unwrap();
        b.populations[0].y[[1, 0, 0]] = 0.1;
        b.populations[0].y[[1, 0, 1]] = -0.2;
        assert_abs_diff_eq!(fbsde_loss(&b, &spec), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn loss_averages_over_populations() {
        let mut spec = Toy::new(1);
        spec.k = 2;
        spec.d = 2;
        spec.c = 0.0;
        let mut b = simulate_paths(&spec, &zero_nets(&spec), &[1, 2], 0).unwrap();
        b.populations[0].y[[1, 0, 0]] = 0.1;
        b.populations[0].y[[1, 0, 1]] = -0.2;
        // Population 2: squared norms 0.25 and 0.25.
        b.populations[1].y[[1, 0, 0]] = 0.5;
        b.populations[1].y[[1, 1, 1]] = -0.5;
        assert_abs_diff_eq!(fbsde_loss(&b, &spec), (0.05 + 0.25) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn rollout_loss_matches_batch_loss() {
        let spec = Toy::new(5);
        let mut nets = EnsembleNets::new(spec.dims(), 1, 5, &[8], Activation::Tanh, 4).unwrap();
        nets.params
            .iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p += 0.01 * (i % 7) as f64);
        let inputs = BatchInputs::draw(&spec, &[16], 5).unwrap();
        let ro = rollout(&spec, &nets, &inputs, None).unwrap();
        assert_abs_diff_eq!(
            ro.tape.scalar_value(ro.loss),
            fbsde_loss(&ro.batch, &spec),
            epsilon = 1e-13
        );
    }

    #[test]
    fn zero_target_and_zero_nets_give_zero_loss() {
        let mut spec = Toy::new(6);
        spec.c = 0.0;
        let mut trainer = FbsdeTrainer::new(zero_nets(&spec), AdamConfig::default());
        let report = trainer.train(&spec, &counts(&spec, 8), 5, 1e-12, 0).unwrap();
        assert_eq!(report.history, vec![0.0]);
        assert!(report.converged);
    }

    #[test]
    fn infinite_tolerance_stops_after_one_iteration() {
        let spec = Toy::new(6);
        let mut trainer = FbsdeTrainer::new(zero_nets(&spec), AdamConfig::default());
        let before = trainer.nets.params.clone();
        let report = trainer.train(&spec, &[8], 50, f64::INFINITY, 0).unwrap();
        assert_eq!(report.history.len(), 1);
        assert!(report.converged);
        assert_ne!(trainer.nets.params, before);
        assert_eq!(trainer.adam.t, 1);
    }

    #[test]
    fn zero_steps_is_a_contract_error() {
        let spec = Toy::new(2);
        let mut trainer = FbsdeTrainer::new(zero_nets(&spec), AdamConfig::default());
        assert!(matches!(trainer.train(&spec, &[4], 0, 1.0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_counts_are_rejected() {
        let spec = Toy::new(2);
        assert!(BatchInputs::draw(&spec, &[4, 4], 0).is_err());
        assert!(BatchInputs::draw(&spec, &[0], 0).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_the_loss() {
        let spec = Toy::new(8);
        let nets = EnsembleNets::new(spec.dims(), 1, 8, &[8], Activation::Tanh, 1).unwrap();
        let adam = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let (a, ha) = train_fbsde(&spec, nets.clone(), &[64], 300, 0.0, 7, adam).unwrap();
        let (b, hb) = train_fbsde(&spec, nets, &[64], 300, 0.0, 7, adam).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let start: f64 = ha[..10].iter().sum::<f64>() / 10.0;
        let end: f64 = ha[ha.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(end < 0.05 * start, "{start} -> {end}");
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut spec = Toy::new(4);
        spec.kappa = 0.7;
        let mut nets = EnsembleNets::new(spec.dims(), 1, 4, &[5], Activation::Tanh, 11).unwrap();
        let mut rng = seed::stream(3, "perturb");
        nets.params
            .iter_mut()
            .for_each(|p| *p += 0.3 * rng.sample::<f64, _>(StandardNormal));
        let inputs = BatchInputs::draw(&spec, &[6], 8).unwrap();
        let ro = rollout(&spec, &nets, &inputs, None).unwrap();
        let g = ro.tape.backward(ro.loss).unwrap().flat(&ro.tape, ro.theta);
        let h = 1e-5;
        let loss_at = |params: &[f64]| {
            let mut n = nets.clone();
            n.params = params.to_vec();
            let ro = rollout(&spec, &n, &inputs, None).unwrap();
            ro.tape.scalar_value(ro.loss)
        };
        let mut worst = 0.0f64;
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..nets.len() {
            let mut p = nets.params.clone();
            p[i] += h;
            let up = loss_at(&p);
            p[i] -= 2.0 * h;
            let down = loss_at(&p);
            worst = worst.max(((up - down) / (2.0 * h) - g[i]).abs());
        }
        assert!(worst < 1e-6 * scale.max(1e-3), "worst {worst}, scale {scale}");
    }

    #[test]
    fn noise_has_the_brownian_moments() {
        let spec = Toy::new(4);
        let inputs = BatchInputs::draw(&spec, &[20_000], 12).unwrap();
        let dw = &inputs.noise[0];
        let n = dw.len() as f64;
        let mean = dw.sum() / n;
        let var = dw.mapv(|v| v * v).sum() / n - mean * mean;
        assert!(mean.abs() < 4.0 * (0.25f64 / n).sqrt(), "{mean}");
        assert_abs_diff_eq!(var, 0.25, epsilon = 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn same_seed_same_batch(seed in any::<u64>()) {
            let spec = Toy::new(3);
            let nets = zero_nets(&spec);
            let a = simulate_paths(&spec, &nets, &[4], seed).unwrap();
            let b = simulate_paths(&spec, &nets, &[4], seed).unwrap();
            prop_assert_eq!(&a, &b);
            let c = simulate_paths(&spec, &nets, &[4], seed ^ 1).unwrap();
            prop_assert_ne!(a.populations[0].noise.clone(), c.populations[0].noise.clone());
        }

        #[test]
        fn loss_is_invariant_under_sample_permutation(seed in any::<u64>(), shift in 1usize..6) {
            let mut spec = Toy::new(3);
            spec.kappa = 0.5;
            let nets = EnsembleNets::new(spec.dims(), 1, 3, &[4], Activation::Tanh, seed).unwrap();
            let inputs = BatchInputs::draw(&spec, &[6], seed).unwrap();
            let mut permuted = inputs.clone();
            for l in 0..6 {
                let src = (l + shift) % 6;
                permuted.noise[0].slice_mut(s![.., l, ..]).assign(&inputs.noise[0].slice(s![.., src, ..]));
            }
            let a = rollout(&spec, &nets, &inputs, None).unwrap();
            let b = rollout(&spec, &nets, &permuted, None).unwrap();
            let (la, lb) = (a.tape.scalar_value(a.loss), b.tape.scalar_value(b.loss));
            prop_assert!((la - lb).abs() <= 1e-12 * la.abs().max(1.0));
        }
    }
}
