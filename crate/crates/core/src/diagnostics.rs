//! Equilibrium checks and summary statistics of simulated REC batches.

use crate::fbsde::SampleBatch;
use crate::rec::{optimal_controls, price_path, RecParams};

/// `max_m |Σ_k π_k mean_l Γ|` with the clearing price of the batch.
pub fn market_clearing_residual(batch: &SampleBatch, params: &RecParams) -> f64 {
    clearing_residual_with_prices(batch, params, &price_path(batch, params))
}

/// Clearing residual under an arbitrary price path of length `M + 1`.
pub fn clearing_residual_with_prices(batch: &SampleBatch, params: &RecParams, prices: &[f64]) -> f64 {
    (0..=batch.grid.steps)
        .map(|m| {
            batch
                .populations
                .iter()
                .zip(&params.populations)
                .map(|(pop, p)| {
                    let n = pop.samples();
                    let total: f64 = (0..n)
                        .map(|l| optimal_controls(p, pop.y[[m, l, 0]], pop.y[[m, l, 1]], prices[m]).trading)
                        .sum();
                    p.pi * total / n as f64
                })
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// `max_m |S_m − S_0|`.
pub fn price_constancy(prices: &[f64]) -> f64 {
    prices.iter().map(|s| (s - prices[0]).abs()).fold(0.0, f64::max)
}

/// Quantile of sorted data, linear interpolation between order statistics
/// at position `(n − 1) p / 100`.
pub fn quantile_sorted(sorted: &[f64], percent: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * percent / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Terminal inventory `X_T` of population `k`, in sample order.
pub fn terminal_inventory(batch: &SampleBatch, k: usize) -> Vec<f64> {
    let pop = &batch.populations[k];
    (0..pop.samples()).map(|l| pop.x[[batch.grid.steps, l, 0]]).collect()
}

/// One row per population, one column per requested percentile.
pub fn terminal_percentiles(batch: &SampleBatch, percents: &[f64]) -> Vec<Vec<f64>> {
    (0..batch.populations.len())
        .map(|k| {
            let mut xt = terminal_inventory(batch, k);
            xt.sort_by(f64::total_cmp);
            percents.iter().map(|&p| quantile_sorted(&xt, p)).collect()
        })
        .collect()
}

/// Mean control rates of one population on the time grid, with their
/// trapezoidal running integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSummary {
    pub time: Vec<f64>,
    pub expansion: Vec<f64>,
    pub rental: Vec<f64>,
    pub trading: Vec<f64>,
    pub total_expansion: Vec<f64>,
    pub total_rental: Vec<f64>,
    pub net_trading: Vec<f64>,
}

fn cumulative_trapezoid(rate: &[f64], dt: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(rate.len());
    out.push(0.0);
    for w in rate.windows(2) {
        acc += 0.5 * dt * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

pub fn control_summaries(batch: &SampleBatch, params: &RecParams) -> Vec<ControlSummary> {
    let prices = price_path(batch, params);
    let steps = batch.grid.steps;
    let dt = batch.grid.dt();
    batch
        .populations
        .iter()
        .zip(&params.populations)
        .map(|(pop, p)| {
            let n = pop.samples() as f64;
            let mut expansion = vec![0.0; steps + 1];
            let mut rental = vec![0.0; steps + 1];
            let mut trading = vec![0.0; steps + 1];
            for m in 0..=steps {
                for l in 0..pop.samples() {
                    let u = optimal_controls(p, pop.y[[m, l, 0]], pop.y[[m, l, 1]], prices[m]);
                    expansion[m] += u.expansion / n;
                    rental[m] += u.rental / n;
                    trading[m] += u.trading / n;
                }
            }
            ControlSummary {
                time: (0..=steps).map(|m| batch.grid.time(m)).collect(),
                total_expansion: cumulative_trapezoid(&expansion, dt),
                total_rental: cumulative_trapezoid(&rental, dt),
                net_trading: cumulative_trapezoid(&trading, dt),
                expansion,
                rental,
                trading,
            }
        })
        .collect()
}

/// Equal-width histogram over `[min, max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    assert!(bins > 0, "histogram needs at least one bin");
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if values.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Histogram { edges, counts }
}

/// Per population, the fraction of (sample, time) pairs where the
/// expansion or rental rate is negative.
pub fn negativity_report(batch: &SampleBatch, params: &RecParams) -> Vec<f64> {
    let prices = price_path(batch, params);
    batch
        .populations
        .iter()
        .zip(&params.populations)
        .map(|(pop, p)| {
            let steps = batch.grid.steps;
            let mut bad = 0usize;
            for m in 0..=steps {
                for l in 0..pop.samples() {
                    let u = optimal_controls(p, pop.y[[m, l, 0]], pop.y[[m, l, 1]], prices[m]);
                    if u.expansion < 0.0 || u.rental < 0.0 {
                        bad += 1;
                    }
                }
            }
            bad as f64 / ((steps + 1) * pop.samples()) as f64
        })
        .collect()
}

/// Sample mean and standard error (`sd / √n`, zero for a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
