//! Output directory layout. Every CSV starts with a header row; floats are
//! written as `{:.16e}` (17 significant digits, exact round trip).
//!
//! | file                          | columns                                         |
//! |-------------------------------|-------------------------------------------------|
//! | `config.cfg`                  | configuration snapshot                          |
//! | `summary.txt`                 | `key = value` lines                             |
//! | `u_trajectory.csv`            | `outer_step, u_1.., w_1..`                      |
//! | `principal_loss.csv`          | `outer_step, loss, surrogate`                   |
//! | `fbsde_loss.csv`              | `phase, outer_step, candidate, iteration, loss` |
//! | `buffer.csv`                  | `outer_step, loss, u_1..`                       |
//! | `price_path.csv`              | `step, time, price`                             |
//! | `controls_<k>.csv`            | `step, time,` rates and running totals          |
//! | `terminal_inventory_<k>.csv`  | `sample, x_T`                                   |
//! | `terminal_histogram_<k>.csv`  | `bin, lower, upper, count`                      |
//! | `percentiles.csv`             | `population, p5, p10, ..`                       |
//! | `grid.csv` (grid search)      | `w, mean, se, converged, iterations, last_fbsde_loss` |
//! | `checkpoint.bin`              | binary state, see [`crate::checkpoint`]         |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::serialize_config;
use crate::config::RunConfig;
use crate::diagnostics::histogram;
use crate::error::{Error, Result};
use crate::orchestrator::{GridPoint, Phase, RunResult, RunState, PERCENTILES};

/// Bins of the terminal-inventory histograms.
pub const HISTOGRAM_BINS: usize = 31;

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn list(values: &[f64]) -> String {
    values.iter().map(|&v| float(v)).collect::<Vec<_>>().join(", ")
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.bin")
}

/// `summary.txt` contents.
pub fn summary(state: &RunState, result: &RunResult) -> String {
    let c = &result.counters;
    let d = &result.diagnostics;
    let mut s = String::new();
    let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
    line("mode", format!("{:?}", state.mode));
    line("stop_reason", result.stop.label().into());
    line("knots", list(&state.config.knots));
    line("w", list(&result.w));
    line("u", list(&result.u));
    line("phi0", float(result.phi0));
    line("principal_loss_mean", float(result.loss_mean));
    line("principal_loss_se", float(result.loss_se));
    line("eval_batches", result.eval_losses.len().to_string());
    line("agent_cost", list(&result.v_hat));
    line("fbsde_loss_eval", float(result.fbsde_loss));
    line("clearing_residual", float(d.clearing_residual));
    line("price_deviation", float(d.price_deviation));
    line("negative_control_fraction", list(&d.negativity));
    for (k, p) in d.percentiles.iter().enumerate() {
        line(&format!("terminal_median_{}", k + 1), float(p[3]));
    }
    line("outer_steps", c.outer_steps.to_string());
    line("principal_steps", c.principal_steps.to_string());
    line("candidates_trained", c.candidates_trained.to_string());
    line("candidates_failed", c.candidates_failed.to_string());
    line("inner_iterations", c.inner_iterations.to_string());
    s
}

/// Writes every text output of a run into `dir`.
pub fn write_bundle(dir: &Path, state: &RunState, result: &RunResult) -> Result<()> {
    ensure_dir(dir)?;
    let config = &state.config;
    let knots = config.knots.len();
    write_text(&dir.join("config.cfg"), &serialize_config(config))?;
    write_text(&dir.join("summary.txt"), &summary(state, result))?;

    let mut header = vec!["outer_step".to_string()];
    header.extend(names("u", knots));
    header.extend(names("w", knots));
    write_csv(
        &dir.join("u_trajectory.csv"),
        &header,
        state.u_trajectory.iter().map(|(n, u)| {
            let mut row = vec![n.to_string()];
            row.extend(u.iter().map(|&v| float(v)));
            row.extend(crate::principal::psi(u).into_iter().map(float));
            row
        }),
    )?;
    write_csv(
        &dir.join("principal_loss.csv"),
        &["outer_step".into(), "loss".into(), "surrogate".into()],
        state
            .principal_losses
            .iter()
            .map(|r| vec![r.outer.to_string(), float(r.loss), float(r.surrogate)]),
    )?;
    write_csv(
        &dir.join("fbsde_loss.csv"),
        &["phase", "outer_step", "candidate", "iteration", "loss"].map(String::from),
        state.fbsde_history.iter().map(|r| {
            vec![
                match r.phase {
                    Phase::Search => "search".into(),
                    Phase::Final => "final".into(),
                },
                r.outer.to_string(),
                r.candidate.to_string(),
                r.iteration.to_string(),
                float(r.loss),
            ]
        }),
    )?;
    let mut header = vec!["outer_step".to_string(), "loss".to_string()];
    header.extend(names("u", knots));
    write_csv(
        &dir.join("buffer.csv"),
        &header,
        state.principal.buffer.records().map(|r| {
            let mut row = vec![r.step.to_string(), float(r.loss)];
            row.extend(r.u.iter().map(|&v| float(v)));
            row
        }),
    )?;

    let d = &result.diagnostics;
    let grid = config.rec.grid();
    write_csv(
        &dir.join("price_path.csv"),
        &["step", "time", "price"].map(String::from),
        d.prices
            .iter()
            .enumerate()
            .map(|(m, &s)| vec![m.to_string(), float(grid.time(m)), float(s)]),
    )?;
    for (k, c) in d.controls.iter().enumerate() {
        write_csv(
            &dir.join(format!("controls_{}.csv", k + 1)),
            &[
                "step",
                "time",
                "expansion",
                "rental",
                "trading",
                "total_expansion",
                "total_rental",
                "net_trading",
            ]
            .map(String::from),
            (0..c.time.len()).map(|m| {
                vec![
                    m.to_string(),
                    float(c.time[m]),
                    float(c.expansion[m]),
                    float(c.rental[m]),
                    float(c.trading[m]),
                    float(c.total_expansion[m]),
                    float(c.total_rental[m]),
                    float(c.net_trading[m]),
                ]
            }),
        )?;
    }
    for (k, xt) in d.terminal.iter().enumerate() {
        write_csv(
            &dir.join(format!("terminal_inventory_{}.csv", k + 1)),
            &["sample".into(), "x_T".into()],
            xt.iter().enumerate().map(|(l, &x)| vec![l.to_string(), float(x)]),
        )?;
        let h = histogram(xt, HISTOGRAM_BINS);
        write_csv(
            &dir.join(format!("terminal_histogram_{}.csv", k + 1)),
            &["bin", "lower", "upper", "count"].map(String::from),
            h.counts
                .iter()
                .enumerate()
                .map(|(i, c)| vec![i.to_string(), float(h.edges[i]), float(h.edges[i + 1]), c.to_string()]),
        )?;
    }
    let mut header = vec!["population".to_string()];
    header.extend(PERCENTILES.iter().map(|p| format!("p{p}")));
    write_csv(
        &dir.join("percentiles.csv"),
        &header,
        d.percentiles.iter().enumerate().map(|(k, row)| {
            let mut r = vec![(k + 1).to_string()];
            r.extend(row.iter().map(|&v| float(v)));
            r
        }),
    )
}

/// Writes the grid-search curve, its configuration and a one-line summary.
pub fn write_grid(dir: &Path, config: &RunConfig, curve: &[GridPoint]) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("config.cfg"), &serialize_config(config))?;
    write_csv(
        &dir.join("grid.csv"),
        &["w", "mean", "se", "converged", "iterations", "last_fbsde_loss"].map(String::from),
        curve.iter().map(|p| {
            vec![
                float(p.w),
                float(p.mean),
                float(p.se),
                (p.converged as u8).to_string(),
                p.iterations.to_string(),
                float(p.last_fbsde_loss),
            ]
        }),
    )?;
    let best = curve
        .iter()
        .min_by(|a, b| a.mean.total_cmp(&b.mean))
        .expect("non-empty grid");
    let flagged = curve.iter().filter(|p| !p.converged).count();
    write_text(
        &dir.join("summary.txt"),
        &format!(
            "argmin_w = {}\nmin_loss = {}\nmin_loss_se = {}\npoints = {}\nnot_converged = {}\n",
            float(best.w),
            float(best.mean),
            float(best.se),
            curve.len(),
            flagged
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(float(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(float(0.205), "2.0499999999999999e-1");
    }
}
