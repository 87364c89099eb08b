//! End-to-end tests of the `mfg-forge` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = include_str!("fixtures/tiny.cfg");

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mfg-forge"));
    c.arg("--quiet");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn optimize_tiny(dir: &TempDir, out: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir, "tiny.cfg", TINY);
    let out = dir.path().join(out);
    let mut args = vec!["optimize", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = run(&["optimize", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope.cfg"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["solve-inner", "--out", "x"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn unknown_key_names_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "bad.cfg", &TINY.replace("N_O = 3", "N_O = 3\nN_X = 1"));
    let o = run(&["optimize", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("N_X"), "{}", stderr(&o));
}

#[test]
fn weights_must_match_knots() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "tiny.cfg", TINY);
    let o = run(&[
        "solve-inner",
        "--config",
        s(&cfg),
        "--weights",
        "0.2",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("one per knot"), "{}", stderr(&o));
}

#[test]
fn solve_inner_reaches_tolerance() {
    let dir = TempDir::new().unwrap();
    let text = TINY
        .replace("R = [0.9, 1.0]", "R = [0.9]")
        .replace("N_paths = 32", "N_paths = 128\nTOL_F = 1e-2")
        .replace("max_inner_iters = 6", "max_inner_iters = 1500")
        .replace("hidden = [6]", "hidden = [16, 16]");
    let cfg = write_config(&dir, "single.cfg", &text);
    let out = dir.path().join("inner");
    let o = run(&[
        "solve-inner",
        "--config",
        s(&cfg),
        "--weights",
        "0.205",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(out.join("fbsde_loss.csv")).unwrap();
    let last = history.lines().last().unwrap();
    let loss: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(last.starts_with("final,"), "{last}");
    assert!(loss < 1e-2, "{last}");
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("stop_reason = fixed_weights"), "{summary}");
    let w: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("w = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((w - 0.205).abs() < 1e-12, "{w}");
}

#[test]
fn optimize_writes_the_full_bundle() {
    let dir = TempDir::new().unwrap();
    let out = optimize_tiny(&dir, "run", &[]);
    let names: Vec<String> = files(&out).into_iter().map(|(n, _)| n).collect();
    for expected in [
        "buffer.csv",
        "checkpoint.bin",
        "config.cfg",
        "controls_1.csv",
        "controls_2.csv",
        "fbsde_loss.csv",
        "percentiles.csv",
        "price_path.csv",
        "principal_loss.csv",
        "summary.txt",
        "terminal_histogram_1.csv",
        "terminal_inventory_2.csv",
        "u_trajectory.csv",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected} in {names:?}");
    }
    let traj = fs::read_to_string(out.join("u_trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "outer_step,u_1,u_2,w_1,w_2");
    assert_eq!(traj.lines().count(), 1 + 4);
    let prices = fs::read_to_string(out.join("price_path.csv")).unwrap();
    assert_eq!(prices.lines().count(), 1 + 53);
}

#[test]
fn seed_override_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let a = optimize_tiny(&dir, "a", &["--seed", "1"]);
    let b = optimize_tiny(&dir, "b", &["--seed", "1"]);
    let c = optimize_tiny(&dir, "c", &["--seed", "2"]);
    assert_eq!(files(&a), files(&b));
    let traj = |d: &Path| fs::read(d.join("u_trajectory.csv")).unwrap();
    assert_ne!(traj(&a), traj(&c));
}

#[test]
fn export_reproduces_the_bundle() {
    let dir = TempDir::new().unwrap();
    let out = optimize_tiny(&dir, "run", &[]);
    let exported = dir.path().join("exported");
    let o = run(&[
        "export",
        "--resume",
        s(&out.join("checkpoint.bin")),
        "--out",
        s(&exported),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let original: Vec<_> = files(&out).into_iter().filter(|(n, _)| n != "checkpoint.bin").collect();
    assert_eq!(files(&exported), original);
}

#[test]
fn resume_of_a_finished_run_is_stable_and_checks_the_config() {
    let dir = TempDir::new().unwrap();
    let out = optimize_tiny(&dir, "run", &[]);
    let ck = out.join("checkpoint.bin");
    let again = dir.path().join("again");
    let o = run(&["optimize", "--resume", s(&ck), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let strip = |d: &Path| -> Vec<_> { files(d).into_iter().filter(|(n, _)| n != "checkpoint.bin").collect() };
    assert_eq!(strip(&out), strip(&again));

    let o = run(&["optimize", "--resume", s(&ck), "--seed", "9", "--out", s(&again)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("differ"), "{}", stderr(&o));
}

#[test]
fn diagnose_reports_clearing() {
    let dir = TempDir::new().unwrap();
    let out = optimize_tiny(&dir, "run", &[]);
    let o = run(&["diagnose", "--checkpoint", s(&out.join("checkpoint.bin"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("complete = true"), "{text}");
    assert!(text.contains("[ok]"), "{text}");
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = optimize_tiny(&dir, "run", &[]);
    let ck = out.join("checkpoint.bin");
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    fs::write(&ck, bytes).unwrap();
    let o = run(&["diagnose", "--resume", s(&ck)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn grid_search_writes_one_row_per_weight() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "tiny.cfg", TINY);
    let out = dir.path().join("grid");
    let o = run(&[
        "grid-search",
        "--config",
        s(&cfg),
        "--knots",
        "0.9:0.1:1",
        "--grid",
        "0.1:0.1:3",
        "--batches",
        "2",
        "--paths",
        "16",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 4);
    assert_eq!(
        grid.lines().next().unwrap(),
        "w,mean,se,converged,iterations,last_fbsde_loss"
    );
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("points = 3"), "{summary}");
}

#[test]
fn grid_search_needs_a_single_knot() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "tiny.cfg", TINY);
    let o = run(&["grid-search", "--config", s(&cfg), "--out", s(&dir.path().join("g"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("one knot"), "{}", stderr(&o));
}
