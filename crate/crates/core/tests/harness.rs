use std::fs;

use ndarray::{array, Array1, Array2};
use superscale_core::checkpoint;
use superscale_core::harness::{
    self, analyze, expand, read_sweep_csv, run, run_dir, scaling_report, sweep, train, AnalyzeOptions, ConfigFile,
    RunConfig, SweepConfig, SweepGrid, SweepRow, FAILURE_FILE, HISTORY_FILE, MODEL_FILE, RESULT_FILE, SWEEP_CSV,
};
use tempfile::tempdir;

fn tiny_file() -> ConfigFile {
    ConfigFile::from_json(
        r#"{"recipe":"custom","m":5,"gamma":-1,"seed":3,
            "spec":{"n":40,"kind":"power","alpha":1.0,"density":1.0},
            "batch_size":64,"total_steps":400,"warmup_steps":40,"base_lr":0.01,
            "eval_multiplier":4}"#,
    )
    .unwrap()
}

fn tiny() -> RunConfig {
    tiny_file().resolve().unwrap()
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

#[test]
fn tiny_run_reduces_loss() {
    let out = train(&tiny()).unwrap();
    assert_eq!(out.loss_history.len(), 400);
    let head = mean(&out.loss_history[..20]);
    let tail = mean(&out.loss_history[380..]);
    assert!(tail < 0.8 * head, "head {head} tail {tail}");
}

#[test]
fn training_is_deterministic() {
    let a = train(&tiny()).unwrap();
    let b = train(&tiny()).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.loss_history, b.loss_history);
    let mut other = tiny();
    other.seed = 4;
    assert_ne!(train(&other).unwrap().model, a.model);
}

#[test]
fn run_persists_and_reloads() {
    let dir = tempdir().unwrap();
    let cfg = tiny();
    let r = run(&cfg, dir.path()).unwrap();
    let rd = run_dir(dir.path(), &cfg);
    for f in [RESULT_FILE, MODEL_FILE, HISTORY_FILE, harness::CONFIG_FILE] {
        assert!(rd.join(f).exists(), "{f} missing");
    }
    assert_eq!(harness::read_history(&rd.join(HISTORY_FILE)).unwrap(), r.loss_history);

    let model = checkpoint::load_model(&rd.join(MODEL_FILE)).unwrap();
    let again = harness::evaluate(&model, &cfg).unwrap();
    assert_eq!(again.mean, r.final_test_loss);

    // a second call loads the stored result instead of retraining
    let cached = run(&cfg, dir.path()).unwrap();
    assert_eq!(cached.wall_time_s, r.wall_time_s);
    assert_eq!(cached.final_test_loss, r.final_test_loss);
}

#[test]
fn divergent_run_leaves_failure_record() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny();
    cfg.base_lr = 1e30;
    cfg.gamma = -1e6;
    let err = run(&cfg, dir.path()).unwrap_err();
    let rd = run_dir(dir.path(), &cfg);
    let failure = harness::load_failure(&rd).unwrap().expect("failure record");
    assert_eq!(failure.reason, err.to_string());
    assert!(rd.join(FAILURE_FILE).exists());
    assert!(!rd.join(RESULT_FILE).exists());
}

fn small_sweep() -> SweepConfig {
    SweepConfig {
        base: tiny_file(),
        grid: SweepGrid {
            m: vec![3, 6],
            gamma: vec![-1.0, 0.0],
            ..Default::default()
        },
    }
}

#[test]
fn sweep_cells_have_distinct_seeds() {
    let cells = expand(&small_sweep()).unwrap();
    assert_eq!(cells.len(), 4);
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 4);
    // m varies fastest
    assert_eq!(cells.iter().map(|c| (c.gamma, c.m)).collect::<Vec<_>>(), [
        (-1.0, 3),
        (-1.0, 6),
        (0.0, 3),
        (0.0, 6)
    ]);
}

#[test]
fn adding_grid_points_keeps_existing_seeds() {
    let base = expand(&small_sweep()).unwrap();
    let mut wider = small_sweep();
    wider.grid.m.push(9);
    let more = expand(&wider).unwrap();
    for c in &base {
        assert!(more.iter().any(|d| d == c));
    }
}

#[test]
fn sweep_is_resumable() {
    let dir = tempdir().unwrap();
    let cfg = small_sweep();
    let first = sweep(&cfg, dir.path(), Some(1)).unwrap();
    assert_eq!(first.len(), 4);
    assert!(first.iter().all(SweepRow::is_ok));
    let from_disk = read_sweep_csv(&dir.path().join(SWEEP_CSV)).unwrap();
    assert_eq!(from_disk, first);
    let second = sweep(&cfg, dir.path(), Some(1)).unwrap();
    assert_eq!(second, first);
}

fn synthetic_row(m: usize, gamma: f64, loss: Option<f64>) -> SweepRow {
    let mut cfg = tiny();
    cfg.m = m;
    cfg.gamma = gamma;
    let mut row = SweepRow::failed(&cfg, "x".into());
    if let Some(l) = loss {
        row.status = "ok".into();
        row.failure_reason = None;
        row.final_test_loss = Some(l);
    }
    row
}

#[test]
fn scaling_report_recovers_inverse_width() {
    let mut rows: Vec<SweepRow> = [4, 8, 16, 32].iter().map(|&m| synthetic_row(m, -1.0, Some(3.0 / m as f64))).collect();
    rows.extend([4, 8].iter().map(|&m| synthetic_row(m, 0.0, Some(1.0))));
    rows.extend([4, 8, 16].iter().map(|&m| synthetic_row(m, 0.5, (m != 8).then_some(1.0))));
    let report = scaling_report(&rows, None).unwrap();
    assert_eq!(report.len(), 3);
    let by_gamma = |g: f64| report.iter().find(|r| r.gamma == g).unwrap();
    let ok = by_gamma(-1.0);
    assert_eq!(ok.status, "ok");
    assert!((ok.alpha_m.unwrap() - 1.0).abs() < 1e-12);
    assert!((ok.coefficient.unwrap() - 3.0).abs() < 1e-9);
    assert_eq!(by_gamma(0.0).status, "too_few_points");
    let skipped = by_gamma(0.5);
    assert_eq!(skipped.status, "skipped_failures");
    assert_eq!(skipped.failed_runs, 1);
    assert!(skipped.alpha_m.is_none());
}

fn padded_identity(n: usize, m: usize, norm: f32) -> Array2<f32> {
    let mut w = Array2::zeros((n, m));
    for i in 0..m {
        w[[i, i]] = norm;
    }
    w
}

#[test]
fn analyze_padded_identity_file() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("w.spsw");
    let w = padded_identity(8, 4, 2.0);
    checkpoint::write_spsw(&path, &w, Some(&Array1::zeros(8))).unwrap();
    let r = analyze(&path, &AnalyzeOptions::default()).unwrap();
    assert_eq!((r.n, r.m, r.has_bias), (8, 4, true));
    assert_eq!(r.phi.phi_one, 0.5);
    assert_eq!(r.phi.phi_half, 0.5);
    let strong = r.strong.unwrap();
    assert_eq!(strong.n_strong, 4);
    assert!(strong.mean_sq.abs() < 1e-15);
    assert_eq!(strong.welch_kappa_sq, 0.0);
    assert!(r.ambiguity.unwrap().is_finite());
}

#[test]
fn analyze_simplex_csv() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("w.csv");
    let s = 2.0 / 3f64.sqrt();
    let tetra = array![[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let mut text = String::new();
    for row in tetra.rows() {
        let cells: Vec<String> = row.iter().map(|v: &f64| format!("{}", v * s)).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    text.push_str("0,0,0\n0.1,0,0\n");
    fs::write(&path, text).unwrap();
    let r = analyze(&path, &AnalyzeOptions::default()).unwrap();
    assert!(!r.has_bias);
    assert_eq!((r.n, r.m), (6, 3));
    let strong = r.strong.unwrap();
    assert_eq!(strong.n_strong, 4);
    assert!((strong.mean_sq - 1.0 / 9.0).abs() < 1e-6, "{}", strong.mean_sq);
    assert!(strong.var_sq < 1e-10);
    assert!((strong.welch_kappa_sq - 1.0 / 9.0).abs() < 1e-12);
}
