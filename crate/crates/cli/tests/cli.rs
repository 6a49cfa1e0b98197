use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ope_core::estimators::estimate_mis;
use ope_core::mdp::text::{write_mdp, write_policies};
use ope_core::mdp::{oracle_w, DenominatorKind, Policy, RewardNoise, TabularMdp};
use ope_core::oracle::{bound_report, BoundReport, DEFAULT_TOL};
use ope_core::sampling::{read_transitions_csv, sample_trajectories, trajectory_to_transitions, write_transitions_csv, InitRegime};
use tempfile::TempDir;

fn ope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ope")).args(args).output().expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn two_state() -> (TabularMdp, Policy, Policy) {
    let mdp = TabularMdp::new(
        2,
        2,
        vec![0.7, 0.3, 0.2, 0.8, 0.4, 0.6, 0.9, 0.1],
        vec![0.2, 0.6, 0.8, 0.4],
        vec![0.01, 0.04, 0.01, 0.04],
        RewardNoise::TwoPoint,
        0.9,
        1.0,
    )
    .unwrap();
    let pe = Policy::new(2, 2, vec![0.8, 0.2, 0.3, 0.7], vec![0.5, 0.5]).unwrap();
    let pb = Policy::new(2, 2, vec![0.5, 0.5, 0.5, 0.5], vec![0.5, 0.5]).unwrap();
    (mdp, pe, pb)
}

/// Writes the model, policy pair and a single-trajectory dataset.
fn fixture(dir: &TempDir, n_traj: usize, horizon: usize) -> (PathBuf, PathBuf, PathBuf) {
    let (mdp, pe, pb) = two_state();
    let (m, p, d) = (path(dir, "mdp.txt"), path(dir, "pol.txt"), path(dir, "data.csv"));
    fs::write(&m, write_mdp(&mdp)).unwrap();
    fs::write(&p, write_policies(&pe, &pb)).unwrap();
    let trajs = sample_trajectories(&mdp, &pb, n_traj, horizon, InitRegime::ArbitraryInit, 0, 11).unwrap();
    let mut buf = Vec::new();
    write_transitions_csv(&trajectory_to_transitions(&trajs), &mut buf).unwrap();
    fs::write(&d, buf).unwrap();
    (m, p, d)
}

#[test]
fn oracle_on_one_state_mdp() {
    let dir = TempDir::new().unwrap();
    let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.3, 0.7], vec![0.01, 0.04], RewardNoise::TwoPoint, 0.8, 1.0)
        .unwrap();
    let pe = Policy::new(1, 2, vec![0.25, 0.75], vec![1.0]).unwrap();
    let pb = Policy::uniform(1, 2, vec![1.0]).unwrap();
    fs::write(path(&dir, "m.txt"), write_mdp(&mdp)).unwrap();
    fs::write(path(&dir, "p.txt"), write_policies(&pe, &pb)).unwrap();
    let out = path(&dir, "bounds.csv");
    let o = ope(&["oracle", "--mdp", s(&path(&dir, "m.txt")), "--policies", s(&path(&dir, "p.txt")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let rec = rd.records().next().unwrap().unwrap();
    let fields: Vec<&str> = rec.iter().collect();
    let parsed = BoundReport::from_csv_record(&fields).unwrap();
    assert_eq!(parsed, bound_report(&mdp, &pe, &pb, DenominatorKind::StationaryDist, DEFAULT_TOL).unwrap());
    assert!((parsed.rho - (0.25 * 0.3 + 0.75 * 0.7)).abs() < 1e-15);
}

#[test]
fn malformed_model_exits_2() {
    let dir = TempDir::new().unwrap();
    let (_, p, _) = fixture(&dir, 1, 10);
    let bad = path(&dir, "bad.txt");
    fs::write(&bad, "# ope-mdp v1\nn_states two\n").unwrap();
    let o = ope(&["oracle", "--mdp", s(&bad), "--policies", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn mis_with_oracle_w_matches_library() {
    let dir = TempDir::new().unwrap();
    let (m, p, d) = fixture(&dir, 3, 40);
    let o = ope(&[
        "estimate", "--data", s(&d), "--mdp", s(&m), "--policies", s(&p), "--estimator", "mis", "--w", "oracle",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let mut rd = csv::Reader::from_reader(stdout.as_bytes());
    let rec = rd.records().next().unwrap().unwrap();
    let (mdp, pe, pb) = two_state();
    let data = read_transitions_csv(fs::File::open(&d).unwrap()).unwrap();
    let w = oracle_w(&mdp, &pe, &pb, DenominatorKind::StationaryDist).unwrap();
    let lib = estimate_mis(&data, &w, &pe, &pb, 0.05).unwrap();
    assert_eq!(&rec[0], "mis");
    assert_eq!(rec[5].parse::<f64>().unwrap().to_bits(), lib.rho_hat.to_bits());
    assert_eq!(rec[6].parse::<f64>().unwrap().to_bits(), lib.variance_hat.unwrap().to_bits());
}

#[test]
fn cross_time_on_one_trajectory_succeeds() {
    let dir = TempDir::new().unwrap();
    let (m, p, d) = fixture(&dir, 1, 400);
    let out = path(&dir, "est.csv");
    let o = ope(&[
        "estimate", "--data", s(&d), "--mdp", s(&m), "--policies", s(&p), "--estimators", "drl3,dm,is", "--scheme",
        "cross-time", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(1).unwrap().starts_with("drl-m3,cross-time,1,400,400,"));
}

#[test]
fn cross_trajectory_on_one_trajectory_exits_4() {
    let dir = TempDir::new().unwrap();
    let (m, p, d) = fixture(&dir, 1, 50);
    let o = ope(&[
        "estimate", "--data", s(&d), "--mdp", s(&m), "--policies", s(&p), "--estimators", "drl-m3", "--scheme",
        "cross-trajectory",
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("N >= 2"));
}

#[test]
fn unknown_estimator_exits_2_with_usage() {
    let dir = TempDir::new().unwrap();
    let (m, p, d) = fixture(&dir, 1, 10);
    let o = ope(&["estimate", "--data", s(&d), "--mdp", s(&m), "--policies", s(&p), "--estimators", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("unknown estimator") && err.contains("Usage"), "{err}");
}

#[test]
fn overlap_violation_exits_3() {
    let dir = TempDir::new().unwrap();
    let (m, _, d) = fixture(&dir, 1, 20);
    let pe = Policy::new(2, 2, vec![0.5, 0.5, 0.5, 0.5], vec![0.5, 0.5]).unwrap();
    let pb = Policy::new(2, 2, vec![1.0, 0.0, 0.5, 0.5], vec![0.5, 0.5]).unwrap();
    let p = path(&dir, "bad_pol.txt");
    fs::write(&p, write_policies(&pe, &pb)).unwrap();
    let o = ope(&["estimate", "--data", s(&d), "--mdp", s(&m), "--policies", s(&p), "--estimators", "mis"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_writes_readable_data() {
    let dir = TempDir::new().unwrap();
    let (m, p, _) = fixture(&dir, 1, 10);
    let out = path(&dir, "sim.csv");
    let o = ope(&["simulate", "--mdp", s(&m), "--policies", s(&p), "--n-traj", "3", "--horizon", "25", "--seed", "4", "--out", s(&out)]);
    assert!(o.status.success());
    let data = read_transitions_csv(fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(data.len(), 75);
    assert_eq!(data.traj_ids(), vec![0, 1, 2]);
}

const SMOKE: &str = "env = gridworld\ngrid_width = 3\ngrid_height = 3\nNs = 1, 2\nTs = 200\n\
                     estimators = is, dm, mis, drl-m3\nsettings = both-correct, only-w-correct\nreplications = 2\n";

#[test]
fn experiment_smoke_and_rerun() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "exp.cfg");
    fs::write(&cfg, SMOKE).unwrap();
    let (a, b) = (path(&dir, "a"), path(&dir, "b"));
    let start = Instant::now();
    let o = ope(&["experiment", "--config", s(&cfg), "--out", s(&a), "--workers", "2"]);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cell N=1 T=200"));
    let first = fs::read_to_string(a.join("mse_table.csv")).unwrap();
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(first.as_bytes());
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 4 * 2);
    for r in &rows {
        assert_eq!(&r[8], "2", "{r:?}");
    }
    assert!(a.join("mse_drl-m3_only-w-correct_N2.csv").exists());
    let o = ope(&["experiment", "--config", s(&cfg), "--out", s(&b), "--workers", "1"]);
    assert!(o.status.success());
    assert_eq!(first, fs::read_to_string(b.join("mse_table.csv")).unwrap());
}

#[test]
fn dry_run_lists_grid_only() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "exp.cfg");
    fs::write(&cfg, SMOKE).unwrap();
    let out = path(&dir, "none");
    let o = ope(&["experiment", "--config", s(&cfg), "--out", s(&out), "--dry-run", "--estimators", "dm"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(text.contains("dm,only-w-correct,2,200,2"));
    assert!(!out.exists());
}

#[test]
fn coverage_command_and_bad_config() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "cov.cfg");
    fs::write(&cfg, "Ts = 300\nscheme = oracle\nestimators = drl-m3\nreplications = 20\n").unwrap();
    let o = ope(&["coverage", "--config", s(&cfg), "--out", s(dir.path()), "--alpha-ci", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(path(&dir, "coverage_table.csv")).unwrap();
    assert!(text.lines().nth(2).unwrap().starts_with("drl-m3,both-correct,1,300,5.00000000000000000e-1,"));

    fs::write(&cfg, "Ts = 300\nwhat = 1\n").unwrap();
    let o = ope(&["coverage", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2, column 1"));
}
