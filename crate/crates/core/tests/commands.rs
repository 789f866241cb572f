use std::fs;
use std::path::{Path, PathBuf};

use krmcf::cli_io::{cmd_convergence, cmd_run, cmd_verify, load_config, RunConfig};
use krmcf::diagnostics::singularity_tracker;

fn config(name: &str, out: &Path) -> RunConfig {
    let p: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.cfg"));
    let mut cfg = load_config(&p).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

#[test]
fn diagonal_run_writes_constant_series() {
    let dir = tempfile::tempdir().unwrap();
    let rec = cmd_run(&config("diagonal-flat", dir.path())).unwrap();
    assert!(rec.trajectory.completed());
    let csv = fs::read_to_string(dir.path().join("series.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 11);
    for r in &rows {
        // every column but time is frozen up to round-off
        for c in 1..r.len() {
            assert!((r[c] - rows[0][c]).abs() <= 1e-12 * (1.0 + rows[0][c].abs()), "column {c}");
        }
    }
    assert_eq!(rec.trajectory.snapshots.len(), 2);
    assert!(dir.path().join("snap_1.000000_A2.ppm").exists());
}

#[test]
fn verify_accepts_the_flat_lagrangian() {
    let dir = tempfile::tempdir().unwrap();
    let rep = cmd_verify(&config("lagrangian-anti-diagonal", dir.path())).unwrap();
    assert_eq!(rep.exit_code(), 0, "{}", rep.render());
    assert!(rep.record.max_abs_cos.iter().all(|c| *c <= 1e-10));
    let text = fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn convergence_on_the_graph_torus_is_second_order() {
    let dir = tempfile::tempdir().unwrap();
    let table = cmd_convergence(&config("perturbed-graph-torus", dir.path()), 3).unwrap();
    assert_eq!(table.len(), 3 * 7);
    for r in table.iter().filter(|r| r.n == 128) {
        let o = r.order.unwrap();
        assert!(o >= 1.8, "{}: {o}", r.name);
    }
    let csv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("residual,n,dt,linf,l2,order"));
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn collapse_scenario_is_a_type_one_blow_up() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("round-collapse", dir.path());
    cfg.grid = 32;
    let rec = cmd_run(&cfg).unwrap();
    let rep = singularity_tracker(&rec.trajectory).unwrap();
    assert!((rep.t_blow - 1.0).abs() < 0.02, "{}", rep.t_blow);
    assert!(rep.type_one);
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("termination blow-up"));
}
