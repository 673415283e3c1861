//! End-to-end tests of the command-line binary: exit codes, artifact
//! layout, determinism of run outputs, and the sweep/compare flow.

use std::path::Path;
use std::process::{Command, Output};

fn funcbo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_funcbo"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary spawns")
}

const QUAD_CFG: &str = "\
[run]
task = quad
method = funcid_linear
seed = 3
[optim]
n_outer = 25
full_batch = true
inner_mode = exact
adjoint_mode = exact
eta_out = 0.5
r_in = 1e-4
r_adj = 1e-4
";

#[test]
fn run_writes_artifacts_and_seed_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), QUAD_CFG).unwrap();
    let out = funcbo(&["run", "--config", "run.cfg", "--out", "a"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["summary.json", "funcid_linear_records.csv", "omega.ckpt", "theta.ckpt"] {
        assert!(dir.path().join("a").join(f).exists(), "missing {f}");
    }

    let out = funcbo(
        &["run", "--config", "run.cfg", "--seed", "99", "--out", "b"],
        dir.path(),
    );
    assert!(out.status.success());
    let summary = std::fs::read_to_string(dir.path().join("b/summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["seed"], 99);

    // same config + seed twice -> byte-identical artifacts
    let out = funcbo(&["run", "--config", "run.cfg", "--out", "c"], dir.path());
    assert!(out.status.success());
    let a = std::fs::read(dir.path().join("a/summary.json")).unwrap();
    let c = std::fs::read(dir.path().join("c/summary.json")).unwrap();
    assert_eq!(a, c);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "[run]\ntask = iv\nbogus = 1\n").unwrap();
    let out = funcbo(&["run", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let out = funcbo(&["run", "--config", "nope.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = funcbo(&["check", "--suite", "bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_round_trips_through_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = funcbo(
        &["gen-data", "--task", "iv", "--n", "200", "--seed", "7", "--out", "iv.dat"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let head = std::fs::read_to_string(dir.path().join("iv.dat")).unwrap();
    assert!(head.starts_with("FUNCBO-DATA v1 iv 200 "));

    let cfg = "\
[run]
task = iv
method = funcid_linear
seed = 7
[task]
data = iv.dat
[optim]
n_outer = 5
full_batch = true
inner_mode = exact
adjoint_mode = exact
outer_optimizer = adam
eta_out = 0.05
r_in = 1e-4
r_adj = 1e-4
";
    std::fs::write(dir.path().join("iv.cfg"), cfg).unwrap();
    let out = funcbo(&["run", "--config", "iv.cfg", "--out", "ivrun"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_then_compare_produces_the_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), QUAD_CFG).unwrap();
    std::fs::write(
        dir.path().join("grid.txt"),
        "run.seed = 1 2\nrun.method = funcid_linear aid\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_funcbo"))
        .args(["sweep", "--config", "run.cfg", "--grid", "grid.txt", "--out", "sw"])
        .env("FUNCBO_THREADS", "2")
        .current_dir(dir.path())
        .output()
        .expect("binary spawns");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let dirs: Vec<String> = (0..4).map(|i| format!("sw/run_{i:04}")).collect();
    let mut args = vec!["compare", "--metric", "outer_loss"];
    args.extend(dirs.iter().map(String::as_str));
    let out = funcbo(&args, dir.path());
    assert!(out.status.success());
    let csv = String::from_utf8_lossy(&out.stdout);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,metric,min,q1,median,q3,max,n_seeds"
    );
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 2, "one row per method: {csv}");
    assert!(body[0].starts_with("aid,outer_loss,") && body[0].ends_with(",2"));
    assert!(body[1].starts_with("funcid_linear,outer_loss,") && body[1].ends_with(",2"));

    // bad grid axes are a config error
    std::fs::write(dir.path().join("bad.txt"), "seed = 1 2\n").unwrap();
    let out = funcbo(
        &["sweep", "--config", "run.cfg", "--grid", "bad.txt", "--out", "sw2"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
