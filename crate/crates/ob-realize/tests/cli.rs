use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ob-realize");

/// Settings that keep a full run to a few seconds.
const QUICK: &[&str] = &[
    "spectrum.kmax=8",
    "spectrum.pencil_kmax=2",
    "spectrum.calibration_iters=5",
    "reduce.grid_n=120",
    "realize.horizon=10",
    "realize.ladder_horizon=10",
    "realize.xi_ladder=[0.1,0.01]",
    "realize.lyapunov_horizon=50",
];

fn run(out: &Path, stage: &str, extra: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.arg(stage).arg("--out").arg(out).arg("--threads").arg("2");
    for s in QUICK.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&out, "all", &["plot=true"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "spectrum.csv",
        "spectrum.svg",
        "calibration.json",
        "reduced_system.json",
        "sparsity.json",
        "control_solution.json",
        "realization_report.json",
        "trajectory_target.csv",
        "trajectory_realized.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let head = fs::read_to_string(out.join("spectrum.csv")).unwrap();
    assert!(head.starts_with("k,Re_lambda,Im_lambda,method,in_kernel_set\n"));

    let rep = json(&out.join("realization_report.json"));
    assert!(rep["supError"].as_f64().unwrap() < 0.05 * rep["ballRadius"].as_f64().unwrap());
    assert_eq!(rep["ladder"].as_array().unwrap().len(), 2);

    let ctl = json(&out.join("control_solution.json"));
    assert!(ctl["relativeError"].as_f64().unwrap() < 0.05);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(d, "all", &["seed=7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["spectrum.csv", "trajectory_target.csv", "trajectory_realized.csv", "control_solution.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn invalid_profile_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    let o = run(&out, "spectrum", &["profile.s0=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("profile"));
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "spectrum", &["profile.bee=40"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
}

#[test]
fn missing_upstream_names_the_stage_to_run() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["control", "realize"] {
        let o = run(dir.path(), stage, &[]);
        assert_eq!(o.status.code(), Some(1));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("reduced_system.json") && err.contains("`reduce`"), "{err}");
    }
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"reduce": {"b": 40, "grid_n": 100}}"#).unwrap();
    let out = dir.path().join("r");
    let o = Command::new(BIN).args(["reduce", "--config"]).arg(&cfg).arg("--out").arg(&out).args(["--set", "reduce.grid_n=110"]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rs = json(&out.join("reduced_system.json"));
    let n = rs["N"].as_u64().unwrap() as usize;
    assert_eq!(n, 5);
    assert!(out.join("sparsity.json").is_file());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn overrides_round_trip(b in 2.0f64..500.0, n in 16usize..400, seed in 0u64..1000) {
        let cfg = ob_realize::config::RunConfig::load(
            None,
            &[format!("reduce.b={b}"), format!("reduce.grid_n={n}"), format!("seed={seed}")],
        ).unwrap();
        prop_assert_eq!(cfg.reduce.b, b);
        prop_assert_eq!(cfg.reduce.grid_n, n);
        prop_assert_eq!(cfg.seed, seed);
    }

    #[test]
    fn nonpositive_radius_never_validates(r in -10.0f64..=0.0) {
        let res = ob_realize::config::RunConfig::load(None, &[format!("realize.ball_radius={r}")]);
        prop_assert!(res.is_err());
    }
}
