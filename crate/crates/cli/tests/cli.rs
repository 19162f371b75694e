use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const FAST_MESH: &str = "2000:1.5:1.5";

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("frozen-orbit-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> (i32, String, String) {
    run_env(args, &[])
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> (i32, String, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_frozen-orbit"));
    cmd.args(args).env_remove("FROZEN_ORBIT_JOBS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn kepler_brake_reaches_unit_apex() {
    let d = scratch("kepler");
    let (code, _, err) = run(&[
        "brake",
        "--n",
        "1",
        "--T",
        "1.1107207345",
        "--family",
        "kepler-unit",
        "--mesh",
        "2000:1.5",
        "--out",
        s(&d),
    ]);
    assert_eq!(code, 0, "{err}");
    let r = json(&d.join("result.json"));
    assert!((r["apex"].as_f64().unwrap() - 1.0).abs() <= 1e-4);
    let c_exact = 3.0 * std::f64::consts::PI / (2.0 * 2f64.sqrt());
    assert!((r["c0"].as_f64().unwrap() - c_exact).abs() <= 1e-3);
    for f in ["eta.csv", "folded.csv", "result.json", "manifest.json"] {
        assert!(d.join(f).is_file(), "{f}");
    }
}

#[test]
fn three_segment_brake_has_two_collisions() {
    let d = scratch("helium3");
    let (code, _, err) = run(&[
        "brake",
        "--n",
        "3",
        "--T",
        "1",
        "--family",
        "helium3",
        "--out",
        s(&d),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        json(&d.join("result.json"))["collisions"]
            .as_array()
            .unwrap()
            .len(),
        2
    );
    let folded = fs::read_to_string(d.join("folded.csv")).unwrap();
    assert!(folded.starts_with("t,q1,q2,q3\n"));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(run(&["brake", "--n", "1", "--family", "kepler-unit"]).0, 64);
    assert_eq!(
        run(&["solve", "--family", "helium", "--mesh", "nonsense"]).0,
        64
    );
    assert_eq!(run(&["solve", "--family", "no-such-preset"]).0, 64);
    assert_eq!(
        run(&["brake", "--n", "2", "--T", "1", "--family", "kepler-unit"]).0,
        64
    );
    assert_eq!(
        run(&[
            "sweep",
            "--family",
            "helium",
            "--param",
            "mu",
            "--schedule",
            "1,0.25,0.5"
        ])
        .0,
        64
    );
    assert_eq!(run(&["frobnicate"]).0, 64);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn check_exit_codes() {
    let d = scratch("check");
    assert_eq!(run(&["check", "--family", "helium"]).0, 0);
    let (code, out, _) = run(&["check", "--family", "anion-n2-z1-g0"]);
    assert_eq!(code, 3);
    assert!(out.contains("charge sum        FAIL"));

    let s_pts: Vec<f64> = (0..50).map(|k| 0.05 * 1.2f64.powi(k)).collect();
    let v: Vec<f64> = s_pts.iter().map(|x| x.powf(-0.5)).collect();
    let table = serde_json::json!({"n": 1, "alpha": 1.0, "mu": 1.0, "f": [{"s": s_pts, "v": v}]});
    let tf = d.join("table.json");
    fs::write(&tf, table.to_string()).unwrap();
    assert_eq!(
        run(&["check", "--family", s(&tf), "--out", s(&d.join("o"))]).0,
        4
    );
    assert!(d.join("o/check.json").is_file());

    let bad = d.join("bad.json");
    fs::write(&bad, "{\"n\": 2, \"alpha\": 1.0").unwrap();
    assert_eq!(run(&["check", "--family", s(&bad)]).0, 65);
    let wrong = d.join("wrong.json");
    fs::write(
        &wrong,
        "{\"n\": 2, \"alpha\": 1.0, \"mu\": 1.0, \"f\": [{\"a\": 1, \"p\": 1}]}",
    )
    .unwrap();
    assert_eq!(run(&["check", "--family", s(&wrong)]).0, 65);
}

#[test]
fn solve_refuses_families_failing_assumptions() {
    let d = scratch("anion");
    let (code, _, err) = run(&[
        "solve",
        "--family",
        "anion-n2-z1-g0",
        "--T",
        "1",
        "--mesh",
        FAST_MESH,
        "--out",
        s(&d),
    ]);
    assert_eq!(code, 65);
    assert!(err.contains("ChargeSum"), "{err}");
}

#[test]
fn helium_continue_passes_all_invariants() {
    let d = scratch("solve");
    let (code, out, err) = run(&[
        "solve",
        "--family",
        "helium",
        "--T",
        "1",
        "--mu",
        "1",
        "--method",
        "continue",
        "--out",
        s(&d),
    ]);
    assert_eq!(code, 0, "{out}{err}");
    let r = json(&d.join("result.json"));
    assert_eq!(r["report"]["pass"], true);
    assert!(r["residuals"]["el"].as_f64().unwrap() <= 1e-10);
    assert!(d.join("orbit.csv").is_file() && d.join("report.json").is_file());
}

#[test]
fn minmax_agrees_with_continuation() {
    let d = scratch("minmax");
    let (code, out, err) = run(&[
        "solve",
        "--family",
        "helium",
        "--T",
        "1",
        "--mu",
        "1",
        "--method",
        "minmax",
        "--mesh",
        FAST_MESH,
        "--cross-check",
        "--out",
        s(&d),
    ]);
    // The fast mesh does not resolve the energy drift.
    assert_eq!(code, 3, "{out}{err}");
    let r = json(&d.join("result.json"));
    assert_eq!(r["method"], "minmax");
    assert_eq!(r["cross_check"]["agree"], true, "{}", r["cross_check"]);
    assert!(r["cross_check"]["difference"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn mu_sweep_writes_table_and_plot() {
    let d = scratch("sweep");
    let (code, out, err) = run_env(
        &[
            "sweep",
            "--family",
            "helium",
            "--param",
            "mu",
            "--mesh",
            FAST_MESH,
            "--plot",
            "svg",
            "--out",
            s(&d),
        ],
        &[("FROZEN_ORBIT_JOBS", "3")],
    );
    assert_eq!(code, 3, "{out}{err}");
    let text = fs::read_to_string(d.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "stage,param,action,energy,h1_dist,residual"
    );
    let dist: Vec<f64> = lines
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(dist.len(), 11);
    assert!(dist.windows(2).skip(3).all(|w| w[1] < w[0]), "{dist:?}");
    let svg = fs::read_to_string(d.join("sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") && !svg.contains("href"));
    assert!(d.join("stages/orbit_10.csv").is_file());
    assert_eq!(json(&d.join("manifest.json"))["jobs"], 3);
}

#[test]
fn failed_sweeps_keep_artifacts_and_exit_2() {
    let d = scratch("partial");
    let partial = d.join("partial");
    let (code, _, err) = run(&[
        "sweep",
        "--family",
        "helium",
        "--param",
        "mu",
        "--schedule",
        "1,2",
        "--mesh",
        FAST_MESH,
        "--out",
        s(&partial),
    ]);
    assert_eq!(code, 2, "{err}");
    let text = fs::read_to_string(partial.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(partial.join("stages/orbit_00.csv").is_file());
    assert_eq!(
        json(&partial.join("result.json"))["sweep"]["failure"]["stage"],
        1
    );

    let cfg = d.join("cfg.json");
    fs::write(&cfg, r#"{"newton": {"max_iter": 1}, "max_bisections": 0}"#).unwrap();
    let none = d.join("none");
    let (code, _, err) = run(&[
        "sweep",
        "--family",
        "helium",
        "--param",
        "mu",
        "--mesh",
        FAST_MESH,
        "--config",
        s(&cfg),
        "--out",
        s(&none),
    ]);
    assert_eq!(code, 2, "{err}");
    assert!(none.join("sweep.csv").is_file());
    assert_eq!(
        json(&none.join("manifest.json"))["config"]["solver"]["newton"]["max_iter"],
        1
    );
}

#[test]
fn reruns_are_byte_identical() {
    let d = scratch("determinism");
    let args = [
        "sweep",
        "--family",
        "helium",
        "--param",
        "mu",
        "--schedule",
        "1,0.5,0.25",
        "--mesh",
        "400:1.5:1.5",
        "--out",
        s(&d),
    ];
    let snapshot = || {
        let mut files = Vec::new();
        for name in [
            "sweep.csv",
            "result.json",
            "stages/orbit_00.csv",
            "stages/orbit_02.csv",
        ] {
            files.push(fs::read(d.join(name)).unwrap());
        }
        let mut m = json(&d.join("manifest.json"));
        m.as_object_mut().unwrap().remove("wall_clock_seconds");
        (files, m)
    };
    run(&args);
    let first = snapshot();
    run(&args);
    assert_eq!(first, snapshot());
}
