use std::collections::BTreeMap;
use std::fs;
use std::path::Path as FsPath;
use std::time::Instant;

use serde_json::{json, Value};

use frozen_orbit::brake::{fold_brake, solve_brake, verify_brake, BrakeCheckOptions, BrakeConfig};
use frozen_orbit::potentials::PRESET_NAMES;
use frozen_orbit::solver::{
    continue_eps, continue_mu, minmax_search, result_envelope, ContinuationRun, OrbitSolution,
    SolverConfig,
};
use frozen_orbit::trajectory::fmt17;
use frozen_orbit::{
    check_assumptions, named_preset, MeshSpec, PotentialFamily, ProbeGrid, SmoothingParams, Verdict,
};

use crate::artifacts::{line_plot_svg, Manifest, OutDir};
use crate::{
    exit, BrakeArgs, CheckArgs, Failure, Method, PlotFormat, SolveArgs, SolveFlags, SweepArgs,
    SweepParam,
};

/// Two methods agreeing to this tolerance in action count as the same orbit.
const AGREEMENT_TOL: f64 = 1e-6;

fn load_family(spec: &str) -> Result<(PotentialFamily, Value), Failure> {
    let path = FsPath::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(e.into()))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| Failure::data(format!("{spec}: {e}")))?;
        let fam = PotentialFamily::from_json_value(&v)
            .map_err(|e| Failure::data(format!("{spec}: {e}")))?;
        return Ok((fam, json!({ "family_file": spec, "family": v })));
    }
    if spec.ends_with(".json") || spec.contains('/') {
        return Err(Failure::data(format!("cannot read family file '{spec}'")));
    }
    match named_preset(spec) {
        Ok(f) => Ok((f, json!({ "preset": spec }))),
        Err(_) => Err(Failure::usage(format!(
            "unknown family '{spec}'; presets are {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

fn parse_mesh(s: &str) -> Result<MeshSpec, Failure> {
    MeshSpec::parse(s).map_err(|e| Failure::usage(format!("--mesh: {e}")))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Preset defaults, then the config file, then flags.
fn solver_config(flags: &SolveFlags) -> Result<SolverConfig, Failure> {
    let mut cfg = SolverConfig {
        mesh: MeshSpec::resolved(),
        ..SolverConfig::default()
    };
    if let Some(file) = &flags.config {
        let text = fs::read_to_string(file).map_err(|e| Failure::io(e.into()))?;
        let over: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::data(format!("{}: {e}", file.display())))?;
        let mut base = serde_json::to_value(&cfg).map_err(|e| Failure::io(e.into()))?;
        merge(&mut base, over);
        cfg = serde_json::from_value(base)
            .map_err(|e| Failure::data(format!("{}: {e}", file.display())))?;
    }
    if let Some(t) = flags.horizon {
        cfg.horizon = t;
    }
    if let Some(m) = &flags.common.mesh {
        cfg.mesh = parse_mesh(m)?;
    }
    cfg.jobs = flags.common.jobs.max(1);
    Ok(cfg)
}

fn family_with_mu(flags: &SolveFlags) -> Result<(PotentialFamily, Value), Failure> {
    let (fam, input) = load_family(&flags.common.family)?;
    let fam = match flags.mu {
        Some(mu) => fam
            .with_mu(mu)
            .map_err(|e| Failure::usage(format!("--mu: {e}")))?,
        None => fam,
    };
    if !(flags.eps > 0.0) {
        return Err(Failure::usage("--eps must be positive"));
    }
    Ok((fam, input))
}

/// Refuses families that fail a structural assumption.
fn require_assumptions(fam: &PotentialFamily) -> Result<(), Failure> {
    let report = check_assumptions(fam, &ProbeGrid::default()).map_err(Failure::core)?;
    if report.any_fail() {
        let mut msg = String::from("family violates the structural assumptions:");
        for (name, r) in report.results() {
            if r.verdict == Verdict::Fail {
                msg += &format!(" {name} ({})", r.note);
            }
        }
        if let Some(b) = &report.bullets {
            if !b.failed.is_empty() {
                msg += &format!(" power-law conditions {:?}", b.failed);
            }
        }
        return Err(Failure::data(msg));
    }
    Ok(())
}

fn csv_bytes(
    write: impl FnOnce(&mut Vec<u8>) -> frozen_orbit::Result<()>,
) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(Failure::core)?;
    Ok(buf)
}

fn config_snapshot(cfg: &impl serde::Serialize) -> Value {
    serde_json::to_value(cfg).unwrap_or(Value::Null)
}

pub fn brake(a: &BrakeArgs, args: Vec<String>) -> Result<u8, Failure> {
    let started = Instant::now();
    let (fam, inputs) = load_family(&a.common.family)?;
    if let Some(n) = a.n {
        if n != fam.n() {
            return Err(Failure::usage(format!(
                "--n {n} but the family has {} electrons",
                fam.n()
            )));
        }
    }
    if !(a.horizon > 0.0 && a.horizon.is_finite()) {
        return Err(Failure::usage("--T must be positive"));
    }
    if !(a.eps1 >= 0.0 && a.eps2 >= 0.0) {
        return Err(Failure::usage("--eps1 and --eps2 must be nonnegative"));
    }
    let mut cfg = BrakeConfig::default();
    if let Some(m) = &a.common.mesh {
        cfg.mesh = parse_mesh(m)?;
    }
    let mut out = OutDir::create(&a.common.out)?;
    let manifest = Manifest {
        command: "brake",
        args,
        config: json!({ "brake": config_snapshot(&cfg), "T": a.horizon, "eps1": a.eps1, "eps2": a.eps2 }),
        inputs,
        seed: a.common.seed,
        jobs: a.common.jobs,
        started,
    };
    let orbit = match solve_brake(&fam, a.horizon, a.eps1, a.eps2, &cfg) {
        Ok(o) => o,
        Err(e) => {
            out.write_json(
                "result.json",
                &json!({ "converged": false, "error": e.to_string() }),
            )?;
            manifest.finish(&mut out)?;
            return Err(Failure::core(e));
        }
    };
    let folded = fold_brake(&orbit, orbit.segment_mesh()).map_err(Failure::core)?;
    let check = verify_brake(&orbit, &fam, &BrakeCheckOptions::default()).map_err(Failure::core)?;
    out.write("eta.csv", &csv_bytes(|w| orbit.write_csv(w))?)?;
    out.write("folded.csv", &csv_bytes(|w| folded.path.write_csv(w))?)?;
    let junctions: Vec<f64> = (1..fam.n()).map(|s| orbit.at_junction(s)).collect();
    let collisions: Vec<Value> = folded
        .collisions
        .iter()
        .map(|(i, j, t)| json!({ "pair": [i, j], "t": t }))
        .collect();
    out.write_json(
        "result.json",
        &json!({
            "converged": true,
            "family": fam.to_json_value().map_err(Failure::core)?,
            "n": fam.n(),
            "T": a.horizon,
            "eps1": a.eps1,
            "eps2": a.eps2,
            "c0": orbit.c,
            "apex": orbit.apex(),
            "junctions": junctions,
            "collisions": collisions,
            "iterations": orbit.iterations,
            "check": check,
        }),
    )?;
    manifest.finish(&mut out)?;
    println!("c0      {}", fmt17(orbit.c));
    println!("eta(nT) {}", fmt17(orbit.apex()));
    for (s, v) in junctions.iter().enumerate() {
        println!("eta({}T) {}", s + 1, fmt17(*v));
    }
    println!("collisions {}", folded.collisions.len());
    println!("check   {}", if check.pass { "pass" } else { "FAIL" });
    Ok(exit::OK)
}

fn continuation_summary(run: &ContinuationRun) -> Value {
    let stages: Vec<Value> = run
        .stages
        .iter()
        .map(|s| {
            json!({
                "param": s.param,
                "action": s.solution.action,
                "energy": s.solution.energy,
                "h1_distance": s.h1_distance,
                "residual": s.solution.residual,
                "pass": s.solution.report.as_ref().map(|r| r.pass),
            })
        })
        .collect();
    json!({ "c0": run.reference.c0, "stages": stages, "failure": run.failure })
}

struct MethodOutcome {
    solution: Option<OrbitSolution>,
    distances: Vec<f64>,
    details: Value,
    error: Option<String>,
}

fn run_method(
    method: Method,
    fam: &PotentialFamily,
    eps: f64,
    schedule: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<MethodOutcome, Failure> {
    let sm = SmoothingParams::uniform(eps);
    match method {
        Method::Continue => {
            let run = match schedule {
                Some(s) => continue_eps(fam, s, cfg),
                None => {
                    if !(fam.mu() > 0.0) {
                        return Err(Failure::usage("continuation needs mu > 0"));
                    }
                    continue_mu(fam, &sm, &[fam.mu()], cfg)
                }
            }
            .map_err(Failure::core)?;
            let error = run
                .failure
                .as_ref()
                .map(|f| format!("stage {} ({}): {}", f.stage, f.param, f.message));
            let solution = if run.failure.is_none() {
                run.last().map(|s| s.solution.clone())
            } else {
                None
            };
            Ok(MethodOutcome {
                solution,
                distances: run.distances(),
                details: json!({ "method": "continue", "continuation": continuation_summary(&run) }),
                error,
            })
        }
        Method::Minmax => {
            let res = minmax_search(fam, &sm, cfg.minmax.radius, cfg).map_err(Failure::core)?;
            let error = match &res.solution {
                Some(_) => None,
                None => Some(
                    res.polish_error
                        .clone()
                        .unwrap_or_else(|| "no critical point".into()),
                ),
            };
            Ok(MethodOutcome {
                distances: Vec::new(),
                details: json!({
                    "method": "minmax",
                    "minmax": {
                        "c0": res.reference.c0,
                        "b": res.b,
                        "c_star": res.c_star,
                        "candidate_action": res.candidate_action,
                        "polish_round": res.polish_round,
                        "polish_error": res.polish_error,
                        "advisory": res.advisory,
                    }
                }),
                solution: res.solution,
                error,
            })
        }
    }
}

pub fn solve(a: &SolveArgs, args: Vec<String>) -> Result<u8, Failure> {
    let started = Instant::now();
    let flags = &a.flags;
    let (fam, inputs) = family_with_mu(flags)?;
    let mut cfg = solver_config(flags)?;
    if let Some(s) = &a.eps_schedule {
        cfg.eps_schedule = s.clone();
    }
    if let Some(r) = a.radius {
        cfg.minmax.radius = r;
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    require_assumptions(&fam)?;
    let mut out = OutDir::create(&flags.common.out)?;
    let manifest = Manifest {
        command: "solve",
        args,
        config: json!({ "solver": config_snapshot(&cfg), "eps": flags.eps, "method": format!("{:?}", a.method).to_lowercase() }),
        inputs,
        seed: flags.common.seed,
        jobs: cfg.jobs,
        started,
    };
    let outcome = run_method(a.method, &fam, flags.eps, a.eps_schedule.as_deref(), &cfg)?;
    let Some(sol) = outcome.solution else {
        let msg = outcome.error.unwrap_or_default();
        out.write_json(
            "result.json",
            &json!({ "converged": false, "error": msg, "details": outcome.details }),
        )?;
        manifest.finish(&mut out)?;
        return Err(Failure::new(
            exit::SOLVER,
            anyhow::anyhow!("solver failure: {msg}"),
        ));
    };
    let mut result = envelope(&sol, &cfg, &outcome.distances)?;
    merge(&mut result, outcome.details);
    if a.cross_check {
        let other = if a.method == Method::Continue {
            Method::Minmax
        } else {
            Method::Continue
        };
        let o = run_method(other, &fam, flags.eps, a.eps_schedule.as_deref(), &cfg)?;
        let cross = match &o.solution {
            Some(s) => {
                let diff = (s.action - sol.action).abs();
                let agree = diff <= AGREEMENT_TOL;
                if !agree {
                    eprintln!(
                        "warning: methods disagree: action {} vs {} (difference {diff:e})",
                        sol.action, s.action
                    );
                }
                json!({ "method": format!("{other:?}").to_lowercase(), "action": s.action, "difference": diff, "tolerance": AGREEMENT_TOL, "agree": agree })
            }
            None => {
                eprintln!(
                    "warning: cross-check did not converge: {}",
                    o.error.clone().unwrap_or_default()
                );
                json!({ "method": format!("{other:?}").to_lowercase(), "converged": false, "error": o.error })
            }
        };
        merge(&mut result, json!({ "cross_check": cross }));
    }
    out.write("orbit.csv", &csv_bytes(|w| sol.path.write_csv(w))?)?;
    out.write_json("report.json", &sol.report)?;
    out.write_json("result.json", &result)?;
    manifest.finish(&mut out)?;
    let report = sol.report.as_ref().expect("solutions carry a report");
    println!("action  {}", fmt17(sol.action));
    println!("energy  {}", fmt17(sol.energy));
    print!("{}", report.table());
    Ok(if report.pass {
        exit::OK
    } else {
        exit::INVARIANT
    })
}

fn envelope(sol: &OrbitSolution, cfg: &SolverConfig, distances: &[f64]) -> Result<Value, Failure> {
    let mut paths = BTreeMap::new();
    paths.insert("orbit".to_string(), "orbit.csv".to_string());
    paths.insert("report".to_string(), "report.json".to_string());
    result_envelope(sol, cfg, distances, &paths).map_err(Failure::core)
}

pub fn sweep(a: &SweepArgs, args: Vec<String>) -> Result<u8, Failure> {
    let started = Instant::now();
    let flags = &a.flags;
    let (fam, inputs) = family_with_mu(flags)?;
    let mut cfg = solver_config(flags)?;
    match (a.param, &a.schedule) {
        (SweepParam::Mu, Some(s)) => cfg.mu_schedule = s.clone(),
        (SweepParam::Eps, Some(s)) => cfg.eps_schedule = s.clone(),
        _ => {}
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    require_assumptions(&fam)?;
    let mut out = OutDir::create(&flags.common.out)?;
    let manifest = Manifest {
        command: "sweep",
        args,
        config: json!({ "solver": config_snapshot(&cfg), "eps": flags.eps, "param": format!("{:?}", a.param).to_lowercase() }),
        inputs,
        seed: flags.common.seed,
        jobs: cfg.jobs,
        started,
    };
    let run = match a.param {
        SweepParam::Mu => continue_mu(
            &fam,
            &SmoothingParams::uniform(flags.eps),
            &cfg.mu_schedule,
            &cfg,
        ),
        SweepParam::Eps => continue_eps(&fam, &cfg.eps_schedule, &cfg),
    };
    let header = ["stage", "param", "action", "energy", "h1_dist", "residual"];
    let run = match run {
        Ok(r) => r,
        Err(e) => {
            out.write("sweep.csv", (header.join(",") + "\n").as_bytes())?;
            out.write_json(
                "result.json",
                &json!({ "sweep": { "stages": [], "failure": e.to_string() } }),
            )?;
            manifest.finish(&mut out)?;
            return Err(Failure::core(e));
        }
    };

    let mut table = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::io(e.into());
    table.write_record(header).map_err(io)?;
    for (idx, s) in run.stages.iter().enumerate() {
        out.write(
            &format!("stages/orbit_{idx:02}.csv"),
            &csv_bytes(|w| s.solution.path.write_csv(w))?,
        )?;
        table
            .write_record([
                idx.to_string(),
                fmt17(s.param),
                fmt17(s.solution.action),
                fmt17(s.solution.energy),
                s.h1_distance.map(fmt17).unwrap_or_default(),
                fmt17(s.solution.residual),
            ])
            .map_err(io)?;
    }
    let bytes = table
        .into_inner()
        .map_err(|e| Failure::io(anyhow::anyhow!("{e}")))?;
    out.write("sweep.csv", &bytes)?;
    if a.plot == Some(PlotFormat::Svg) {
        let (pts, title, ylabel): (Vec<(f64, f64)>, _, _) = match a.param {
            SweepParam::Mu => (
                run.stages
                    .iter()
                    .filter_map(|s| s.h1_distance.map(|d| (s.param, d)))
                    .collect(),
                "distance to the folded brake",
                "h1 distance",
            ),
            SweepParam::Eps => (
                run.stages
                    .iter()
                    .map(|s| (s.param, s.solution.action))
                    .collect(),
                "action along the smoothing sweep",
                "action",
            ),
        };
        let xlabel = if a.param == SweepParam::Mu {
            "mu"
        } else {
            "eps"
        };
        out.write(
            "sweep.svg",
            line_plot_svg(title, xlabel, ylabel, &pts).as_bytes(),
        )?;
    }
    out.write_json(
        "result.json",
        &json!({
            "family": fam.to_json_value().map_err(Failure::core)?,
            "config": config_snapshot(&cfg),
            "param": format!("{:?}", a.param).to_lowercase(),
            "sweep": continuation_summary(&run),
            "paths": { "table": "sweep.csv", "stages": "stages/" },
        }),
    )?;
    manifest.finish(&mut out)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    if let Some(f) = &run.failure {
        eprintln!(
            "error: stage {} ({}) failed: {}",
            f.stage, f.param, f.message
        );
        return Ok(exit::SOLVER);
    }
    let pass = run
        .stages
        .iter()
        .all(|s| s.solution.report.as_ref().is_some_and(|r| r.pass));
    Ok(if pass { exit::OK } else { exit::INVARIANT })
}

pub fn check(a: &CheckArgs, args: Vec<String>) -> Result<u8, Failure> {
    let started = Instant::now();
    let (fam, inputs) = load_family(&a.family)?;
    let grid = ProbeGrid::default();
    let report = check_assumptions(&fam, &grid).map_err(Failure::core)?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Failure::io(e.into()))?
        );
    } else {
        println!("{:<5} {:<13} {:<8} note", "hyp", "verdict", "closed");
        for (name, r) in report.results() {
            let v = match r.verdict {
                Verdict::Pass => "pass",
                Verdict::Fail => "FAIL",
                Verdict::Inconclusive => "inconclusive",
            };
            println!("{:<5} {:<13} {:<8} {}", name, v, r.closed_form, r.note);
        }
        if let Some(b) = &report.bullets {
            let mark = |ok: bool| if ok { "pass" } else { "FAIL" };
            println!("exponent ordering {}", mark(b.exponent_ordering));
            println!("exponent range    {}", mark(b.exponent_range));
            println!("charge sum        {}", mark(b.charge_sum));
        }
    }
    if let Some(dir) = &a.out {
        let mut out = OutDir::create(dir)?;
        out.write_json("check.json", &report)?;
        Manifest {
            command: "check",
            args,
            config: json!({ "grid": grid }),
            inputs,
            seed: 0,
            jobs: 1,
            started,
        }
        .finish(&mut out)?;
    }
    Ok(if report.any_fail() {
        exit::INVARIANT
    } else if report.any_inconclusive() {
        exit::INCONCLUSIVE
    } else {
        exit::OK
    })
}
