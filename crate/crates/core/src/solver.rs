//! Frozen planet orbits: damped Newton on the discrete Euler-Lagrange
//! system, homotopy in `mu` and in the smoothing radius, and a min-max
//! search over the linking disk.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::brake::{fold_brake, solve_brake, BrakeConfig, BrakeOrbit, FoldedBrake};
use crate::diagnostics::{
    invariant_report, nodal_velocity, total_energy, InvariantReport, References, ReportTolerances,
};
use crate::error::{Error, Result};
use crate::linking::{
    boundary_min_g, disk_seed, flow_all, theta, FlowParams, FlowState, GParams, SamplePlan,
    SeparationCoords, StepControl,
};
use crate::potentials::PotentialFamily;
use crate::smoothing::{Model, SmoothingParams};
use crate::trajectory::{
    action, assemble_action, h1_distance, Assembly, Level, MeshSpec, Path, Quadrature,
};

#[derive(Debug, Clone)]
pub(crate) struct NewtonOutcome {
    pub x: Vec<f64>,
    /// Low-order parts of `x`.
    pub lo: Vec<f64>,
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `x + lam dx` in double-f64 arithmetic.
fn compensated_step(x: &[f64], lo: &[f64], dx: &[f64], lam: f64) -> (Vec<f64>, Vec<f64>) {
    let mut hi = Vec::with_capacity(x.len());
    let mut low = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let (s, e) = two_sum(x[k], lam * dx[k]);
        let (h, l) = two_sum(s, e + lo[k]);
        hi.push(h);
        low.push(l);
    }
    (hi, low)
}

const POLISH_STEPS: usize = 3;

/// Newton on `grad = 0` with rows in `pinned` held fixed. Iterates are kept
/// as `x + lo` pairs. `cap(x, dx)` bounds the step fraction so iterates stay
/// admissible. Steps are accepted on sufficient decrease of the gradient's
/// Euclidean norm.
pub(crate) fn damped_newton<E, C>(
    x0: Vec<f64>,
    lo0: Vec<f64>,
    pinned: &[usize],
    eval: E,
    cap: C,
    tol: f64,
    max_iter: usize,
) -> Result<NewtonOutcome>
where
    E: Fn(&[f64], &[f64], Level) -> Result<Assembly>,
    C: Fn(&[f64], &[f64]) -> f64,
{
    let free_norms = |g: &[f64]| {
        let mut mx: f64 = 0.0;
        let mut s2 = 0.0;
        for (idx, v) in g.iter().enumerate() {
            if !pinned.contains(&idx) {
                mx = mx.max(v.abs());
                s2 += v * v;
            }
        }
        (mx, s2.sqrt())
    };
    let mut x = x0;
    let mut lo = lo0;
    let mut asm = eval(&x, &lo, Level::Hessian)?;
    let (mut res, mut norm) = free_norms(&asm.grad);
    let mut it = 0;
    loop {
        if res <= tol {
            // A few undamped steps down to the roundoff floor: on fine meshes
            // nodal residuals at `tol` still add up over many nodes.
            for _ in 0..POLISH_STEPS {
                let mut hess = asm.hess.take().expect("Hessian requested");
                let mut rhs: Vec<f64> = asm.grad.iter().map(|g| -g).collect();
                for &p in pinned {
                    hess.pin(p);
                    rhs[p] = 0.0;
                }
                let Ok(fac) = hess.factor() else { break };
                let dx = fac.solve(&rhs);
                let lam = cap(&x, &dx).min(1.0);
                if lam < 1.0 || dx.iter().any(|v| !v.is_finite()) {
                    break;
                }
                let trial = compensated_step(&x, &lo, &dx, 1.0);
                let Ok(a) = eval(&trial.0, &trial.1, Level::Hessian) else {
                    break;
                };
                let r = free_norms(&a.grad).0;
                if !(r < 0.5 * res) {
                    break;
                }
                (x, lo) = trial;
                asm = a;
                res = r;
                it += 1;
            }
            return Ok(NewtonOutcome {
                x,
                lo,
                value: asm.value,
                residual: res,
                iterations: it,
            });
        }
        if it >= max_iter {
            return Err(Error::Solver {
                reason: "iteration limit".into(),
                residual: res,
                iterations: it,
            });
        }
        it += 1;
        let mut hess = asm.hess.take().expect("Hessian requested");
        let mut rhs: Vec<f64> = asm.grad.iter().map(|g| -g).collect();
        for &p in pinned {
            hess.pin(p);
            rhs[p] = 0.0;
        }
        let dx = hess.factor()?.solve(&rhs);
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver {
                reason: "non-finite Newton step".into(),
                residual: res,
                iterations: it,
            });
        }
        let lam0 = cap(&x, &dx).min(1.0);
        let mut lam = lam0;
        let mut accepted = None;
        while lam > 1e-10 {
            let trial = compensated_step(&x, &lo, &dx, lam);
            if let Ok(a) = eval(&trial.0, &trial.1, Level::Gradient) {
                let (r, nr) = free_norms(&a.grad);
                // Near the roundoff floor the 2-norm can stall while the
                // max-norm still improves under a full step.
                if nr <= (1.0 - 1e-4 * lam) * norm || r <= tol || (lam == lam0 && r < 0.5 * res) {
                    accepted = Some(trial);
                    break;
                }
            }
            lam *= 0.5;
        }
        match accepted {
            Some(t) => {
                (x, lo) = t;
                asm = eval(&x, &lo, Level::Hessian)?;
                let n = free_norms(&asm.grad);
                res = n.0;
                norm = n.1;
            }
            None => {
                return Err(Error::Solver {
                    reason: "line search stalled".into(),
                    residual: res,
                    iterations: it,
                })
            }
        }
    }
}

/// Largest step fraction keeping each listed gap above 10% of its value.
pub(crate) fn gap_cap(gaps: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut lam: f64 = 1.0;
    for (g, dg) in gaps {
        if dg < 0.0 && g > 0.0 {
            lam = lam.min(0.9 * g / -dg);
        }
    }
    lam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinmaxConfig {
    /// Linking radius in log-gap coordinates.
    pub radius: f64,
    pub plan: SamplePlan,
    pub beta: f64,
    pub lambda: f64,
    /// Level of the `G` constraint; defaults to the smallest boundary value
    /// minus one cutoff width.
    #[serde(default)]
    pub b: Option<f64>,
    /// Cutoff width of the deformation field.
    pub cutoff: f64,
    pub steps_per_round: usize,
    pub max_rounds: usize,
    /// Rounds over which the disk maximum must be stable.
    pub window: usize,
    pub stable_tol: f64,
    pub control: StepControl,
    /// Maximizers tried by Newton before giving up.
    pub polish_attempts: usize,
}

impl Default for MinmaxConfig {
    fn default() -> Self {
        Self {
            radius: 3.0,
            plan: SamplePlan::default(),
            beta: 1.0,
            lambda: 1.0,
            b: None,
            cutoff: 0.5,
            steps_per_round: 10,
            max_rounds: 40,
            window: 3,
            stable_tol: 1e-6,
            control: StepControl::default(),
            polish_attempts: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Half-period `T`.
    pub horizon: f64,
    pub mesh: MeshSpec,
    pub quadrature: Quadrature,
    pub newton: NewtonConfig,
    /// Recorded `mu` stages; decreasing schedules are reached by continuing
    /// upward first.
    pub mu_schedule: Vec<f64>,
    pub eps_schedule: Vec<f64>,
    /// Gaps of the shifted folded brake used as the first seed.
    pub seed_gap: f64,
    /// Maximum number of step halvings between two stages.
    pub max_bisections: usize,
    pub minmax: MinmaxConfig,
    pub report: ReportTolerances,
    pub jobs: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            mesh: MeshSpec::TwoSided {
                m: 2000,
                p0: 1.5,
                p1: 1.5,
            },
            quadrature: Quadrature::Simpson,
            newton: NewtonConfig::default(),
            mu_schedule: (0..=10).map(|k| 2f64.powi(-k)).collect(),
            eps_schedule: vec![1e-2, 1e-3, 1e-4, 1e-5],
            seed_gap: 0.01,
            max_bisections: 8,
            minmax: MinmaxConfig::default(),
            report: ReportTolerances::default(),
            jobs: 1,
        }
    }
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0]) || v.windows(2).all(|w| w[1] < w[0])
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.newton.tol > 0.0) || self.newton.max_iter == 0 {
            return Err(Error::Config(
                "Newton tolerance and iteration limit must be positive".into(),
            ));
        }
        if !strictly_monotone(&self.mu_schedule) || self.mu_schedule.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::Config(
                "mu schedule must be strictly monotone and nonnegative".into(),
            ));
        }
        if !strictly_monotone(&self.eps_schedule) || self.eps_schedule.iter().any(|e| !(*e >= 0.0))
        {
            return Err(Error::Config(
                "eps schedule must be strictly monotone and nonnegative".into(),
            ));
        }
        if !(self.seed_gap > 0.0) {
            return Err(Error::Config("seed gap must be positive".into()));
        }
        Ok(())
    }

    fn brake_config(&self) -> BrakeConfig {
        BrakeConfig {
            mesh: self.mesh.clone(),
            quadrature: self.quadrature,
            tol: self.newton.tol,
            max_iter: self.newton.max_iter,
        }
    }
}

/// Boundary certificate. Velocities are the discrete momenta at the end
/// nodes (the gradient's boundary rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryResiduals {
    pub q1_start: f64,
    pub v1_end: f64,
    /// `|q_i'(0)|` for `i >= 2`.
    pub v_start: Vec<f64>,
    /// `|q_i'(T)|` for `i >= 2`.
    pub v_end: Vec<f64>,
    pub max: f64,
    /// One-sided difference velocities at the ends, for comparison.
    pub fd_max: f64,
}

#[derive(Debug, Clone)]
pub struct OrbitSolution {
    pub path: Path,
    pub model: Model,
    pub action: f64,
    /// Mean nodal energy.
    pub energy: f64,
    /// Max nodal gradient over interior nodes.
    pub residual: f64,
    pub boundary: BoundaryResiduals,
    pub min_separation: f64,
    pub iterations: usize,
    pub report: Option<InvariantReport>,
}

impl OrbitSolution {
    fn from_path(path: Path, model: &Model, iterations: usize) -> Result<Self> {
        let asm = assemble_action(&path, model, Level::Gradient)?;
        let n = path.n();
        let len = path.mesh().len();
        let g = &asm.grad;
        let residual = g[n..(len - 1) * n]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let last = len - 1;
        let v_start: Vec<f64> = (1..n).map(|i| g[i].abs()).collect();
        let v_end: Vec<f64> = (1..n).map(|i| g[last * n + i].abs()).collect();
        let v1_end = g[last * n].abs();
        let q1_start = path.get(0, 0).abs();
        let max = v_start
            .iter()
            .chain(&v_end)
            .fold(v1_end.max(q1_start), |m, v| m.max(*v));
        let mut fd_max = nodal_velocity(&path, last, 0).abs();
        for i in 1..n {
            fd_max = fd_max
                .max(nodal_velocity(&path, 0, i).abs())
                .max(nodal_velocity(&path, last, i).abs());
        }
        let energies: Vec<f64> = (1..last)
            .filter_map(|k| total_energy(&path, model, k).ok())
            .collect();
        let energy = if energies.is_empty() {
            f64::NAN
        } else {
            energies.iter().sum::<f64>() / energies.len() as f64
        };
        let min_separation = if n > 1 {
            path.min_separation()
        } else {
            f64::INFINITY
        };
        Ok(Self {
            action: asm.value,
            energy,
            residual,
            boundary: BoundaryResiduals {
                q1_start,
                v1_end,
                v_start,
                v_end,
                max,
                fd_max,
            },
            min_separation,
            iterations,
            report: None,
            path,
            model: model.clone(),
        })
    }

    pub fn family(&self) -> &PotentialFamily {
        self.model.family()
    }

    pub fn smoothing(&self) -> &SmoothingParams {
        self.model.smoothing()
    }

    pub fn with_report(
        mut self,
        c0: f64,
        folded: Option<&FoldedBrake>,
        tol: ReportTolerances,
    ) -> Self {
        self.report = Some(invariant_report(&self, &References { c0, folded, tol }));
        self
    }
}

/// Step bound keeping adjacent gaps, and `q_1` off the pinned node when
/// `f_1` is singular, above 10% of their current value.
fn path_cap(n: usize, singular_first: bool) -> impl Fn(&[f64], &[f64]) -> f64 {
    move |x: &[f64], dx: &[f64]| {
        let rows = x.len() / n;
        let gaps = (0..rows).flat_map(move |k| {
            (0..n.saturating_sub(1)).map(move |i| {
                let a = k * n + i;
                (x[a + 1] - x[a], dx[a + 1] - dx[a])
            })
        });
        let first = (1..rows)
            .filter(move |_| singular_first)
            .map(move |k| (x[k * n], dx[k * n]));
        gap_cap(gaps.chain(first))
    }
}

/// Newton on the discrete Euler-Lagrange system of `model` from `seed`.
pub fn solve_model(seed: &Path, model: &Model, newton: &NewtonConfig) -> Result<OrbitSolution> {
    let n = seed.n();
    if n != model.n() {
        return Err(Error::Shape(format!(
            "seed has {n} components, family {}",
            model.n()
        )));
    }
    let pinned: Vec<usize> = if seed.is_pinned() {
        vec![0]
    } else {
        Vec::new()
    };
    let out = damped_newton(
        seed.values().to_vec(),
        seed.low_parts(),
        &pinned,
        |x, lo, level| {
            assemble_action(
                &seed
                    .with_values_unchecked(x.to_vec())
                    .with_low_parts(lo.to_vec()),
                model,
                level,
            )
        },
        path_cap(n, model.first_singular()),
        newton.tol,
        newton.max_iter,
    )?;
    let path = seed
        .with_values(out.x)
        .map_err(|_| Error::Barrier { floor: 0.0 })?
        .with_low_parts(out.lo);
    OrbitSolution::from_path(path, model, out.iterations)
}

/// Solves the boundary value problem `q_1(0) = 0`, `q_1'(T) = 0`,
/// `q_i'(0) = q_i'(T) = 0` (`i >= 2`) from `seed`.
pub fn solve_el_bvp(
    seed: &Path,
    family: &PotentialFamily,
    smoothing: &SmoothingParams,
    config: &SolverConfig,
) -> Result<OrbitSolution> {
    config.validate()?;
    let model = Model::new(family, smoothing)?;
    if family.n() == 1 {
        let mesh_spec = seed.mesh().spec().clone();
        let cfg = SolverConfig {
            mesh: mesh_spec,
            horizon: seed.mesh().horizon(),
            ..config.clone()
        };
        return Ok(brake_reference(&model, &cfg)?
            .solution
            .expect("single electron"));
    }
    solve_model(seed, &model, &config.newton)
}

/// The folded `nT`-brake of `model`'s attractions on the solver mesh, with
/// its minimum value.
#[derive(Debug, Clone)]
pub struct BrakeReference {
    pub orbit: BrakeOrbit,
    pub folded: FoldedBrake,
    pub c0: f64,
    /// The brake as a solution when `n = 1`.
    pub solution: Option<OrbitSolution>,
}

pub fn brake_reference(model: &Model, config: &SolverConfig) -> Result<BrakeReference> {
    let sm = model.smoothing();
    let orbit = solve_brake(
        model.family(),
        config.horizon,
        sm.eps_for(0),
        sm.epsilon,
        &config.brake_config(),
    )?;
    let folded = fold_brake(&orbit, orbit.segment_mesh())?;
    let c0 = orbit.c;
    let solution = if model.n() == 1 {
        Some(OrbitSolution::from_path(
            folded.path.clone(),
            model,
            orbit.iterations,
        )?)
    } else {
        None
    };
    Ok(BrakeReference {
        orbit,
        folded,
        c0,
        solution,
    })
}

/// Folded brake shifted by equal gaps.
pub fn brake_seed(reference: &BrakeReference, gap: f64) -> Result<Path> {
    let n = reference.folded.path.n();
    if n == 1 {
        return Ok(reference.folded.path.clone());
    }
    theta(
        &SeparationCoords::from_gaps(&vec![gap; n - 1])?,
        &reference.folded,
    )
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub param: f64,
    pub solution: OrbitSolution,
    /// Distance to the folded brake (`mu` runs only).
    pub h1_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: usize,
    pub param: f64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ContinuationRun {
    pub reference: BrakeReference,
    pub stages: Vec<Stage>,
    pub failure: Option<StageFailure>,
}

impl ContinuationRun {
    pub fn last(&self) -> Option<&Stage> {
        self.stages.last()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.stages.iter().filter_map(|s| s.h1_distance).collect()
    }
}

/// Solves at `to` starting from a solution at `from`, halving the parameter
/// step on failure.
fn advance<F>(
    prev: &Path,
    from: f64,
    to: f64,
    make: &F,
    newton: &NewtonConfig,
    depth: usize,
) -> Result<OrbitSolution>
where
    F: Fn(f64) -> Result<Model>,
{
    let model = make(to)?;
    match solve_model(prev, &model, newton) {
        Ok(s) => Ok(s),
        Err(e) if depth == 0 => Err(e),
        Err(_) => {
            let mid = if from > 0.0 && to > 0.0 {
                (from * to).sqrt()
            } else {
                0.5 * (from + to)
            };
            let half = advance(prev, from, mid, make, newton, depth - 1)?;
            advance(&half.path, mid, to, make, newton, depth - 1)
        }
    }
}

fn geometric_ramp(from: f64, to: f64, steps: usize) -> Vec<f64> {
    (1..=steps)
        .map(|k| from * (to / from).powf(k as f64 / steps as f64))
        .collect()
}

/// Smallest `mu` solved from the folded-brake seed.
pub const MU_START: f64 = 1.0 / 1024.0;

/// Multipliers applied to `seed_gap`, in order, for the first solve.
const SEED_GAP_LADDER: [f64; 5] = [1.0, 3.0, 1.0 / 3.0, 10.0, 0.1];

/// A start solution reaching beyond this multiple of the brake's apex has
/// slid toward the critical point at infinity.
const RUNAWAY_FACTOR: f64 = 50.0;

fn first_solve<F>(
    reference: &BrakeReference,
    mu: f64,
    make: &F,
    config: &SolverConfig,
) -> Result<OrbitSolution>
where
    F: Fn(f64) -> Result<Model>,
{
    let apex = reference
        .folded
        .path
        .values()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut last = None;
    for k in SEED_GAP_LADDER {
        let seed = brake_seed(reference, k * config.seed_gap)?;
        match advance(&seed, 0.0, mu, make, &config.newton, 0) {
            Ok(s) => {
                let reach = s.path.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if reach <= RUNAWAY_FACTOR * apex {
                    return Ok(s);
                }
                last = Some(Error::Solver {
                    reason: format!("start solution runs away (max |q| = {reach:.3e})"),
                    residual: s.residual,
                    iterations: s.iterations,
                });
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("ladder is nonempty"))
}

/// Homotopy in `mu`. The first solve is seeded by the shifted folded brake
/// at `min(MU_START, smallest scheduled mu)` and climbs to the smallest
/// scheduled value; a decreasing schedule is first climbed in reverse
/// without recording.
pub fn continue_mu(
    family: &PotentialFamily,
    smoothing: &SmoothingParams,
    schedule: &[f64],
    config: &SolverConfig,
) -> Result<ContinuationRun> {
    config.validate()?;
    if schedule.is_empty() || !strictly_monotone(schedule) || schedule.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::Config(
            "mu schedule must be nonempty, positive and strictly monotone".into(),
        ));
    }
    let base = Model::new(family, smoothing)?;
    let reference = brake_reference(&base, config)?;
    let c0 = reference.c0;
    let make = |mu: f64| base.with_mu(mu);
    let tol = config.report;
    let mut run = ContinuationRun {
        reference,
        stages: Vec::new(),
        failure: None,
    };
    if family.n() == 1 {
        for &mu in schedule {
            let sol = OrbitSolution::from_path(run.reference.folded.path.clone(), &make(mu)?, 0)?;
            let sol = sol.with_report(c0, Some(&run.reference.folded), tol);
            run.stages.push(Stage {
                param: mu,
                solution: sol,
                h1_distance: Some(0.0),
            });
        }
        return Ok(run);
    }
    let lowest = schedule.iter().copied().fold(f64::INFINITY, f64::min);
    let start = lowest.min(MU_START);
    let mut current = match first_solve(&run.reference, start, &make, config) {
        Ok(s) => s,
        Err(e) => {
            run.failure = Some(StageFailure {
                stage: 0,
                param: start,
                message: e.to_string(),
            });
            return Ok(run);
        }
    };
    let mut at = start;
    if lowest > start {
        for mu in geometric_ramp(start, lowest, 10) {
            match advance(
                &current.path,
                at,
                mu,
                &make,
                &config.newton,
                config.max_bisections,
            ) {
                Ok(s) => {
                    current = s;
                    at = mu;
                }
                Err(e) => {
                    run.failure = Some(StageFailure {
                        stage: 0,
                        param: mu,
                        message: format!("warm-up: {e}"),
                    });
                    return Ok(run);
                }
            }
        }
        at = lowest;
    }
    if schedule[0] > schedule[schedule.len() - 1] {
        let mut rev: Vec<f64> = schedule.to_vec();
        rev.reverse();
        for &mu in &rev[1..] {
            match advance(
                &current.path,
                at,
                mu,
                &make,
                &config.newton,
                config.max_bisections,
            ) {
                Ok(s) => {
                    current = s;
                    at = mu;
                }
                Err(e) => {
                    run.failure = Some(StageFailure {
                        stage: 0,
                        param: mu,
                        message: format!("warm-up: {e}"),
                    });
                    return Ok(run);
                }
            }
        }
    }
    for (idx, &mu) in schedule.iter().enumerate() {
        let sol = if mu == at {
            current.clone()
        } else {
            match advance(
                &current.path,
                at,
                mu,
                &make,
                &config.newton,
                config.max_bisections,
            ) {
                Ok(s) => s,
                Err(e) => {
                    run.failure = Some(StageFailure {
                        stage: idx,
                        param: mu,
                        message: e.to_string(),
                    });
                    return Ok(run);
                }
            }
        };
        let d = h1_distance(&sol.path, &run.reference.folded.path)?;
        let sol = sol.with_report(c0, Some(&run.reference.folded), tol);
        current = sol.clone();
        at = mu;
        run.stages.push(Stage {
            param: mu,
            solution: sol,
            h1_distance: Some(d),
        });
    }
    Ok(run)
}

/// Homotopy in the smoothing radius at the family's `mu`. A zero entry
/// solves the unregularized problem with the collision element.
pub fn continue_eps(
    family: &PotentialFamily,
    schedule: &[f64],
    config: &SolverConfig,
) -> Result<ContinuationRun> {
    config.validate()?;
    if schedule.is_empty()
        || !schedule.windows(2).all(|w| w[1] < w[0])
        || schedule.iter().any(|e| !(*e >= 0.0))
    {
        return Err(Error::Config(
            "eps schedule must be nonempty, nonnegative and strictly decreasing".into(),
        ));
    }
    if schedule[0] == 0.0 {
        return Err(Error::Config(
            "eps schedule must start from a positive radius".into(),
        ));
    }
    let target_mu = family.mu();
    let first = SmoothingParams::uniform(schedule[0]);
    let warm = continue_mu(family, &first, &[target_mu], config)?;
    let mut run = ContinuationRun {
        reference: warm.reference.clone(),
        stages: Vec::new(),
        failure: None,
    };
    let Some(start) = warm.last() else {
        run.failure = warm.failure.or(Some(StageFailure {
            stage: 0,
            param: schedule[0],
            message: "no warm-up stage".into(),
        }));
        return Ok(run);
    };
    if let Some(f) = warm.failure {
        run.failure = Some(StageFailure {
            message: format!("warm-up: {}", f.message),
            ..f
        });
        return Ok(run);
    }
    let mut current = start.solution.clone();
    let mut at = schedule[0];
    let make = |eps: f64| Model::new(family, &SmoothingParams::uniform(eps));
    for (idx, &eps) in schedule.iter().enumerate() {
        let sol = if idx == 0 {
            current.clone()
        } else {
            match advance(
                &current.path,
                at,
                eps,
                &make,
                &config.newton,
                config.max_bisections,
            ) {
                Ok(s) => s,
                Err(e) => {
                    run.failure = Some(StageFailure {
                        stage: idx,
                        param: eps,
                        message: e.to_string(),
                    });
                    return Ok(run);
                }
            }
        };
        let reference = if idx == 0 {
            run.reference.clone()
        } else {
            brake_reference(&make(eps)?, config)?
        };
        let sol = sol.with_report(reference.c0, Some(&reference.folded), config.report);
        current = sol.clone();
        at = eps;
        run.stages.push(Stage {
            param: eps,
            solution: sol,
            h1_distance: None,
        });
    }
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct MinmaxResult {
    pub reference: BrakeReference,
    /// Polished critical point, when Newton converged.
    pub solution: Option<OrbitSolution>,
    /// Sample the solution was polished from (the final maximizer when
    /// every attempt failed).
    pub candidate: Path,
    pub candidate_action: f64,
    /// Round whose maximizer was polished; `None` for the final one.
    pub polish_round: Option<usize>,
    /// Running minimum of the disk maxima, one entry per round.
    pub c_star: Vec<f64>,
    pub b: f64,
    pub polish_error: Option<String>,
    pub advisory: Option<String>,
}

/// Deforms the linking disk by the cutoff flow, tracks the minimax level,
/// and polishes the top sample with Newton.
pub fn minmax_search(
    family: &PotentialFamily,
    smoothing: &SmoothingParams,
    r: f64,
    config: &SolverConfig,
) -> Result<MinmaxResult> {
    config.validate()?;
    let model = Model::new(family, smoothing)?;
    let reference = brake_reference(&model, config)?;
    let c0 = reference.c0;
    let mc = &config.minmax;
    if family.n() == 1 {
        let sol = reference
            .solution
            .clone()
            .expect("single electron")
            .with_report(c0, Some(&reference.folded), config.report);
        return Ok(MinmaxResult {
            candidate: sol.path.clone(),
            candidate_action: sol.action,
            solution: Some(sol),
            c_star: vec![c0],
            polish_round: None,
            b: f64::NAN,
            polish_error: None,
            advisory: None,
            reference,
        });
    }
    let g = GParams {
        beta: mc.beta,
        lambda: mc.lambda,
        c: c0,
    };
    let samples = disk_seed(r, &reference.folded, &mc.plan)?;
    let min_bd = boundary_min_g(&samples, &model, &g)?;
    let b = mc.b.unwrap_or(min_bd - mc.cutoff);
    if !(min_bd > b) {
        return Err(Error::Seeding {
            min_boundary_g: min_bd,
            b,
        });
    }
    // The critical point sits in {G <= b}; maxima are taken over samples
    // there, since the field is switched off above b + cutoff.
    let top_in_region = |paths: &[&Path]| -> Result<(usize, f64, Vec<f64>)> {
        let vals: Vec<(f64, f64)> = paths
            .iter()
            .map(|p| Ok((action(p, &model)?, g.value(p, &model)?)))
            .collect::<Result<_>>()?;
        let inside = |gv: f64| gv <= b;
        let any_inside = vals.iter().any(|v| inside(v.1));
        let eligible = |v: &(f64, f64)| !any_inside || inside(v.1);
        let top = vals
            .iter()
            .filter(|v| eligible(v))
            .map(|v| v.0)
            .fold(f64::NEG_INFINITY, f64::max);
        // Ties within tolerance go to the smallest G.
        let tie = 1e-9 * top.abs().max(1.0);
        let mut best: Option<(usize, f64)> = None;
        for (idx, v) in vals.iter().enumerate() {
            if eligible(v) && top - v.0 <= tie && best.is_none_or(|(_, bg)| v.1 < bg) {
                best = Some((idx, v.1));
            }
        }
        let (idx, _) = best.expect("at least one sample");
        Ok((idx, top, vals.iter().map(|v| v.0).collect()))
    };
    let (i0, mut c_star, _) = top_in_region(&samples.iter().map(|s| &s.path).collect::<Vec<_>>())?;
    let mut history = vec![c_star];
    // Per-round maximizers, kept as fallback polishing seeds.
    let mut tops = vec![(0usize, samples[i0].path.clone(), c_star)];
    let params = FlowParams {
        c_star,
        b,
        eps: mc.cutoff,
        g,
        grad_floor: 1e-12,
    };
    let mut states: Vec<FlowState> = samples
        .iter()
        .map(|s| FlowState::new(s.path.clone(), params, mc.control.dt_max))
        .collect();
    let mut advisory = None;
    for _ in 0..mc.max_rounds {
        for st in states.iter_mut() {
            st.params.c_star = c_star;
        }
        for (idx, res) in flow_all(
            &mut states,
            &model,
            mc.steps_per_round,
            &mc.control,
            config.jobs,
        )
        .into_iter()
        .enumerate()
        {
            if let Err(e) = res {
                if (states[idx].history.last().map_or(f64::NAN, |h| h.g_value) - b).abs()
                    <= mc.cutoff
                {
                    advisory = Some(format!(
                        "flow stalled near the G = b interface ({e}); consider raising b or lambda"
                    ));
                }
            }
        }
        let (it, top, _) = top_in_region(&states.iter().map(|s| &s.path).collect::<Vec<_>>())?;
        c_star = c_star.min(top);
        history.push(c_star);
        tops.push((history.len() - 1, states[it].path.clone(), top));
        if history.len() > mc.window {
            let old = history[history.len() - 1 - mc.window];
            if (old - c_star).abs() <= mc.stable_tol * c_star.abs().max(1.0) {
                break;
            }
        }
    }
    let (idx, _, values) = top_in_region(&states.iter().map(|s| &s.path).collect::<Vec<_>>())?;
    // The final maximizer first, then earlier maximizers by decreasing action.
    tops.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut seeds = vec![(None, states[idx].path.clone(), values[idx])];
    seeds.extend(tops.into_iter().map(|(r, p, a)| (Some(r), p, a)));
    seeds.truncate(mc.polish_attempts.max(1));
    let mut errors = Vec::new();
    let mut polished = None;
    for (round, seed, a) in &seeds {
        match solve_model(seed, &model, &config.newton) {
            Ok(s) => {
                polished = Some((
                    *round,
                    seed.clone(),
                    *a,
                    s.with_report(c0, Some(&reference.folded), config.report),
                ));
                break;
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    let polish_error = (!errors.is_empty()).then(|| errors.join("; "));
    let (polish_round, candidate, candidate_action, solution) = match polished {
        Some((r, p, a, s)) => (r, p, a, Some(s)),
        None => (None, seeds[0].1.clone(), seeds[0].2, None),
    };
    Ok(MinmaxResult {
        reference,
        solution,
        candidate,
        candidate_action,
        polish_round,
        c_star: history,
        b,
        polish_error,
        advisory,
    })
}

/// Result envelope for a solve or sweep.
pub fn result_envelope(
    solution: &OrbitSolution,
    config: &SolverConfig,
    distances: &[f64],
    paths: &BTreeMap<String, String>,
) -> Result<serde_json::Value> {
    let b = &solution.boundary;
    Ok(json!({
        "family": solution.model.to_json_value()?,
        "config": serde_json::to_value(config)?,
        "action": solution.action,
        "energy": solution.energy,
        "residuals": {
            "el": solution.residual,
            "boundary": b.max,
            "q1_start": b.q1_start,
            "v1_end": b.v1_end,
            "v_start": b.v_start,
            "v_end": b.v_end,
            "fd_velocity": b.fd_max,
            "min_separation": solution.min_separation,
            "iterations": solution.iterations,
        },
        "distances": distances,
        "paths": paths,
        "report": solution.report,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{named_preset, physical_preset};
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn small() -> SolverConfig {
        SolverConfig {
            mesh: MeshSpec::TwoSided {
                m: 600,
                p0: 1.5,
                p1: 1.5,
            },
            ..SolverConfig::default()
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = SolverConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SolverConfig {
            horizon: -1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            mu_schedule: vec![1.0, 0.25, 0.5],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            eps_schedule: vec![1e-3, -1.0],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            seed_gap: 0.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        let fam = named_preset("helium").unwrap();
        assert!(continue_mu(&fam, &SmoothingParams::uniform(1e-3), &[], &ok).is_err());
        assert!(continue_eps(&fam, &[0.0], &ok).is_err());
        assert!(continue_eps(&fam, &[1e-3, 1e-2], &ok).is_err());
    }

    #[test]
    fn single_electron_is_the_brake() {
        let fam = named_preset("kepler-unit").unwrap();
        let sm = SmoothingParams::uniform(1e-3);
        let cfg = small();
        let model = Model::new(&fam, &sm).unwrap();
        let r = brake_reference(&model, &cfg).unwrap();
        let sol = solve_el_bvp(&r.folded.path, &fam, &sm, &cfg).unwrap();
        assert!(h1_distance(&sol.path, &r.folded.path).unwrap() <= 1e-8);
        let run = continue_mu(&fam, &sm, &[1.0, 0.5, 0.25], &cfg).unwrap();
        assert_eq!(run.distances(), vec![0.0; 3]);
        assert!(run.failure.is_none());
    }

    #[test]
    fn helium_seed_converges_and_is_stable() {
        let fam = physical_preset(2, 2.0, 0.0, 1.0).unwrap();
        let model = Model::new(&fam, &SmoothingParams::uniform(1e-3)).unwrap();
        let cfg = small();
        let r = brake_reference(&model, &cfg).unwrap();
        let seed = theta(&SeparationCoords::new(vec![0.5]).unwrap(), &r.folded).unwrap();
        let sol = solve_model(&seed, &model, &cfg.newton).unwrap();
        assert!(sol.residual <= 1e-10);
        assert!(sol.min_separation > 0.0);
        assert!(sol.action <= r.c0);

        let mut rng = StdRng::seed_from_u64(7);
        let mut q = sol.path.values().to_vec();
        for v in q.iter_mut().skip(1) {
            *v += 1e-4 * (rng.random::<f64>() - 0.5);
        }
        let back = solve_model(&sol.path.with_values(q).unwrap(), &model, &cfg.newton).unwrap();
        assert!(h1_distance(&back.path, &sol.path).unwrap() <= 1e-6);
        assert!((back.action - sol.action).abs() <= 1e-9);
    }

    #[test]
    fn mu_sweep_approaches_folded_brake() {
        let fam = named_preset("helium").unwrap();
        let sched: Vec<f64> = (0..=6).map(|k| 2f64.powi(-k)).collect();
        let run = continue_mu(&fam, &SmoothingParams::uniform(1e-3), &sched, &small()).unwrap();
        assert!(run.failure.is_none(), "{:?}", run.failure);
        let d = run.distances();
        assert_eq!(d.len(), sched.len());
        assert!(d.windows(2).skip(2).all(|w| w[1] < w[0]), "{d:?}");
        assert!(d[d.len() - 1] < 0.2 * d[0]);
    }

    #[test]
    fn eps_sweep_keeps_outer_electron_away() {
        let fam = named_preset("helium").unwrap();
        let run = continue_eps(&fam, &[1e-2, 1e-3, 1e-4], &small()).unwrap();
        assert!(run.failure.is_none(), "{:?}", run.failure);
        let floor = |s: &Stage| {
            let p = &s.solution.path;
            let t = p.mesh().nodes();
            (0..t.len())
                .filter(|&k| t[k] >= 0.25)
                .map(|k| p.get(k, 0))
                .fold(f64::INFINITY, f64::min)
        };
        let m: Vec<f64> = run.stages.iter().map(floor).collect();
        assert!(m.iter().all(|v| *v > 0.1));
        assert!((m[2] - m[1]).abs() < 0.05 * m[1], "{m:?}");
    }

    #[test]
    fn envelope_has_expected_keys() {
        let fam = named_preset("kepler-unit").unwrap();
        let sm = SmoothingParams::uniform(1e-3);
        let cfg = small();
        let run = continue_mu(&fam, &sm, &[1.0], &cfg).unwrap();
        let sol = &run.last().unwrap().solution;
        let mut paths = BTreeMap::new();
        paths.insert("orbit".to_string(), "orbit.csv".to_string());
        let v = result_envelope(sol, &cfg, &run.distances(), &paths).unwrap();
        for key in [
            "family",
            "config",
            "action",
            "energy",
            "residuals",
            "distances",
            "paths",
            "report",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["paths"]["orbit"], "orbit.csv");
        let back: SolverConfig = serde_json::from_value(v["config"].clone()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn compensated_step_keeps_low_parts() {
        let (hi, lo) = compensated_step(&[1.0], &[0.0], &[1e-17], 1.0);
        assert_eq!(hi[0], 1.0);
        assert_eq!(lo[0], 1e-17);
        let (hi, lo) = compensated_step(&hi, &lo, &[-1e-17], 1.0);
        assert_eq!((hi[0], lo[0]), (1.0, 0.0));
    }

    #[test]
    fn gap_cap_limits_shrinking_gaps() {
        assert_eq!(gap_cap([(1.0, 1.0)].into_iter()), 1.0);
        assert!((gap_cap([(1.0, -2.0), (0.5, 0.3)].into_iter()) - 0.45).abs() < 1e-15);
    }
}
