//! Separation coordinates, the shift map `theta` and its log-gap inverse
//! `phi`, disk seeding, and the cutoff deformation flow.

use std::io::Write;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::brake::FoldedBrake;
use crate::error::{Error, Result};
use crate::smoothing::Model;
use crate::trajectory::{action, fmt17, g_lambda_c, grad_action, grad_g_lambda_c, Path};

/// Cumulative offsets `0 < s_1 < ... < s_{n-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationCoords {
    s: Vec<f64>,
}

impl SeparationCoords {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        let mut prev = 0.0;
        for (i, &x) in s.iter().enumerate() {
            if !(x > prev) || !x.is_finite() {
                return Err(Error::param(format!(
                    "offsets must be positive and strictly increasing (s_{} = {x})",
                    i + 1
                )));
            }
            prev = x;
        }
        Ok(Self { s })
    }

    pub fn from_gaps(v: &[f64]) -> Result<Self> {
        let mut acc = 0.0;
        let s = v
            .iter()
            .map(|&g| {
                acc += g;
                acc
            })
            .collect();
        Self::new(s)
    }

    pub fn offsets(&self) -> &[f64] {
        &self.s
    }

    pub fn gaps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.s
            .iter()
            .map(|&x| {
                let v = x - prev;
                prev = x;
                v
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }
}

/// Shifts component `i` of the folded brake by `s_{i-1}` (first component fixed).
pub fn theta(coords: &SeparationCoords, folded: &FoldedBrake) -> Result<Path> {
    let base = &folded.path;
    let n = base.n();
    if coords.dim() + 1 != n {
        return Err(Error::Shape(format!(
            "{} offsets for {n} components",
            coords.dim()
        )));
    }
    let mut q = base.values().to_vec();
    for row in q.chunks_mut(n) {
        for (i, s) in coords.offsets().iter().enumerate() {
            row[i + 1] += s;
        }
    }
    Path::new(base.mesh_arc().clone(), n, q, base.is_pinned())
}

/// Logs of the nodewise minimum separations.
pub fn phi(path: &Path) -> Result<Vec<f64>> {
    path.min_separations()
        .into_iter()
        .map(|d| {
            if d > 0.0 {
                Ok(d.ln())
            } else {
                Err(Error::Domain {
                    what: "phi".into(),
                    arg: d,
                })
            }
        })
        .collect()
}

/// Closed-form inverse of `phi . theta`: gaps `exp(y_i)`, then prefix sums.
pub fn phi_theta_inverse(y: &[f64]) -> Result<SeparationCoords> {
    let v: Vec<f64> = y.iter().map(|x| x.exp()).collect();
    SeparationCoords::from_gaps(&v)
}

/// Grid resolution for sampling the closed unit ball in `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplePlan {
    /// Points per axis of the underlying cube grid (at least 2).
    pub per_axis: usize,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self { per_axis: 9 }
    }
}

impl SamplePlan {
    /// Interior cube-grid points with `|x| < 1`, then cube-surface points
    /// projected to the sphere (flagged as boundary).
    pub fn points(&self, d: usize) -> Vec<(Vec<f64>, bool)> {
        let k = self.per_axis.max(2);
        let axis: Vec<f64> = (0..k)
            .map(|j| -1.0 + 2.0 * j as f64 / (k - 1) as f64)
            .collect();
        let mut out = Vec::new();
        if d == 0 {
            out.push((Vec::new(), false));
            return out;
        }
        let total = k.pow(d as u32);
        let mut boundary = Vec::new();
        for idx in 0..total {
            let mut r = idx;
            let x: Vec<f64> = (0..d)
                .map(|_| {
                    let c = axis[r % k];
                    r /= k;
                    c
                })
                .collect();
            let norm = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            let on_cube = x.iter().any(|c| c.abs() == 1.0);
            if norm < 1.0 - 1e-12 {
                out.push((x.clone(), false));
            }
            if on_cube {
                boundary.push((x.iter().map(|c| c / norm).collect(), true));
            }
        }
        out.extend(boundary);
        out
    }
}

#[derive(Debug, Clone)]
pub struct DiskSample {
    pub x: Vec<f64>,
    pub boundary: bool,
    pub path: Path,
}

/// `gamma_0(x) = theta((phi . theta)^{-1}(r x))` on a grid of the unit ball.
pub fn disk_seed(r: f64, folded: &FoldedBrake, plan: &SamplePlan) -> Result<Vec<DiskSample>> {
    if !(r > 0.0) {
        return Err(Error::param(format!(
            "linking radius must be positive, got {r}"
        )));
    }
    let d = folded.path.n() - 1;
    plan.points(d)
        .into_iter()
        .map(|(x, boundary)| {
            let y: Vec<f64> = x.iter().map(|c| r * c).collect();
            let path = theta(&phi_theta_inverse(&y)?, folded)?;
            Ok(DiskSample { x, boundary, path })
        })
        .collect()
}

/// Parameters of `G_{lambda,c} = G^beta + lambda (c - A)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GParams {
    pub beta: f64,
    pub lambda: f64,
    pub c: f64,
}

impl GParams {
    pub fn value(&self, path: &Path, model: &Model) -> Result<f64> {
        g_lambda_c(path, self.lambda, self.c, self.beta, model)
    }
}

/// Smallest `G_{lambda,c}` over the boundary samples.
pub fn boundary_min_g(samples: &[DiskSample], model: &Model, g: &GParams) -> Result<f64> {
    let mut m = f64::INFINITY;
    for s in samples.iter().filter(|s| s.boundary) {
        m = m.min(g.value(&s.path, model)?);
    }
    Ok(m)
}

/// Disk seed whose boundary lies in `{G > b}`.
pub fn linked_disk(
    r: f64,
    folded: &FoldedBrake,
    plan: &SamplePlan,
    model: &Model,
    g: &GParams,
    b: f64,
) -> Result<Vec<DiskSample>> {
    let samples = disk_seed(r, folded, plan)?;
    let min_g = boundary_min_g(&samples, model, g)?;
    if !(min_g > b) {
        return Err(Error::Seeding {
            min_boundary_g: min_g,
            b,
        });
    }
    Ok(samples)
}

/// C1 monotone cutoff: 1 on `(-inf, eps/2]`, 0 on `[eps, inf)`, cubic between.
pub fn cutoff(t: f64, eps: f64) -> f64 {
    if t <= 0.5 * eps {
        1.0
    } else if t >= eps {
        0.0
    } else {
        let u = (t - 0.5 * eps) / (0.5 * eps);
        1.0 - u * u * (3.0 - 2.0 * u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub c_star: f64,
    pub b: f64,
    /// Cutoff width.
    pub eps: f64,
    pub g: GParams,
    /// Below this H1 norm of `grad A` the field is switched off.
    pub grad_floor: f64,
}

#[derive(Debug, Clone)]
pub struct FieldEval {
    /// Tangent vector in nodal coordinates.
    pub z: Vec<f64>,
    pub action: f64,
    pub g_value: f64,
    pub grad_a_norm: f64,
    pub grad_g_norm: f64,
    /// `<grad A, Z>` and `<grad G, Z>`.
    pub d_action: f64,
    pub d_g: f64,
    pub near_critical: bool,
}

pub fn deformation_field(path: &Path, model: &Model, p: &FlowParams) -> Result<FieldEval> {
    let a = action(path, model)?;
    let gv = p.g.value(path, model)?;
    let len = path.values().len();
    let w = cutoff((a - p.c_star).abs(), p.eps) * cutoff(gv - p.b, p.eps);
    let mut out = FieldEval {
        z: vec![0.0; len],
        action: a,
        g_value: gv,
        grad_a_norm: f64::NAN,
        grad_g_norm: f64::NAN,
        d_action: 0.0,
        d_g: 0.0,
        near_critical: false,
    };
    if w == 0.0 {
        return Ok(out);
    }
    let ga = grad_action(path, model)?.with_riesz(path);
    let gg = grad_g_lambda_c(path, p.g.lambda, p.g.beta, model)?.with_riesz(path);
    let (na, ng) = (ga.h1_norm(), gg.h1_norm());
    out.grad_a_norm = na;
    out.grad_g_norm = ng;
    if !(na >= p.grad_floor) {
        out.near_critical = true;
        return Ok(out);
    }
    let wg = if ng > 0.0 {
        cutoff((gv - p.b).abs(), p.eps) / ng
    } else {
        0.0
    };
    let (ra, rg) = (ga.h1.as_ref().unwrap(), gg.h1.as_ref().unwrap());
    for k in 0..len {
        out.z[k] = w * (-ra[k] / na + wg * rg[k]);
    }
    out.d_action = ga.pair(&out.z);
    out.d_g = gg.pair(&out.z);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub step: usize,
    pub action: f64,
    pub g_value: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowStop {
    Running,
    StepLimit,
    SmallField,
    NearCritical,
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub path: Path,
    pub params: FlowParams,
    pub dt: f64,
    pub history: Vec<FlowRecord>,
    pub stop: FlowStop,
}

impl FlowState {
    pub fn new(path: Path, params: FlowParams, dt: f64) -> Self {
        Self {
            path,
            params,
            dt,
            history: Vec::new(),
            stop: FlowStop::Running,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "action", "g_value", "grad_norm"])?;
        for r in &self.history {
            wr.write_record([
                r.step.to_string(),
                fmt17(r.action),
                fmt17(r.g_value),
                fmt17(r.grad_norm),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepControl {
    pub dt_max: f64,
    pub dt_min: f64,
    /// Fraction of the minimum separation a step may consume.
    pub sep_fraction: f64,
    /// Stop when `max |Z|` falls below this.
    pub z_tol: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            dt_max: 0.05,
            dt_min: 1e-14,
            sep_fraction: 0.25,
            z_tol: 1e-12,
        }
    }
}

/// Smallest separation that must stay positive: adjacent gaps, plus the
/// first component off the pinned node when `f_1` is singular.
fn barrier_margin(path: &Path, model: &Model) -> f64 {
    let mut m = path.min_separation();
    if model.first_singular() {
        let n = path.n();
        for k in 1..path.mesh().len() {
            m = m.min(path.values()[k * n]);
        }
    }
    m
}

/// Explicit Euler along `Z` with backtracking so that every accepted step
/// has `dA <= 0`, and `dG >= 0` inside the band `|G - b| <= eps/2`.
pub fn flow(state: &mut FlowState, model: &Model, steps: usize, ctl: &StepControl) -> Result<()> {
    let p = state.params;
    let mut field = deformation_field(&state.path, model, &p)?;
    if state.history.is_empty() {
        state.history.push(FlowRecord {
            step: 0,
            action: field.action,
            g_value: field.g_value,
            grad_norm: field.grad_a_norm,
        });
    }
    state.stop = FlowStop::Running;
    for _ in 0..steps {
        let zmax = field.z.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if field.near_critical {
            state.stop = FlowStop::NearCritical;
            return Ok(());
        }
        if zmax < ctl.z_tol {
            state.stop = FlowStop::SmallField;
            return Ok(());
        }
        let margin = barrier_margin(&state.path, model);
        let mut dt = state
            .dt
            .min(ctl.dt_max)
            .min(ctl.sep_fraction * margin / zmax);
        let in_band = (field.g_value - p.b).abs() <= 0.5 * p.eps;
        let step = state.history.last().map_or(0, |r| r.step) + 1;
        loop {
            if dt < ctl.dt_min {
                return Err(Error::Flow { step, dt });
            }
            let q: Vec<f64> = state
                .path
                .values()
                .iter()
                .zip(&field.z)
                .map(|(a, z)| a + dt * z)
                .collect();
            if let Ok(trial) = state.path.with_values(q) {
                if let (Ok(a), Ok(g)) = (action(&trial, model), p.g.value(&trial, model)) {
                    if a - field.action <= 0.0 && (!in_band || g - field.g_value >= 0.0) {
                        state.path = trial;
                        break;
                    }
                }
            }
            dt *= 0.5;
        }
        // Let the step grow back after a backtrack.
        state.dt = (2.0 * dt).min(ctl.dt_max);
        field = deformation_field(&state.path, model, &p)?;
        state.history.push(FlowRecord {
            step,
            action: field.action,
            g_value: field.g_value,
            grad_norm: field.grad_a_norm,
        });
    }
    state.stop = FlowStop::StepLimit;
    Ok(())
}

/// Flows independent states on `jobs` worker threads.
pub fn flow_all(
    states: &mut [FlowState],
    model: &Model,
    steps: usize,
    ctl: &StepControl,
    jobs: usize,
) -> Vec<Result<()>> {
    let jobs = jobs.max(1).min(states.len().max(1));
    let results: Vec<Mutex<Option<Result<()>>>> = states.iter().map(|_| Mutex::new(None)).collect();
    let queue = Mutex::new(states.iter_mut().enumerate());
    std::thread::scope(|sc| {
        for _ in 0..jobs {
            sc.spawn(|| loop {
                let next = queue.lock().unwrap().next();
                let Some((idx, st)) = next else { break };
                let r = flow(st, model, steps, ctl);
                *results[idx].lock().unwrap() = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().unwrap_or(Ok(())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brake::{fold_brake, solve_brake, BrakeConfig};
    use crate::potentials::physical_preset;
    use crate::smoothing::SmoothingParams;
    use crate::trajectory::MeshSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn folded(n: usize, z: f64, eps: f64, m: usize) -> (FoldedBrake, f64, Model) {
        let fam = physical_preset(n, z, 0.0, 1.0).unwrap();
        let cfg = BrakeConfig {
            mesh: MeshSpec::TwoSided {
                m,
                p0: 1.5,
                p1: 1.5,
            },
            ..BrakeConfig::default()
        };
        let orbit = solve_brake(&fam, 1.0, eps, eps, &cfg).unwrap();
        let fb = fold_brake(&orbit, orbit.segment_mesh()).unwrap();
        let model = Model::new(&fam, &SmoothingParams::uniform(eps)).unwrap();
        (fb, orbit.c, model)
    }

    #[test]
    fn theta_examples() {
        let (fb, _, _) = folded(2, 2.0, 1e-3, 200);
        let p = theta(&SeparationCoords::new(vec![1.0]).unwrap(), &fb).unwrap();
        assert!((p.min_separation() - 1.0).abs() < 1e-12);
        let (fb3, _, _) = folded(3, 3.0, 1e-3, 200);
        let p3 = theta(&SeparationCoords::new(vec![1.0, 3.0]).unwrap(), &fb3).unwrap();
        let seps = p3.min_separations();
        assert!((seps[0] - 1.0).abs() < 1e-12 && (seps[1] - 2.0).abs() < 1e-12);
        let y = phi(&p3).unwrap();
        assert!(y[0].abs() < 1e-12 && (y[1] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn phi_of_constant_pair() {
        let mesh = crate::trajectory::tests::uniform_mesh(1.0, 10, Default::default());
        let p = Path::from_fn(mesh, 2, false, |_, i| i as f64 * std::f64::consts::E).unwrap();
        assert!((phi(&p).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gap_identity_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..=5 {
            let (fb, _, _) = folded(n, n as f64, 1e-3, 100);
            for _ in 0..5 {
                let v: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.05..5.0)).collect();
                let p = theta(&SeparationCoords::from_gaps(&v).unwrap(), &fb).unwrap();
                let y = phi(&p).unwrap();
                for (a, b) in y.iter().zip(&v) {
                    assert!((a - b.ln()).abs() < 1e-10);
                }
                let back = phi(&theta(&phi_theta_inverse(&y).unwrap(), &fb).unwrap()).unwrap();
                for (a, b) in back.iter().zip(&y) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn disk_center_and_action_bound() {
        let (fb, c0, model) = folded(2, 2.0, 1e-3, 400);
        let samples = disk_seed(2.0, &fb, &SamplePlan { per_axis: 7 }).unwrap();
        let center = samples
            .iter()
            .find(|s| s.x.iter().all(|c| c.abs() < 1e-15))
            .unwrap();
        assert!((center.path.min_separation() - 1.0).abs() < 1e-12);
        assert_eq!(samples.iter().filter(|s| s.boundary).count(), 2);
        for s in &samples {
            assert!(action(&s.path, &model).unwrap() <= c0 + 1e-9);
        }
    }

    #[test]
    fn sample_plan_covers_ball() {
        let pts = SamplePlan { per_axis: 5 }.points(2);
        assert!(pts.iter().all(|(x, b)| {
            let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            if *b {
                (r - 1.0).abs() < 1e-12
            } else {
                r < 1.0
            }
        }));
        assert_eq!(pts.iter().filter(|(_, b)| *b).count(), 16);
    }

    #[test]
    fn cutoff_plateaus() {
        assert_eq!(cutoff(0.05, 0.1), 1.0);
        assert_eq!(cutoff(-3.0, 0.1), 1.0);
        assert_eq!(cutoff(0.1, 0.1), 0.0);
        assert!((cutoff(0.075, 0.1) - 0.5).abs() < 1e-15);
        let mut prev = 1.0;
        for k in 0..=100 {
            let v = cutoff(0.05 + 0.0005 * k as f64, 0.1);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn field_vanishes_outside_cutoffs() {
        let (fb, c0, model) = folded(2, 2.0, 1e-3, 200);
        let p = theta(&SeparationCoords::new(vec![0.5]).unwrap(), &fb).unwrap();
        let a = action(&p, &model).unwrap();
        let g = GParams {
            beta: 1.0,
            lambda: 1.0,
            c: c0,
        };
        let gv = g.value(&p, &model).unwrap();
        let far = FlowParams {
            c_star: a + 1.0,
            b: gv + 10.0,
            eps: 0.1,
            g,
            grad_floor: 1e-12,
        };
        let f = deformation_field(&p, &model, &far).unwrap();
        assert!(f.z.iter().all(|v| *v == 0.0));
        let low_b = FlowParams {
            c_star: a,
            b: gv - 1.0,
            ..far
        };
        assert!(deformation_field(&p, &model, &low_b)
            .unwrap()
            .z
            .iter()
            .all(|v| *v == 0.0));
        let mut st = FlowState::new(p.clone(), far, 0.01);
        flow(&mut st, &model, 5, &StepControl::default()).unwrap();
        assert_eq!(st.path.values(), p.values());
        assert_eq!(st.stop, FlowStop::SmallField);
    }

    #[test]
    fn field_rate_with_orthogonal_gradients() {
        let (fb, c0, model) = folded(2, 2.0, 1e-3, 200);
        let p = theta(&SeparationCoords::new(vec![0.5]).unwrap(), &fb).unwrap();
        let a = action(&p, &model).unwrap();
        let g = GParams {
            beta: 1.0,
            lambda: 0.0,
            c: c0,
        };
        let gv = g.value(&p, &model).unwrap();
        // G just above b + eps/2: the grad G term is switched off.
        let par = FlowParams {
            c_star: a,
            b: gv - 0.06,
            eps: 0.1,
            g,
            grad_floor: 1e-12,
        };
        let f = deformation_field(&p, &model, &par).unwrap();
        assert!(f.d_action < 0.0 && f.d_g.is_finite());
        // Build Z with an H1-orthogonal second direction and check the rate.
        let ga = grad_action(&p, &model).unwrap().with_riesz(&p);
        let gg = grad_g_lambda_c(&p, 0.0, 1.0, &model)
            .unwrap()
            .with_riesz(&p);
        let (ra, rg) = (ga.h1.clone().unwrap(), gg.h1.clone().unwrap());
        let na2 = ga.pair(&ra);
        let coef = ga.pair(&rg) / na2;
        let perp: Vec<f64> = rg.iter().zip(&ra).map(|(x, y)| x - coef * y).collect();
        let np = crate::trajectory::h1_inner(p.mesh(), 2, &perp, &perp).sqrt();
        let na = na2.sqrt();
        let z: Vec<f64> = ra
            .iter()
            .zip(&perp)
            .map(|(x, y)| -x / na + y / np)
            .collect();
        assert!((ga.pair(&z) + na).abs() <= 1e-8 * na.max(1.0));
    }

    #[test]
    fn flow_signs_hold() {
        let (fb, c0, model) = folded(2, 2.0, 1e-3, 300);
        let g = GParams {
            beta: 1.0,
            lambda: 1.0,
            c: c0,
        };
        let p = theta(&SeparationCoords::new(vec![0.8]).unwrap(), &fb).unwrap();
        let a = action(&p, &model).unwrap();
        let gv = g.value(&p, &model).unwrap();
        let par = FlowParams {
            c_star: a,
            b: gv,
            eps: 1.0,
            g,
            grad_floor: 1e-12,
        };
        let mut st = FlowState::new(p, par, 0.01);
        flow(&mut st, &model, 20, &StepControl::default()).unwrap();
        assert!(st.history.len() > 1);
        for w in st.history.windows(2) {
            assert!(w[1].action - w[0].action <= 1e-10);
            if (w[0].g_value - par.b).abs() <= 0.5 * par.eps {
                assert!(w[1].g_value - w[0].g_value >= -1e-10);
            }
        }
        let mut buf = Vec::new();
        st.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("step,action,g_value,grad_norm\n"));
    }

    #[test]
    fn pool_matches_serial() {
        let (fb, c0, model) = folded(2, 2.0, 1e-3, 100);
        let g = GParams {
            beta: 1.0,
            lambda: 1.0,
            c: c0,
        };
        let mk = |s: f64| {
            let p = theta(&SeparationCoords::new(vec![s]).unwrap(), &fb).unwrap();
            let a = action(&p, &model).unwrap();
            let par = FlowParams {
                c_star: a,
                b: g.value(&p, &model).unwrap(),
                eps: 1.0,
                g,
                grad_floor: 1e-12,
            };
            FlowState::new(p, par, 0.01)
        };
        let mut a: Vec<FlowState> = [0.3, 0.6, 0.9].iter().map(|&s| mk(s)).collect();
        let mut b = a.clone();
        for st in a.iter_mut() {
            flow(st, &model, 5, &StepControl::default()).unwrap();
        }
        for r in flow_all(&mut b, &model, 5, &StepControl::default(), 3) {
            r.unwrap();
        }
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.path.values(), y.path.values());
        }
    }
}
