//! Segmented Kepler-type problem on `[0, nT]`: the brake curve `eta` with
//! `eta(0) = 0`, free end, and attraction `f_i` on the `i`-th segment; its
//! folding into an `n`-component path on `[0, T]`; and a shooting
//! cross-check.

use std::io::Write;
use std::sync::Arc;

use ode_solvers::{Dop853, OutputType, System, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::BandMatrix;
use crate::potentials::PotentialFamily;
use crate::smoothing::{Model, Profile, SmoothingParams};
use crate::solver::{damped_newton, gap_cap};
use crate::trajectory::{
    collision_element, ejection_exponent, fmt17, Assembly, Level, Mesh, MeshSpec, Path, Quadrature,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrakeConfig {
    pub mesh: MeshSpec,
    pub quadrature: Quadrature,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BrakeConfig {
    fn default() -> Self {
        Self {
            mesh: MeshSpec::graded(2000, 1.5),
            quadrature: Quadrature::Simpson,
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BrakeOrbit {
    n: usize,
    horizon: f64,
    eps1: f64,
    eps2: f64,
    segment_mesh: Arc<Mesh>,
    t: Vec<f64>,
    /// Interval widths, taken from the segment mesh rather than from `t`.
    widths: Vec<f64>,
    eta: Vec<f64>,
    eta_lo: Vec<f64>,
    model: Model,
    /// Minimum of the discrete functional.
    pub c: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl BrakeOrbit {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn eps(&self) -> (f64, f64) {
        (self.eps1, self.eps2)
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn segment_mesh(&self) -> &Arc<Mesh> {
        &self.segment_mesh
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// `eta(nT)`.
    pub fn apex(&self) -> f64 {
        *self.eta.last().unwrap()
    }

    /// Value at the end of segment `s` (1-based), i.e. `eta(sT)`.
    pub fn at_junction(&self, s: usize) -> f64 {
        self.eta[s * self.segment_mesh.intervals()]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "eta"])?;
        for (t, e) in self.t.iter().zip(&self.eta) {
            wr.write_record([fmt17(*t), fmt17(*e)])?;
        }
        wr.flush()?;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn with_eta(&self, eta: Vec<f64>) -> Self {
        let eta_lo = vec![0.0; eta.len()];
        Self {
            eta,
            eta_lo,
            ..self.clone()
        }
    }
}

/// Interval widths of the brake mesh, mirrored like the nodes.
fn brake_widths(seg: &Mesh, n: usize) -> Vec<f64> {
    let m = seg.intervals();
    (0..n)
        .flat_map(|s| {
            (0..m).map(move |k| {
                if s % 2 == 0 {
                    seg.h(k)
                } else {
                    seg.h(m - 1 - k)
                }
            })
        })
        .collect()
}

/// Node times of the brake mesh: the segment mesh on even segments, its
/// mirror image on odd ones, so folding maps nodes onto nodes.
fn brake_nodes(seg: &Mesh, n: usize) -> Vec<f64> {
    let ts = seg.nodes();
    let m = seg.intervals();
    let horizon = seg.horizon();
    let mut t = Vec::with_capacity(n * m + 1);
    t.push(0.0);
    for s in 0..n {
        let base = s as f64 * horizon;
        for k in 1..=m {
            let local = if s % 2 == 0 {
                ts[k]
            } else {
                horizon - ts[m - k]
            };
            t.push(base + local);
        }
    }
    t
}

fn assemble_brake(
    widths: &[f64],
    eta: &[f64],
    lo: &[f64],
    m: usize,
    model: &Model,
    quad: Quadrature,
    level: Level,
) -> Result<Assembly> {
    let len = eta.len();
    let collide = model.first_singular();
    let want_g = level >= Level::Gradient;
    let mut grad = if want_g { vec![0.0; len] } else { Vec::new() };
    let mut hess = (level >= Level::Hessian).then(|| BandMatrix::zeros(len, 1, 1));
    let mut value = 0.0;
    for k in 0..len - 1 {
        let h = widths[k];
        let prof = model.f(k / m);
        if k == 0 && collide {
            let pl = prof
                .base()
                .as_power_law()
                .ok_or_else(|| Error::param("collision element needs a power law"))?;
            let b = eta[1];
            if !(b > 0.0) {
                return Err(Error::NucleusCollision {
                    i: 0,
                    node: 1,
                    pos: b,
                });
            }
            let (v, d, dd) = collision_element(pl.a, pl.p, b, h);
            value += v;
            if want_g {
                grad[1] += d;
            }
            if let Some(hm) = hess.as_mut() {
                hm.add(1, 1, dd);
            }
            continue;
        }
        let dq = (eta[k + 1] - eta[k]) + (lo[k + 1] - lo[k]);
        value += 0.5 * dq * dq / h;
        if want_g {
            grad[k] -= dq / h;
            grad[k + 1] += dq / h;
        }
        if let Some(hm) = hess.as_mut() {
            hm.add(k, k, 1.0 / h);
            hm.add(k + 1, k + 1, 1.0 / h);
            hm.add(k, k + 1, -1.0 / h);
            hm.add(k + 1, k, -1.0 / h);
        }
        for &(x, w) in quad.rule() {
            let y = (1.0 - x) * eta[k] + x * eta[k + 1];
            let node = if x < 0.75 { k } else { k + 1 };
            let (v, d, dd) =
                prof.eval3(y)
                    .map_err(|_| Error::NucleusCollision { i: 0, node, pos: y })?;
            let wh = w * h;
            value += wh * v;
            if want_g {
                grad[k] += wh * (1.0 - x) * d;
                grad[k + 1] += wh * x * d;
            }
            if let Some(hm) = hess.as_mut() {
                let e = wh * dd;
                hm.add(k, k, e * (1.0 - x) * (1.0 - x));
                hm.add(k + 1, k + 1, e * x * x);
                hm.add(k, k + 1, e * x * (1.0 - x));
                hm.add(k + 1, k, e * x * (1.0 - x));
            }
        }
    }
    Ok(Assembly { value, grad, hess })
}

/// Apex of the Kepler brake of duration `span` for `f = a/s`.
fn kepler_apex(a: f64, span: f64) -> f64 {
    (2.0 * (2.0 * a).sqrt() * span / std::f64::consts::PI).powf(2.0 / 3.0)
}

/// Minimizes the segmented functional. `eps1` regularizes `f_1`, `eps2` the
/// others; `0` keeps a potential singular.
pub fn solve_brake(
    family: &PotentialFamily,
    horizon: f64,
    eps1: f64,
    eps2: f64,
    config: &BrakeConfig,
) -> Result<BrakeOrbit> {
    let n = family.n();
    let model = Model::new(family, &SmoothingParams::split(eps1, eps2))?;
    let seg = Arc::new(Mesh::new(&config.mesh, horizon, config.quadrature)?);
    let m = seg.intervals();
    let t = brake_nodes(&seg, n);
    let widths = brake_widths(&seg, n);
    let span = n as f64 * horizon;
    let pl = family.attraction(0).as_power_law().copied();
    let (a, p) = pl.map_or((1.0, 1.0), |p| (p.a, p.p));
    let r = kepler_apex(a, span);
    let beta = ejection_exponent(p);
    let eta0: Vec<f64> = t
        .iter()
        .map(|&x| {
            let u = x / span;
            r * (u * (2.0 - u)).powf(beta)
        })
        .collect();
    let singular = (0..n).any(|i| model.f(i).is_singular());
    let quad = config.quadrature;
    let lo0 = vec![0.0; eta0.len()];
    let out = damped_newton(
        eta0,
        lo0,
        &[0],
        |x, lo, level| assemble_brake(&widths, x, lo, m, &model, quad, level),
        |x, dx| {
            if singular {
                gap_cap(x.iter().zip(dx).skip(1).map(|(a, b)| (*a, *b)))
            } else {
                1.0
            }
        },
        config.tol,
        config.max_iter,
    )?;
    Ok(BrakeOrbit {
        n,
        horizon,
        eps1,
        eps2,
        segment_mesh: seg,
        t,
        widths,
        eta: out.x,
        eta_lo: out.lo,
        model,
        c: out.value,
        residual: out.residual,
        iterations: out.iterations,
    })
}

/// The folded brake: `x_i(t) = eta(t + (i-1)T)` for odd `i`,
/// `eta(iT - t)` for even `i` (1-based).
#[derive(Debug, Clone)]
pub struct FoldedBrake {
    pub path: Path,
    /// `(i, i+1, t)` with 1-based indices: the pair collides at `t`.
    pub collisions: Vec<(usize, usize, f64)>,
}

pub fn fold_brake(orbit: &BrakeOrbit, mesh: &Arc<Mesh>) -> Result<FoldedBrake> {
    let seg = &orbit.segment_mesh;
    if mesh.nodes() != seg.nodes() {
        return Err(Error::Shape(
            "fold target mesh differs from the brake's segment mesh".into(),
        ));
    }
    let n = orbit.n;
    let m = seg.intervals();
    let mut q = vec![0.0; n * (m + 1)];
    let mut lo = vec![0.0; n * (m + 1)];
    for k in 0..=m {
        for i in 0..n {
            // 0-based i: even -> eta(t + iT), odd -> eta((i+1)T - t).
            let idx = if i % 2 == 0 {
                i * m + k
            } else {
                i * m + (m - k)
            };
            q[k * n + i] = orbit.eta[idx];
            lo[k * n + i] = orbit.eta_lo[idx];
        }
    }
    let horizon = orbit.horizon;
    let collisions = (0..n.saturating_sub(1))
        .map(|i| {
            // 0-based pair (i, i+1) shares eta((i+1)T): at t = T when i is even.
            let t = if i % 2 == 0 { horizon } else { 0.0 };
            (i + 1, i + 2, t)
        })
        .collect();
    let path = Path::raw(mesh.clone(), n, q, true).with_low_parts(lo);
    Ok(FoldedBrake { path, collisions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrakeCheck {
    /// `min_k (eta_{k+1} - eta_k)`.
    pub monotonicity_margin: f64,
    pub strictly_increasing: bool,
    /// Largest mismatch of second-order one-sided derivatives at junctions.
    pub junction_mismatch: f64,
    /// Largest nodal residual of the discrete equations (pinned node excluded).
    pub el_residual: f64,
    /// Largest relative spread of `eta'^2/2 - f_i(eta)` within a segment,
    /// away from the first interval.
    pub energy_drift: f64,
    pub eps2_values: Option<(f64, f64)>,
    pub eps2_gap: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrakeCheckOptions {
    pub junction_tol: f64,
    pub residual_tol: f64,
    pub eps2_pair: Option<(f64, f64)>,
    pub eps2_tol: f64,
}

impl Default for BrakeCheckOptions {
    fn default() -> Self {
        Self {
            junction_tol: 1e-3,
            residual_tol: 1e-9,
            eps2_pair: None,
            eps2_tol: 1e-8,
        }
    }
}

/// Three-point derivative at `t[c]` from nodes `c, c+s, c+2s` (`s = +-1`).
pub(crate) fn one_sided(t: &[f64], y: &[f64], c: usize, fwd: bool) -> f64 {
    let (i1, i2) = if fwd { (c + 1, c + 2) } else { (c - 1, c - 2) };
    let (h1, h2) = (t[i1] - t[c], t[i2] - t[c]);
    let (d1, d2) = (y[i1] - y[c], y[i2] - y[c]);
    (d1 * h2 * h2 - d2 * h1 * h1) / (h1 * h2 * (h2 - h1))
}

/// Centered second-order velocity at an interior node of a nonuniform mesh.
pub(crate) fn centered_velocity(t: &[f64], y: &[f64], k: usize) -> f64 {
    let (h1, h2) = (t[k] - t[k - 1], t[k + 1] - t[k]);
    (h1 * h1 * y[k + 1] - h2 * h2 * y[k - 1] + (h2 * h2 - h1 * h1) * y[k]) / (h1 * h2 * (h1 + h2))
}

pub fn verify_brake(
    orbit: &BrakeOrbit,
    family: &PotentialFamily,
    opts: &BrakeCheckOptions,
) -> Result<BrakeCheck> {
    let (t, eta) = (&orbit.t, &orbit.eta);
    let m = orbit.segment_mesh.intervals();
    let diffs: Vec<f64> = eta.windows(2).map(|w| w[1] - w[0]).collect();
    let monotonicity_margin = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let strictly_increasing = diffs.iter().all(|d| *d > 0.0);
    let mut junction_mismatch: f64 = 0.0;
    for s in 1..orbit.n {
        let c = s * m;
        let l = one_sided(t, eta, c, false);
        let r = one_sided(t, eta, c, true);
        junction_mismatch = junction_mismatch.max((l - r).abs());
    }
    let asm = assemble_brake(
        &orbit.widths,
        eta,
        &orbit.eta_lo,
        m,
        &orbit.model,
        orbit.segment_mesh.quadrature(),
        Level::Gradient,
    )?;
    let el_residual = asm.grad.iter().skip(1).fold(0.0f64, |a, g| a.max(g.abs()));
    let mut energy_drift: f64 = 0.0;
    for s in 0..orbit.n {
        let lo = (s * m + 1).max(2);
        let hi = (s + 1) * m - 1;
        let prof = orbit.model.f(s);
        let es: Vec<f64> = (lo..=hi)
            .filter_map(|k| {
                let v = centered_velocity(t, eta, k);
                prof.value(eta[k]).ok().map(|f| 0.5 * v * v - f)
            })
            .collect();
        if es.len() > 1 {
            let mean = es.iter().sum::<f64>() / es.len() as f64;
            let spread = es.iter().fold(0.0f64, |a, e| a.max((e - mean).abs()));
            energy_drift = energy_drift.max(spread / mean.abs().max(1e-300));
        }
    }
    let (eps2_values, eps2_gap) = match opts.eps2_pair {
        Some((e_a, e_b)) => {
            let cfg = BrakeConfig {
                mesh: orbit.segment_mesh.spec().clone(),
                quadrature: orbit.segment_mesh.quadrature(),
                ..BrakeConfig::default()
            };
            let a = solve_brake(family, orbit.horizon, orbit.eps1, e_a, &cfg)?;
            let b = solve_brake(family, orbit.horizon, orbit.eps1, e_b, &cfg)?;
            (Some((e_a, e_b)), Some((a.c - b.c).abs()))
        }
        None => (None, None),
    };
    let pass = monotonicity_margin >= -1e-12
        && strictly_increasing
        && junction_mismatch <= opts.junction_tol
        && el_residual <= opts.residual_tol
        && eps2_gap.is_none_or(|g| g <= opts.eps2_tol);
    Ok(BrakeCheck {
        monotonicity_margin,
        strictly_increasing,
        junction_mismatch,
        el_residual,
        energy_drift,
        eps2_values,
        eps2_gap,
        pass,
    })
}

/// Independent shooting solution: integrate backward from `eta(nT) = R`
/// with zero velocity, then close the first segment by the energy
/// quadrature `t = int d eta / sqrt(2(E + f_1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootingBrake {
    pub apex: f64,
    /// `eta(sT)` for `s = 1..n-1`.
    pub junctions: Vec<f64>,
    pub c: f64,
}

struct Segment<'a> {
    prof: &'a Profile,
    floor: f64,
}

impl System<f64, Vector3<f64>> for Segment<'_> {
    // y = (eta, d eta / ds, accumulated action); s runs backward in time.
    fn system(&self, _s: f64, y: &Vector3<f64>, dy: &mut Vector3<f64>) {
        let (f, d) = match self.prof.eval3(y[0]) {
            Ok((f, d, _)) => (f, d),
            Err(_) => (f64::NAN, f64::NAN),
        };
        dy[0] = y[1];
        dy[1] = d;
        dy[2] = 0.5 * y[1] * y[1] + f;
    }

    fn solout(&mut self, _s: f64, y: &Vector3<f64>, _dy: &Vector3<f64>) -> bool {
        !(y[0] > self.floor)
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(order);
    for i in 0..order {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = order as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

fn panel_quad(
    f: &dyn Fn(f64) -> f64,
    breaks: &[f64],
    per_panel: usize,
    rule: &[(f64, f64)],
) -> f64 {
    let mut s = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let hp = (b - a) / per_panel as f64;
        for j in 0..per_panel {
            let lo = a + j as f64 * hp;
            for &(x, wt) in rule {
                s += 0.5 * hp * wt * f(lo + 0.5 * hp * (x + 1.0));
            }
        }
    }
    s
}

/// Time and action of the first segment, from the origin up to `eta_j` with
/// energy `e`.
fn first_segment(prof: &Profile, eta_j: f64, e: f64, rule: &[(f64, f64)]) -> (f64, f64) {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let speed = |th: f64| {
        let y = eta_j * th.sin().powi(2);
        let f = prof.value(y).unwrap_or(f64::INFINITY);
        ((2.0 * (e + f)).max(0.0).sqrt(), f)
    };
    let jac = |th: f64| 2.0 * eta_j * th.sin() * th.cos();
    let time = |th: f64| {
        let (v, _) = speed(th);
        if v > 0.0 && v.is_finite() {
            jac(th) / v
        } else {
            0.0
        }
    };
    let act = |th: f64| {
        let (v, f) = speed(th);
        if v > 0.0 && v.is_finite() {
            jac(th) * (e + 2.0 * f) / v
        } else {
            0.0
        }
    };
    let mut breaks = vec![0.0];
    if let Profile::Smoothed(sp) = prof {
        if sp.epsilon() < eta_j {
            breaks.push((sp.epsilon() / eta_j).sqrt().asin());
        }
    }
    breaks.push(half_pi);
    (
        panel_quad(&time, &breaks, 24, rule),
        panel_quad(&act, &breaks, 24, rule),
    )
}

/// Integrates segments `n..2` backward from the apex. Returns the state at
/// `t = T`, or `None` if the curve reaches the origin early.
fn shoot_back(model: &Model, horizon: f64, apex: f64) -> Option<(Vec<f64>, f64, f64, f64)> {
    let n = model.n();
    let mut y = Vector3::new(apex, 0.0, 0.0);
    let mut junctions = Vec::new();
    for s in (1..n).rev() {
        let sys = Segment {
            prof: model.f(s),
            floor: 1e-12 * apex,
        };
        let mut stepper = Dop853::new(sys, 0.0, horizon, horizon, y, 1e-13, 1e-15);
        stepper.set_output(OutputType::Sparse);
        stepper.integrate().ok()?;
        let (xs, ys) = stepper.results().get();
        let last = *ys.last()?;
        if !(*xs.last()? >= horizon * (1.0 - 1e-12)) || !(last[0] > 0.0) || !last[0].is_finite() {
            return None;
        }
        y = last;
        junctions.push(y[0]);
    }
    junctions.reverse();
    Some((junctions, y[0], -y[1], y[2]))
}

pub fn shoot_brake(
    family: &PotentialFamily,
    horizon: f64,
    eps1: f64,
    eps2: f64,
) -> Result<ShootingBrake> {
    let model = Model::new(family, &SmoothingParams::split(eps1, eps2))?;
    let n = model.n();
    let rule = gauss_legendre(20);
    // Signed mismatch between the time needed to fall to the origin and nT.
    let mismatch = |apex: f64| -> f64 {
        match shoot_back(&model, horizon, apex) {
            Some((_, eta_j, v_j, _)) => {
                let prof = model.f(0);
                let e = 0.5 * v_j * v_j - prof.value(eta_j).unwrap_or(f64::NAN);
                first_segment(prof, eta_j, e, &rule).0 - horizon
            }
            None => -horizon,
        }
    };
    let a = family.attraction(0).as_power_law().map_or(1.0, |p| p.a);
    let guess = kepler_apex(a, n as f64 * horizon);
    let (mut lo, mut hi) = (0.5 * guess, 2.0 * guess);
    let mut tries = 0;
    while mismatch(lo) > 0.0 {
        lo *= 0.5;
        tries += 1;
        if tries > 60 {
            return Err(Error::param("shooting bracket not found"));
        }
    }
    while mismatch(hi) < 0.0 {
        hi *= 2.0;
        tries += 1;
        if tries > 120 {
            return Err(Error::param("shooting bracket not found"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mismatch(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let apex = 0.5 * (lo + hi);
    let (junctions, eta_j, v_j, tail_action) = shoot_back(&model, horizon, apex)
        .ok_or_else(|| Error::param("shooting failed at the root"))?;
    let prof = model.f(0);
    let e = 0.5 * v_j * v_j - prof.value(eta_j)?;
    let (_, first_action) = first_segment(prof, eta_j, e, &rule);
    Ok(ShootingBrake {
        apex,
        junctions,
        c: first_action + tail_action,
    })
}
