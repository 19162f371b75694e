//! Piecewise-linear paths on a mesh of `[0, T]` and the functionals defined
//! on them: the action, the separation functional `G`, its penalized variant,
//! the shift derivatives, and the H1 geometry.
//!
//! Unknowns are stored node-major: component `i` at node `k` sits at
//! `k * n + i`.

use std::io::{Read, Write};
use std::path::Path as FsPath;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_tridiagonal, BandMatrix};
use crate::smoothing::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    Trapezoid,
    #[default]
    Simpson,
}

impl Quadrature {
    /// Points and weights on the unit interval.
    pub fn rule(self) -> &'static [(f64, f64)] {
        const TRAP: [(f64, f64); 2] = [(0.0, 0.5), (1.0, 0.5)];
        const SIMP: [(f64, f64); 3] = [(0.0, 1.0 / 6.0), (0.5, 4.0 / 6.0), (1.0, 1.0 / 6.0)];
        match self {
            Quadrature::Trapezoid => &TRAP,
            Quadrature::Simpson => &SIMP,
        }
    }
}

/// How mesh nodes are placed on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MeshSpec {
    /// `t_k = T (k/m)^p`.
    Graded {
        m: usize,
        p: f64,
    },
    /// `t = T u^p0 / (u^p0 + (1-u)^p1)`, `u = k/m`: fine at both ends.
    TwoSided {
        m: usize,
        p0: f64,
        p1: f64,
    },
    /// Spacing `min(max(h0, ratio * t), hmax)` from the left, mirrored with
    /// `h_end` from the right when given. Lengths are fractions of `T`.
    Geometric {
        h0: f64,
        ratio: f64,
        hmax: f64,
        #[serde(default)]
        h_end: Option<f64>,
    },
    Explicit,
}

impl MeshSpec {
    pub fn graded(m: usize, p: f64) -> Self {
        MeshSpec::Graded { m, p }
    }

    /// Geometric mesh fine enough near a smoothed collision at radius
    /// `1e-3` that nodal energies agree to about `1e-6`.
    pub fn resolved() -> Self {
        MeshSpec::Geometric {
            h0: 3e-10,
            ratio: 5e-5,
            hmax: 1e-3,
            h_end: Some(1e-5),
        }
    }

    /// Parses `m` or `m:p` (graded), `m:p0:p1` (two-sided),
    /// `geo:h0:ratio:hmax[:h_end]` and `resolved`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad mesh spec '{s}'")))
        };
        match parts[0].trim() {
            "resolved" if parts.len() == 1 => return Ok(Self::resolved()),
            "geo" if parts.len() == 4 || parts.len() == 5 => {
                let h_end = if parts.len() == 5 {
                    Some(num(parts[4])?)
                } else {
                    None
                };
                return Ok(MeshSpec::Geometric {
                    h0: num(parts[1])?,
                    ratio: num(parts[2])?,
                    hmax: num(parts[3])?,
                    h_end,
                });
            }
            _ => {}
        }
        let m = parts[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad mesh size in '{s}'")))?;
        match parts.len() {
            1 => Ok(MeshSpec::Graded { m, p: 1.0 }),
            2 => Ok(MeshSpec::Graded {
                m,
                p: num(parts[1])?,
            }),
            3 => Ok(MeshSpec::TwoSided {
                m,
                p0: num(parts[1])?,
                p1: num(parts[2])?,
            }),
            _ => Err(Error::Config(format!("bad mesh spec '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    t: Vec<f64>,
    quad: Quadrature,
    spec: MeshSpec,
}

impl Mesh {
    pub fn new(spec: &MeshSpec, horizon: f64, quad: Quadrature) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param(format!("horizon must be > 0, got {horizon}")));
        }
        let t = match *spec {
            MeshSpec::Graded { m, p } => {
                if m < 2 || !(p >= 1.0) {
                    return Err(Error::param(format!(
                        "graded mesh needs m >= 2 and p >= 1 (m={m}, p={p})"
                    )));
                }
                let mut t: Vec<f64> = (0..=m)
                    .map(|k| horizon * (k as f64 / m as f64).powf(p))
                    .collect();
                t[m] = horizon;
                t
            }
            MeshSpec::TwoSided { m, p0, p1 } => {
                if m < 2 || !(p0 >= 1.0 && p1 >= 1.0) {
                    return Err(Error::param(
                        "two-sided mesh needs m >= 2 and exponents >= 1",
                    ));
                }
                let mut t: Vec<f64> = (0..=m)
                    .map(|k| {
                        let u = k as f64 / m as f64;
                        let a = u.powf(p0);
                        horizon * a / (a + (1.0 - u).powf(p1))
                    })
                    .collect();
                t[m] = horizon;
                t
            }
            MeshSpec::Geometric {
                h0,
                ratio,
                hmax,
                h_end,
            } => geometric_nodes(horizon, h0, ratio, hmax, h_end)?,
            MeshSpec::Explicit => {
                return Err(Error::param(
                    "explicit meshes are built with Mesh::from_nodes",
                ))
            }
        };
        Self::checked(t, quad, spec.clone())
    }

    pub fn graded(horizon: f64, m: usize, p: f64, quad: Quadrature) -> Result<Self> {
        Self::new(&MeshSpec::graded(m, p), horizon, quad)
    }

    pub fn from_nodes(t: Vec<f64>, quad: Quadrature) -> Result<Self> {
        Self::checked(t, quad, MeshSpec::Explicit)
    }

    fn checked(t: Vec<f64>, quad: Quadrature, spec: MeshSpec) -> Result<Self> {
        if t.len() < 3 {
            return Err(Error::param("mesh needs at least 2 intervals"));
        }
        if t[0] != 0.0 {
            return Err(Error::param("mesh must start at 0"));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("mesh nodes must be strictly increasing"));
        }
        Ok(Self { t, quad, spec })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.t
    }

    pub fn intervals(&self) -> usize {
        self.t.len() - 1
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> f64 {
        self.t[self.t.len() - 1]
    }

    pub fn quadrature(&self) -> Quadrature {
        self.quad
    }

    pub fn spec(&self) -> &MeshSpec {
        &self.spec
    }

    #[inline]
    pub fn h(&self, k: usize) -> f64 {
        self.t[k + 1] - self.t[k]
    }

    pub fn with_quadrature(&self, quad: Quadrature) -> Self {
        Self {
            quad,
            ..self.clone()
        }
    }

    /// Same node layout on `[0, s * T]`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        let t = self.t.iter().map(|x| x * s).collect();
        Self::checked(t, self.quad, self.spec.clone())
    }
}

fn geometric_nodes(
    horizon: f64,
    h0: f64,
    ratio: f64,
    hmax: f64,
    h_end: Option<f64>,
) -> Result<Vec<f64>> {
    if !(h0 > 0.0 && ratio > 0.0 && hmax >= h0 && hmax <= 0.5)
        || h_end.is_some_and(|h| !(h > 0.0 && h <= hmax))
    {
        return Err(Error::param(
            "geometric mesh needs 0 < h0 <= hmax <= 1/2 and ratio > 0",
        ));
    }
    let march = |h: f64, stop: f64| {
        let mut v = vec![0.0];
        while *v.last().unwrap() < stop {
            let x = *v.last().unwrap();
            v.push(x + (ratio * x).max(h).min(hmax));
            if v.len() > 50_000_000 {
                break;
            }
        }
        v
    };
    let unit = match h_end {
        None => {
            let mut v = march(h0, 1.0);
            let last = v.len() - 1;
            // Fold an undersized final interval into its neighbour.
            if v[last] - 1.0 > 0.5 * (v[last] - v[last - 1]) && last >= 2 {
                v.pop();
            }
            let end = *v.last().unwrap();
            v.iter().map(|x| x / end).collect::<Vec<f64>>()
        }
        Some(he) => {
            let left = march(h0, 0.5);
            let right = march(he, 0.5);
            let mut v: Vec<f64> = left.into_iter().filter(|&x| x < 0.5).collect();
            let tail: Vec<f64> = right
                .into_iter()
                .filter(|&x| x < 0.5)
                .map(|x| 1.0 - x)
                .collect();
            v.extend(tail.into_iter().rev());
            v
        }
    };
    let mut t: Vec<f64> = unit.iter().map(|u| u * horizon).collect();
    let last = t.len() - 1;
    t[last] = horizon;
    Ok(t)
}

/// Nodal values of `n` components on a shared mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    mesh: Arc<Mesh>,
    n: usize,
    q: Vec<f64>,
    /// Low-order parts of `q` carried by Newton iterates, so that
    /// differences across tiny intervals keep full relative precision.
    lo: Option<Vec<f64>>,
    pinned: bool,
}

impl Path {
    /// `pinned` asserts `q_1(0) = 0` and strict ordering at every node.
    pub fn new(mesh: Arc<Mesh>, n: usize, q: Vec<f64>, pinned: bool) -> Result<Self> {
        if n == 0 || q.len() != n * mesh.len() {
            return Err(Error::Shape(format!(
                "expected {} values for n={n} on {} nodes, got {}",
                n * mesh.len(),
                mesh.len(),
                q.len()
            )));
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("path values must be finite"));
        }
        let p = Self {
            mesh,
            n,
            q,
            lo: None,
            pinned,
        };
        if pinned {
            if p.q[0] != 0.0 {
                return Err(Error::param(format!("q1(0) must be 0, got {}", p.q[0])));
            }
            if let Some((k, i, sep)) = p.first_disorder() {
                return Err(Error::Collision {
                    i,
                    j: i + 1,
                    node: k,
                    sep,
                });
            }
        }
        Ok(p)
    }

    /// Unchecked constructor for intermediate iterates.
    pub(crate) fn raw(mesh: Arc<Mesh>, n: usize, q: Vec<f64>, pinned: bool) -> Self {
        Self {
            mesh,
            n,
            q,
            lo: None,
            pinned,
        }
    }

    /// Attaches low-order parts (same layout as the values).
    pub(crate) fn with_low_parts(mut self, lo: Vec<f64>) -> Self {
        debug_assert_eq!(lo.len(), self.q.len());
        self.lo = lo.iter().any(|v| *v != 0.0).then_some(lo);
        self
    }

    pub(crate) fn low_parts(&self) -> Vec<f64> {
        self.lo.clone().unwrap_or_else(|| vec![0.0; self.q.len()])
    }

    /// `q_i(t_{k+1}) - q_i(t_k)` including the low-order parts.
    #[inline]
    pub(crate) fn increment(&self, k: usize, i: usize) -> f64 {
        let (a, b) = (k * self.n + i, (k + 1) * self.n + i);
        let d = self.q[b] - self.q[a];
        match &self.lo {
            Some(lo) => d + (lo[b] - lo[a]),
            None => d,
        }
    }

    pub fn from_fn(
        mesh: Arc<Mesh>,
        n: usize,
        pinned: bool,
        f: impl Fn(f64, usize) -> f64,
    ) -> Result<Self> {
        let mut q = Vec::with_capacity(n * mesh.len());
        for &t in mesh.nodes() {
            for i in 0..n {
                q.push(f(t, i));
            }
        }
        Self::new(mesh, n, q, pinned)
    }

    fn first_disorder(&self) -> Option<(usize, usize, f64)> {
        for k in 0..self.mesh.len() {
            for i in 0..self.n.saturating_sub(1) {
                let s = self.get(k, i + 1) - self.get(k, i);
                if !(s > 0.0) {
                    return Some((k, i, s));
                }
            }
        }
        None
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn is_pinned(&self) -> bool {
        self.pinned
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.q[k * self.n + i]
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        (0..self.mesh.len()).map(|k| self.get(k, i)).collect()
    }

    pub fn with_values(&self, q: Vec<f64>) -> Result<Self> {
        Self::new(self.mesh.clone(), self.n, q, self.pinned)
    }

    pub(crate) fn with_values_unchecked(&self, q: Vec<f64>) -> Self {
        Self::raw(self.mesh.clone(), self.n, q, self.pinned)
    }

    pub fn unpinned(&self) -> Self {
        Self {
            pinned: false,
            ..self.clone()
        }
    }

    /// `min_k (q_{i+1} - q_i)(t_k)` for each adjacent pair.
    pub fn min_separations(&self) -> Vec<f64> {
        (0..self.n.saturating_sub(1))
            .map(|i| {
                (0..self.mesh.len())
                    .map(|k| self.get(k, i + 1) - self.get(k, i))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub fn min_separation(&self) -> f64 {
        self.min_separations()
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n).map(|i| format!("q{i}")));
        wr.write_record(&header)?;
        for (k, &t) in self.mesh.nodes().iter().enumerate() {
            let mut row = vec![fmt17(t)];
            row.extend((0..self.n).map(|i| fmt17(self.get(k, i))));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &FsPath) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(r: R, quad: Quadrature, pinned: bool) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let n = header.len().saturating_sub(1);
        if n == 0 || &header[0] != "t" || (1..=n).any(|i| header[i] != *format!("q{i}")) {
            return Err(Error::Malformed(
                "path CSV header must be t,q1,...,qn".into(),
            ));
        }
        let mut t = Vec::new();
        let mut q = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Malformed(format!("bad number '{s}'")))
            };
            t.push(parse(&rec[0])?);
            for i in 1..=n {
                q.push(parse(&rec[i])?);
            }
        }
        let mesh = Arc::new(Mesh::from_nodes(t, quad)?);
        Self::new(mesh, n, q, pinned)
    }

    pub fn load_csv(path: &FsPath, quad: Quadrature, pinned: bool) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, quad, pinned)
    }
}

/// 17 significant digits; round-trips binary64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Nodal gradient and, optionally, its H1 Riesz representative.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRep {
    pub n: usize,
    pub nodal: Vec<f64>,
    pub h1: Option<Vec<f64>>,
}

impl GradientRep {
    /// `max |nodal|` over free unknowns (the pinned `q_1(0)` row excluded).
    pub fn max_abs(&self, pinned: bool) -> f64 {
        self.nodal
            .iter()
            .enumerate()
            .filter(|&(idx, _)| !(pinned && idx == 0))
            .fold(0.0, |m, (_, v)| m.max(v.abs()))
    }

    pub fn pair(&self, v: &[f64]) -> f64 {
        self.nodal.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    /// Attaches the H1 representative on `path`'s mesh.
    pub fn with_riesz(mut self, path: &Path) -> Self {
        self.h1 = Some(riesz(path, &self.nodal));
        self
    }

    /// `sqrt(<nodal, h1>)`, the H1 dual norm.
    pub fn h1_norm(&self) -> f64 {
        self.h1
            .as_ref()
            .map_or(f64::NAN, |r| self.pair(r).max(0.0).sqrt())
    }
}

/// Solves `(K + M) r = nodal` per component, with `r = 0` at the pinned node.
pub fn riesz(path: &Path, nodal: &[f64]) -> Vec<f64> {
    let mesh = path.mesh();
    let (n, len) = (path.n(), mesh.len());
    let mut diag = vec![0.0; len];
    let mut off = vec![0.0; len - 1];
    for k in 0..len - 1 {
        let h = mesh.h(k);
        diag[k] += 1.0 / h + h / 3.0;
        diag[k + 1] += 1.0 / h + h / 3.0;
        off[k] = -1.0 / h + h / 6.0;
    }
    let mut out = vec![0.0; nodal.len()];
    for i in 0..n {
        let mut d = diag.clone();
        let mut o = off.clone();
        let mut rhs: Vec<f64> = (0..len).map(|k| nodal[k * n + i]).collect();
        if i == 0 && path.is_pinned() {
            d[0] = 1.0;
            o[0] = 0.0;
            rhs[0] = 0.0;
        }
        let r = solve_tridiagonal(&d, &o, &rhs);
        for k in 0..len {
            out[k * n + i] = r[k];
        }
    }
    out
}

/// H1 inner product of two nodal fields on `path`'s mesh (exact for the
/// piecewise-linear model).
pub fn h1_inner(mesh: &Mesh, n: usize, u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..mesh.intervals() {
        let h = mesh.h(k);
        for i in 0..n {
            let (ua, ub) = (u[k * n + i], u[(k + 1) * n + i]);
            let (va, vb) = (v[k * n + i], v[(k + 1) * n + i]);
            s += h / 6.0 * (2.0 * ua * va + ua * vb + ub * va + 2.0 * ub * vb)
                + (ub - ua) * (vb - va) / h;
        }
    }
    s
}

pub fn h1_distance(p1: &Path, p2: &Path) -> Result<f64> {
    if p1.n() != p2.n() || p1.mesh().nodes() != p2.mesh().nodes() {
        return Err(Error::Shape(
            "h1_distance needs identical meshes and component counts".into(),
        ));
    }
    let d: Vec<f64> = p1
        .values()
        .iter()
        .zip(p2.values())
        .map(|(a, b)| a - b)
        .collect();
    Ok(h1_inner(p1.mesh(), p1.n(), &d, &d).max(0.0).sqrt())
}

/// Exponent of the ejection profile `q ~ t^beta` for `f = a s^-p`.
pub(crate) fn ejection_exponent(p: f64) -> f64 {
    2.0 / (p + 2.0)
}

/// Kinetic plus attraction contribution of the first interval for a
/// coordinate leaving a singular centre at `t = 0`, using the profile
/// `q = b (t/h)^beta`. Returns value and first two derivatives in `b`.
pub(crate) fn collision_element(a: f64, p: f64, b: f64, h: f64) -> (f64, f64, f64) {
    let beta = ejection_exponent(p);
    let kappa = beta * beta / (2.0 * (2.0 * beta - 1.0));
    let cp = a * h / (1.0 - beta * p);
    let bp = b.powf(-p);
    let v = kappa * b * b / h + cp * bp;
    let d = 2.0 * kappa * b / h - p * cp * bp / b;
    let dd = 2.0 * kappa / h + p * (p + 1.0) * cp * bp / (b * b);
    (v, d, dd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Level {
    Value,
    Gradient,
    Hessian,
}

pub(crate) struct Assembly {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Option<BandMatrix>,
}

/// Whether the first interval of component 1 uses the collision element.
pub(crate) fn uses_collision_element(path: &Path, model: &Model) -> bool {
    path.is_pinned() && model.first_singular() && path.q[0] == 0.0
}

/// Action, gradient and Hessian of the discrete action.
pub(crate) fn assemble_action(path: &Path, model: &Model, level: Level) -> Result<Assembly> {
    let n = path.n;
    if n != model.n() {
        return Err(Error::Shape(format!(
            "path has {n} components, family {}",
            model.n()
        )));
    }
    let mesh = path.mesh();
    let len = mesh.len();
    let q = &path.q;
    let mu = model.mu();
    let collide = uses_collision_element(path, model);
    let first_pl = if collide {
        let b = model.f(0).base();
        Some(
            *b.as_power_law()
                .ok_or_else(|| Error::param("collision element needs a power-law f1"))?,
        )
    } else {
        None
    };
    let want_g = level >= Level::Gradient;
    let want_h = level >= Level::Hessian;
    let mut grad = if want_g {
        vec![0.0; n * len]
    } else {
        Vec::new()
    };
    let mut hess = want_h.then(|| BandMatrix::zeros(n * len, 2 * n - 1, 2 * n - 1));
    let mut value = 0.0;
    let rule = mesh.quadrature().rule();
    let mut qx = vec![0.0; n];

    for k in 0..len - 1 {
        let h = mesh.h(k);
        let (a0, b0) = (k * n, (k + 1) * n);
        for i in 0..n {
            if collide && k == 0 && i == 0 {
                let pl = first_pl.unwrap();
                let b = q[b0];
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
                    grad[b0] += d;
                }
                if let Some(hm) = hess.as_mut() {
                    hm.add(b0, b0, dd);
                }
                continue;
            }
            let dq = path.increment(k, i);
            value += 0.5 * dq * dq / h;
            if want_g {
                grad[a0 + i] -= dq / h;
                grad[b0 + i] += dq / h;
            }
            if let Some(hm) = hess.as_mut() {
                let c = 1.0 / h;
                hm.add(a0 + i, a0 + i, c);
                hm.add(b0 + i, b0 + i, c);
                hm.add(a0 + i, b0 + i, -c);
                hm.add(b0 + i, a0 + i, -c);
            }
        }
        for &(x, w) in rule {
            let wh = w * h;
            let (ca, cb) = (1.0 - x, x);
            let node = if x < 0.75 { k } else { k + 1 };
            for i in 0..n {
                qx[i] = ca * q[a0 + i] + cb * q[b0 + i];
            }
            for i in 0..n {
                if collide && k == 0 && i == 0 {
                    continue;
                }
                let (v, d, dd) = model
                    .f(i)
                    .eval3(qx[i])
                    .map_err(|_| Error::NucleusCollision {
                        i,
                        node,
                        pos: qx[i],
                    })?;
                value += wh * v;
                if want_g {
                    grad[a0 + i] += wh * ca * d;
                    grad[b0 + i] += wh * cb * d;
                }
                if let Some(hm) = hess.as_mut() {
                    let e = wh * dd;
                    hm.add(a0 + i, a0 + i, e * ca * ca);
                    hm.add(b0 + i, b0 + i, e * cb * cb);
                    hm.add(a0 + i, b0 + i, e * ca * cb);
                    hm.add(b0 + i, a0 + i, e * ca * cb);
                }
            }
            for i in 0..n {
                for j in i + 1..n {
                    let s = qx[j] - qx[i];
                    let (v, d, dd) = model.g(i, j).eval3(s).map_err(|_| Error::Collision {
                        i,
                        j,
                        node,
                        sep: s,
                    })?;
                    value -= mu * wh * v;
                    if want_g {
                        // d/dq_j = -mu g', d/dq_i = +mu g'
                        let gj = -mu * wh * d;
                        grad[a0 + j] += ca * gj;
                        grad[b0 + j] += cb * gj;
                        grad[a0 + i] -= ca * gj;
                        grad[b0 + i] -= cb * gj;
                    }
                    if let Some(hm) = hess.as_mut() {
                        let e = -mu * wh * dd;
                        let cs = [ca, cb];
                        let base = [a0, b0];
                        for (r, &cr) in cs.iter().enumerate() {
                            for (c, &cc) in cs.iter().enumerate() {
                                let w2 = e * cr * cc;
                                hm.add(base[r] + j, base[c] + j, w2);
                                hm.add(base[r] + i, base[c] + i, w2);
                                hm.add(base[r] + i, base[c] + j, -w2);
                                hm.add(base[r] + j, base[c] + i, -w2);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Assembly { value, grad, hess })
}

/// The discrete action: exact kinetic energy of the piecewise-linear path
/// plus quadrature of `sum f_i(q_i) - mu sum g_ij(q_j - q_i)`.
pub fn action(path: &Path, model: &Model) -> Result<f64> {
    Ok(assemble_action(path, model, Level::Value)?.value)
}

pub fn grad_action(path: &Path, model: &Model) -> Result<GradientRep> {
    let a = assemble_action(path, model, Level::Gradient)?;
    Ok(GradientRep {
        n: path.n,
        nodal: a.grad,
        h1: None,
    })
}

/// Kinetic part `sum_i int |q_i'|^2 / 2` of the discrete action.
pub fn kinetic(path: &Path, model: &Model) -> f64 {
    let n = path.n;
    let mesh = path.mesh();
    let collide = uses_collision_element(path, model);
    let mut s = 0.0;
    for k in 0..mesh.intervals() {
        let h = mesh.h(k);
        for i in 0..n {
            if collide && k == 0 && i == 0 {
                let p = model.f(0).base().as_power_law().map_or(1.0, |pl| pl.p);
                let beta = ejection_exponent(p);
                let b = path.get(1, 0);
                s += beta * beta / (2.0 * (2.0 * beta - 1.0)) * b * b / h;
            } else {
                let dq = path.increment(k, i);
                s += 0.5 * dq * dq / h;
            }
        }
    }
    s
}

/// `G^beta = sum_i int (d_i^2 + 1/d_i^2) + beta int sum g_ij`, with
/// `d_i = q_{i+1} - q_i` and repulsions not scaled by `mu`.
pub fn g_functional(path: &Path, beta: f64, model: &Model) -> Result<f64> {
    Ok(assemble_g(path, beta, model, false)?.0)
}

pub fn grad_g(path: &Path, beta: f64, model: &Model) -> Result<GradientRep> {
    let (_, g) = assemble_g(path, beta, model, true)?;
    Ok(GradientRep {
        n: path.n,
        nodal: g,
        h1: None,
    })
}

fn assemble_g(path: &Path, beta: f64, model: &Model, want_g: bool) -> Result<(f64, Vec<f64>)> {
    let n = path.n;
    let mesh = path.mesh();
    let q = &path.q;
    let mut grad = if want_g {
        vec![0.0; q.len()]
    } else {
        Vec::new()
    };
    let mut value = 0.0;
    let rule = mesh.quadrature().rule();
    for k in 0..mesh.intervals() {
        let h = mesh.h(k);
        let (a0, b0) = (k * n, (k + 1) * n);
        for &(x, w) in rule {
            let (ca, cb) = (1.0 - x, x);
            let wh = w * h;
            let node = if x < 0.75 { k } else { k + 1 };
            let at = |i: usize| ca * q[a0 + i] + cb * q[b0 + i];
            for i in 0..n.saturating_sub(1) {
                let d = at(i + 1) - at(i);
                if !(d > 0.0) {
                    return Err(Error::Collision {
                        i,
                        j: i + 1,
                        node,
                        sep: d,
                    });
                }
                value += wh * (d * d + 1.0 / (d * d));
                if want_g {
                    let dd = wh * (2.0 * d - 2.0 / (d * d * d));
                    grad[a0 + i + 1] += ca * dd;
                    grad[b0 + i + 1] += cb * dd;
                    grad[a0 + i] -= ca * dd;
                    grad[b0 + i] -= cb * dd;
                }
            }
            if beta != 0.0 {
                for i in 0..n {
                    for j in i + 1..n {
                        let s = at(j) - at(i);
                        let (v, d, _) = model.g(i, j).eval3(s).map_err(|_| Error::Collision {
                            i,
                            j,
                            node,
                            sep: s,
                        })?;
                        value += beta * wh * v;
                        if want_g {
                            let e = beta * wh * d;
                            grad[a0 + j] += ca * e;
                            grad[b0 + j] += cb * e;
                            grad[a0 + i] -= ca * e;
                            grad[b0 + i] -= cb * e;
                        }
                    }
                }
            }
        }
    }
    Ok((value, grad))
}

/// `G + lambda (c - A)`.
pub fn g_lambda_c(path: &Path, lambda: f64, c: f64, beta: f64, model: &Model) -> Result<f64> {
    let g = g_functional(path, beta, model)?;
    if lambda == 0.0 {
        return Ok(g);
    }
    Ok(g + lambda * (c - action(path, model)?))
}

pub fn grad_g_lambda_c(path: &Path, lambda: f64, beta: f64, model: &Model) -> Result<GradientRep> {
    let mut g = grad_g(path, beta, model)?;
    if lambda != 0.0 {
        let a = grad_action(path, model)?;
        for (x, y) in g.nodal.iter_mut().zip(&a.nodal) {
            *x -= lambda * y;
        }
    }
    Ok(g)
}

/// `<grad A(q), w_j>` where `w_j` shifts electrons `j+1..n` (1-based `j`)
/// by one unit: quadrature of `sum_{i>j} (f_i'(q_i) - mu sum_{k<=j} g'(q_i - q_k))`.
pub fn directional_derivative(path: &Path, model: &Model, j: usize) -> Result<f64> {
    let n = path.n;
    if j == 0 || j >= n {
        return Err(Error::param(format!(
            "shift index must lie in 1..={}, got {j}",
            n.saturating_sub(1)
        )));
    }
    let mesh = path.mesh();
    let mu = model.mu();
    let mut s = 0.0;
    for k in 0..mesh.intervals() {
        let h = mesh.h(k);
        for &(x, w) in mesh.quadrature().rule() {
            let node = if x < 0.75 { k } else { k + 1 };
            let at = |i: usize| (1.0 - x) * path.get(k, i) + x * path.get(k + 1, i);
            for i in j..n {
                let qi = at(i);
                let mut v = model
                    .f(i)
                    .derivative(qi)
                    .map_err(|_| Error::NucleusCollision { i, node, pos: qi })?;
                for kk in 0..j {
                    let sep = qi - at(kk);
                    v -= mu
                        * model
                            .g(kk, i)
                            .derivative(sep)
                            .map_err(|_| Error::Collision {
                                i: kk,
                                j: i,
                                node,
                                sep,
                            })?;
                }
                s += w * h * v;
            }
        }
    }
    Ok(s)
}
