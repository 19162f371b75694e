//! Attraction and repulsion potentials, the interaction family, and the
//! hypothesis checker.
//!
//! A family carries `n` attractions `f_i` and repulsions `g_ij` for
//! `i < j`. In the action they enter as `f_i(q_i) - mu * g_ij(q_j - q_i)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a * s^(-p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub a: f64,
    pub p: f64,
}

impl PowerLaw {
    pub fn new(a: f64, p: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::param(format!(
                "power-law coefficient must be > 0, got {a}"
            )));
        }
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::param(format!(
                "power-law exponent must be > 0, got {p}"
            )));
        }
        Ok(Self { a, p })
    }

    #[inline]
    pub fn value(&self, s: f64) -> f64 {
        self.a * s.powf(-self.p)
    }

    #[inline]
    pub fn d1(&self, s: f64) -> f64 {
        -self.p * self.a * s.powf(-self.p - 1.0)
    }

    #[inline]
    pub fn d2(&self, s: f64) -> f64 {
        self.p * (self.p + 1.0) * self.a * s.powf(-self.p - 2.0)
    }

    /// Value and first two derivatives with one `powf`.
    #[inline]
    pub fn eval3(&self, s: f64) -> (f64, f64, f64) {
        let r = 1.0 / s;
        let v = if self.p == 1.0 {
            self.a * r
        } else {
            self.a * s.powf(-self.p)
        };
        (v, -self.p * v * r, self.p * (self.p + 1.0) * v * r * r)
    }
}

/// Monotone cubic Hermite interpolant of sampled values (Fritsch-Carlson
/// slopes). Used only to carry modified potentials as data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    s: Vec<f64>,
    v: Vec<f64>,
    m: Vec<f64>,
}

impl Tabulated {
    pub fn new(s: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if s.len() < 2 || s.len() != v.len() {
            return Err(Error::param(
                "tabulated potential needs >= 2 matching samples",
            ));
        }
        if s.windows(2).any(|w| !(w[1] > w[0])) || s[0] <= 0.0 {
            return Err(Error::param(
                "tabulated abscissae must be positive and increasing",
            ));
        }
        let k = s.len();
        let delta: Vec<f64> = (0..k - 1)
            .map(|i| (v[i + 1] - v[i]) / (s[i + 1] - s[i]))
            .collect();
        let mut m = vec![0.0; k];
        m[0] = delta[0];
        m[k - 1] = delta[k - 2];
        for i in 1..k - 1 {
            m[i] = if delta[i - 1] * delta[i] <= 0.0 {
                0.0
            } else {
                let (h0, h1) = (s[i] - s[i - 1], s[i + 1] - s[i]);
                let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
                (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i])
            };
        }
        Ok(Self { s, v, m })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.s[0], self.s[self.s.len() - 1])
    }

    pub fn eval3(&self, x: f64) -> Option<(f64, f64, f64)> {
        let (lo, hi) = self.range();
        if !(x >= lo && x <= hi) {
            return None;
        }
        let i = match self.s.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(self.s.len() - 2),
            Err(i) => i - 1,
        };
        let h = self.s[i + 1] - self.s[i];
        let t = (x - self.s[i]) / h;
        let (y0, y1, m0, m1) = (self.v[i], self.v[i + 1], self.m[i] * h, self.m[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let val = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * m1;
        let d = (6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * m1;
        let dd = (12.0 * t - 6.0) * y0
            + (6.0 * t - 4.0) * m0
            + (-12.0 * t + 6.0) * y1
            + (6.0 * t - 2.0) * m1;
        Some((val, d / h, dd / (h * h)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialSpec {
    PowerLaw(PowerLaw),
    Tabulated(Tabulated),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Value,
    FirstDerivative,
}

impl PotentialSpec {
    pub fn power_law(a: f64, p: f64) -> Result<Self> {
        PowerLaw::new(a, p).map(PotentialSpec::PowerLaw)
    }

    pub fn as_power_law(&self) -> Option<&PowerLaw> {
        match self {
            PotentialSpec::PowerLaw(p) => Some(p),
            PotentialSpec::Tabulated(_) => None,
        }
    }

    pub fn eval3(&self, s: f64) -> Result<(f64, f64, f64)> {
        match self {
            PotentialSpec::PowerLaw(pl) => {
                if s > 0.0 && s.is_finite() {
                    Ok(pl.eval3(s))
                } else {
                    Err(Error::Domain {
                        what: format!("power law a={} p={}", pl.a, pl.p),
                        arg: s,
                    })
                }
            }
            PotentialSpec::Tabulated(t) => t.eval3(s).ok_or_else(|| Error::Domain {
                what: format!("tabulated potential on [{}, {}]", t.range().0, t.range().1),
                arg: s,
            }),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            PotentialSpec::PowerLaw(p) => format!("{}*s^-{}", p.a, p.p),
            PotentialSpec::Tabulated(t) => format!("tabulated[{}, {}]", t.range().0, t.range().1),
        }
    }
}

/// Evaluates a potential or its first derivative at `s`.
pub fn evaluate(spec: &PotentialSpec, order: Order, s: f64) -> Result<f64> {
    let (v, d, _) = spec.eval3(s)?;
    Ok(match order {
        Order::Value => v,
        Order::FirstDerivative => d,
    })
}

/// Attractions, repulsions, damping and homogeneity exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialFamily {
    n: usize,
    alpha: f64,
    mu: f64,
    f: Vec<PotentialSpec>,
    g: BTreeMap<(usize, usize), PotentialSpec>,
}

impl PotentialFamily {
    /// `g` is keyed by zero-based pairs in either order; every unordered pair
    /// must appear exactly once.
    pub fn new(
        alpha: f64,
        mu: f64,
        f: Vec<PotentialSpec>,
        g: Vec<((usize, usize), PotentialSpec)>,
    ) -> Result<Self> {
        let n = f.len();
        if n == 0 {
            return Err(Error::param("family needs at least one electron"));
        }
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::param(format!("mu must lie in (0,1], got {mu}")));
        }
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::param(format!(
                "alpha must lie in (0,2), got {alpha}"
            )));
        }
        let mut map = BTreeMap::new();
        for ((i, j), spec) in g {
            if i == j || i >= n || j >= n {
                return Err(Error::param(format!("invalid pair ({i},{j}) for n={n}")));
            }
            let key = (i.min(j), i.max(j));
            if map.insert(key, spec).is_some() {
                return Err(Error::param(format!(
                    "pair ({},{}) given twice",
                    key.0, key.1
                )));
            }
        }
        if map.len() != n * (n - 1) / 2 {
            return Err(Error::param(format!(
                "expected {} repulsion pairs, got {}",
                n * (n - 1) / 2,
                map.len()
            )));
        }
        Ok(Self {
            n,
            alpha,
            mu,
            f,
            g: map,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn attraction(&self, i: usize) -> &PotentialSpec {
        &self.f[i]
    }

    pub fn attractions(&self) -> &[PotentialSpec] {
        &self.f
    }

    /// Order-insensitive repulsion lookup.
    pub fn repulsion(&self, i: usize, j: usize) -> Option<&PotentialSpec> {
        self.g.get(&(i.min(j), i.max(j)))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(usize, usize), &PotentialSpec)> {
        self.g.iter()
    }

    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::param(format!("mu must lie in (0,1], got {mu}")));
        }
        let mut out = self.clone();
        out.mu = mu;
        Ok(out)
    }

    /// The `mu = 0` limit: repulsions kept but switched off. Used as the
    /// start of continuation and in checks; not a valid input family.
    pub fn decoupled(&self) -> Self {
        Self {
            mu: 0.0,
            ..self.clone()
        }
    }

    pub fn is_power_law(&self) -> bool {
        self.f.iter().all(|s| s.as_power_law().is_some())
            && self.g.values().all(|s| s.as_power_law().is_some())
    }

    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        let f = self.f.iter().map(SpecJson::from).collect();
        let g = self
            .g
            .iter()
            .map(|(&(i, j), s)| GJson {
                i: i + 1,
                j: j + 1,
                spec: SpecJson::from(s),
            })
            .collect();
        Ok(serde_json::to_value(FamilyJson {
            n: self.n,
            alpha: self.alpha,
            mu: self.mu,
            f,
            g,
        })?)
    }

    /// Parses the JSON form: `f` entries are `{a, p}` power laws or
    /// `{s, v}` tables, `g` entries add 1-based `i < j`.
    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let raw: FamilyJson = serde_json::from_value(v.clone())
            .map_err(|e| Error::Malformed(format!("family JSON: {e}")))?;
        if raw.f.len() != raw.n {
            return Err(Error::Malformed(format!(
                "family JSON: n = {} but {} attractions",
                raw.n,
                raw.f.len()
            )));
        }
        let f = raw
            .f
            .into_iter()
            .map(SpecJson::into_spec)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Malformed(e.to_string()))?;
        let mut g = Vec::with_capacity(raw.g.len());
        for e in raw.g {
            if e.i == 0 || e.j == 0 {
                return Err(Error::Malformed(
                    "family JSON: pair indices are 1-based".into(),
                ));
            }
            let pair = (e.i - 1, e.j - 1);
            g.push((
                pair,
                e.spec
                    .into_spec()
                    .map_err(|e| Error::Malformed(e.to_string()))?,
            ));
        }
        Self::new(raw.alpha, raw.mu, f, g).map_err(|e| Error::Malformed(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum SpecJson {
    PowerLaw { a: f64, p: f64 },
    Table { s: Vec<f64>, v: Vec<f64> },
}

impl SpecJson {
    fn into_spec(self) -> Result<PotentialSpec> {
        match self {
            SpecJson::PowerLaw { a, p } => PotentialSpec::power_law(a, p),
            SpecJson::Table { s, v } => Tabulated::new(s, v).map(PotentialSpec::Tabulated),
        }
    }
}

impl From<&PotentialSpec> for SpecJson {
    fn from(s: &PotentialSpec) -> Self {
        match s {
            PotentialSpec::PowerLaw(p) => SpecJson::PowerLaw { a: p.a, p: p.p },
            PotentialSpec::Tabulated(t) => SpecJson::Table {
                s: t.s.clone(),
                v: t.v.clone(),
            },
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GJson {
    i: usize,
    j: usize,
    #[serde(flatten)]
    spec: SpecJson,
}

#[derive(Debug, Serialize, Deserialize)]
struct FamilyJson {
    n: usize,
    alpha: f64,
    mu: f64,
    f: Vec<SpecJson>,
    #[serde(default)]
    g: Vec<GJson>,
}

/// Coulomb model with gravitational correction: `f_i = Z(1+G)/s`,
/// `g_ij = (1-G)/s`, `alpha = 1`.
pub fn physical_preset(n: usize, z: f64, grav: f64, mu: f64) -> Result<PotentialFamily> {
    if n == 0 {
        return Err(Error::param("n must be >= 1"));
    }
    if !(z > 0.0) {
        return Err(Error::param(format!("Z must be > 0, got {z}")));
    }
    if !(grav >= 0.0 && grav < 1.0) {
        return Err(Error::param(format!("G must lie in [0,1), got {grav}")));
    }
    let f = (0..n)
        .map(|_| PotentialSpec::power_law(z * (1.0 + grav), 1.0))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            g.push(((i, j), PotentialSpec::power_law(1.0 - grav, 1.0)?));
        }
    }
    PotentialFamily::new(1.0, mu, f, g)
}

/// Named presets: `kepler-unit`, `helium`, `helium3`, `anion-n2-z1-g0`.
pub fn named_preset(name: &str) -> Result<PotentialFamily> {
    match name {
        "kepler-unit" => physical_preset(1, 1.0, 0.0, 1.0),
        "helium" => physical_preset(2, 2.0, 0.0, 1.0),
        "helium3" => physical_preset(3, 3.0, 0.0, 1.0),
        "anion-n2-z1-g0" => physical_preset(2, 1.0, 0.0, 1.0),
        other => Err(Error::Config(format!("unknown preset '{other}'"))),
    }
}

pub const PRESET_NAMES: [&str; 4] = ["kepler-unit", "helium", "helium3", "anion-n2-z1-g0"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// A point at which a hypothesis fails. `s` is the probe abscissa, `t` the
/// shifts used by H3-type probes, `value` the offending quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub indices: Vec<usize>,
    pub s: f64,
    pub t: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub verdict: Verdict,
    pub closed_form: bool,
    pub witnesses: Vec<Witness>,
    pub note: String,
}

impl HypothesisResult {
    fn pass(closed_form: bool, note: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Pass,
            closed_form,
            witnesses: Vec::new(),
            note: note.into(),
        }
    }

    fn fail(closed_form: bool, witnesses: Vec<Witness>, note: impl Into<String>) -> Self {
        debug_assert!(!witnesses.is_empty());
        Self {
            verdict: Verdict::Fail,
            closed_form,
            witnesses,
            note: note.into(),
        }
    }

    fn inconclusive(note: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Inconclusive,
            closed_form: false,
            witnesses: Vec::new(),
            note: note.into(),
        }
    }
}

/// The three power-law sufficient conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bullet {
    ExponentOrdering,
    ExponentRange,
    ChargeSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BulletFlags {
    pub exponent_ordering: bool,
    pub exponent_range: bool,
    pub charge_sum: bool,
    pub failed: Vec<Bullet>,
}

/// Sampling plan for grid probes: log-spaced `s` in `[s_min, s_max]` and
/// shifts `t_i` on a simplex grid with `t_i <= t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub s_min: f64,
    pub s_max: f64,
    pub per_decade: usize,
    pub t0: f64,
    pub t_levels: usize,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        Self {
            s_min: 1e-6,
            s_max: 1e6,
            per_decade: 20,
            t0: 1.0,
            t_levels: 4,
        }
    }
}

impl ProbeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.per_decade == 0
            || !(self.s_min > 0.0)
            || !(self.s_max > self.s_min)
            || self.t_levels == 0
        {
            return Err(Error::Config("empty probe grid".into()));
        }
        if !(self.t0 > 0.0) {
            return Err(Error::Config("probe grid needs t0 > 0".into()));
        }
        Ok(())
    }

    pub fn s_points(&self) -> Vec<f64> {
        let decades = (self.s_max / self.s_min).log10();
        let k = ((decades * self.per_decade as f64).ceil() as usize).max(1);
        (0..=k)
            .map(|i| self.s_min * 10f64.powf(decades * i as f64 / k as f64))
            .collect()
    }

    fn t_points(&self) -> Vec<f64> {
        (1..=self.t_levels)
            .map(|l| self.t0 * l as f64 / self.t_levels as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub h1: HypothesisResult,
    pub h2: HypothesisResult,
    pub h3: HypothesisResult,
    pub h4: HypothesisResult,
    pub h5: Option<HypothesisResult>,
    pub h3_prime: Option<HypothesisResult>,
    pub bullets: Option<BulletFlags>,
    pub grid: ProbeGrid,
}

impl AssumptionReport {
    pub fn results(&self) -> Vec<(&'static str, &HypothesisResult)> {
        let mut v = vec![
            ("H1", &self.h1),
            ("H2", &self.h2),
            ("H3", &self.h3),
            ("H4", &self.h4),
        ];
        if let Some(h) = &self.h5 {
            v.push(("H5", h));
        }
        if let Some(h) = &self.h3_prime {
            v.push(("H3'", h));
        }
        v
    }

    pub fn any_fail(&self) -> bool {
        self.results()
            .iter()
            .any(|(_, r)| r.verdict == Verdict::Fail)
            || self.bullets.as_ref().is_some_and(|b| !b.failed.is_empty())
    }

    pub fn any_inconclusive(&self) -> bool {
        self.results()
            .iter()
            .any(|(_, r)| r.verdict == Verdict::Inconclusive)
    }
}

/// Decides H1-H4 and the three power-law conditions for `family`.
pub fn check_assumptions(family: &PotentialFamily, grid: &ProbeGrid) -> Result<AssumptionReport> {
    grid.validate()?;
    let s_grid = grid.s_points();
    let bullets = family.is_power_law().then(|| power_law_bullets(family));
    Ok(AssumptionReport {
        h1: check_h1(family, &s_grid),
        h2: check_h2(family, &s_grid),
        h3: check_h3(family, grid, &s_grid),
        h4: check_h4(family, &s_grid),
        h5: None,
        h3_prime: None,
        bullets,
        grid: grid.clone(),
    })
}

fn all_specs(family: &PotentialFamily) -> Vec<(Vec<usize>, &PotentialSpec)> {
    let mut v: Vec<(Vec<usize>, &PotentialSpec)> = family
        .f
        .iter()
        .enumerate()
        .map(|(i, s)| (vec![i], s))
        .collect();
    v.extend(family.g.iter().map(|(&(i, j), s)| (vec![i, j], s)));
    v
}

fn check_h1(family: &PotentialFamily, s_grid: &[f64]) -> HypothesisResult {
    if family.is_power_law() {
        return HypothesisResult::pass(
            true,
            "power laws with a > 0, p > 0 are positive, decreasing and vanish at infinity",
        );
    }
    let mut wit = Vec::new();
    for (idx, spec) in all_specs(family) {
        for &s in s_grid {
            if let Ok((v, d, _)) = spec.eval3(s) {
                if !(v > 0.0 && d < 0.0) {
                    wit.push(Witness {
                        indices: idx.clone(),
                        s,
                        t: vec![],
                        value: d,
                    });
                    break;
                }
            }
        }
    }
    if wit.is_empty() {
        HypothesisResult::inconclusive("no grid witness; grid evidence only")
    } else {
        HypothesisResult::fail(false, wit, "derivative not negative or value not positive")
    }
}

fn check_h2(family: &PotentialFamily, s_grid: &[f64]) -> HypothesisResult {
    let alpha = family.alpha;
    let mut wit = Vec::new();
    let mut closed = true;
    for (i, spec) in family.f.iter().enumerate() {
        match spec.as_power_law() {
            Some(p) => {
                if p.p > alpha {
                    // s f' + alpha f = (alpha - p) f < 0 everywhere.
                    wit.push(Witness {
                        indices: vec![i],
                        s: 1.0,
                        t: vec![],
                        value: (alpha - p.p) * p.a,
                    });
                }
            }
            None => {
                closed = false;
                for &s in s_grid {
                    if let Ok((v, d, _)) = spec.eval3(s) {
                        if s * d + alpha * v < 0.0 {
                            wit.push(Witness {
                                indices: vec![i],
                                s,
                                t: vec![],
                                value: s * d + alpha * v,
                            });
                            break;
                        }
                    }
                }
            }
        }
    }
    for (&(i, j), spec) in &family.g {
        match spec.as_power_law() {
            Some(p) => {
                if p.p < alpha {
                    wit.push(Witness {
                        indices: vec![i, j],
                        s: 1.0,
                        t: vec![],
                        value: (alpha - p.p) * p.a,
                    });
                }
            }
            None => {
                closed = false;
                for &s in s_grid {
                    if let Ok((v, d, _)) = spec.eval3(s) {
                        if s * d + alpha * v > 0.0 {
                            wit.push(Witness {
                                indices: vec![i, j],
                                s,
                                t: vec![],
                                value: s * d + alpha * v,
                            });
                            break;
                        }
                    }
                }
            }
        }
    }
    if !wit.is_empty() {
        HypothesisResult::fail(closed, wit, "homogeneity inequality violated")
    } else if closed {
        HypothesisResult::pass(true, "attraction exponents <= alpha <= repulsion exponents")
    } else {
        HypothesisResult::inconclusive("no grid witness; grid evidence only")
    }
}

/// Closed form for power laws: for each `j`, the attraction must dominate the
/// slowest repulsion from inner electrons at infinity, with strict coefficient
/// inequality when the exponents tie.
fn h3_closed_form(family: &PotentialFamily, j: usize) -> Option<bool> {
    let fj = family.f[j].as_power_law()?;
    if j == 0 {
        return Some(true);
    }
    let mut beta_min = f64::INFINITY;
    let mut reps = Vec::new();
    for i in 0..j {
        let g = family.repulsion(i, j)?.as_power_law()?;
        beta_min = beta_min.min(g.p);
        reps.push(*g);
    }
    if fj.p < beta_min {
        Some(true)
    } else if fj.p > beta_min {
        Some(false)
    } else {
        let tied: f64 = reps
            .iter()
            .filter(|g| g.p == beta_min)
            .map(|g| g.p * g.a)
            .sum();
        Some(fj.p * fj.a > tied)
    }
}

fn h3_probe(
    family: &PotentialFamily,
    j: usize,
    grid: &ProbeGrid,
    s_grid: &[f64],
) -> Option<Witness> {
    if j == 0 {
        return None;
    }
    let t_pts = grid.t_points();
    // Each inner electron gets the same shift level; extremes of the simplex
    // grid give the largest repulsion, which is the worst case.
    for &t in &t_pts {
        for &s in s_grid.iter().filter(|&&s| s > t) {
            let Ok((_, fd, _)) = family.f[j].eval3(s) else {
                continue;
            };
            let mut val = fd;
            let mut ok = true;
            for i in 0..j {
                match family.repulsion(i, j).map(|g| g.eval3(s - t)) {
                    Some(Ok((_, gd, _))) => val -= gd,
                    _ => ok = false,
                }
            }
            if ok && val >= 0.0 {
                return Some(Witness {
                    indices: vec![j],
                    s,
                    t: vec![t; j],
                    value: val,
                });
            }
        }
    }
    None
}

fn check_h3(family: &PotentialFamily, grid: &ProbeGrid, s_grid: &[f64]) -> HypothesisResult {
    let mut wit = Vec::new();
    let mut all_closed = true;
    let mut closed_fail = false;
    for j in 0..family.n {
        let cf = h3_closed_form(family, j);
        let probe = h3_probe(family, j, grid, s_grid);
        match cf {
            Some(true) => {}
            Some(false) => {
                closed_fail = true;
                wit.push(probe.unwrap_or_else(|| {
                    // The closed form fails at infinity: report the far end of the grid.
                    let s = *s_grid.last().unwrap();
                    Witness {
                        indices: vec![j],
                        s,
                        t: vec![grid.t0; j],
                        value: f64::NAN,
                    }
                }));
            }
            None => {
                all_closed = false;
                if let Some(w) = probe {
                    wit.push(w);
                }
            }
        }
    }
    if !wit.is_empty() {
        HypothesisResult::fail(
            closed_fail,
            wit,
            "attraction does not dominate inner repulsions at infinity",
        )
    } else if all_closed {
        HypothesisResult::pass(
            true,
            "attraction dominates inner repulsions at infinity (closed form)",
        )
    } else {
        HypothesisResult::inconclusive(
            "no grid witness; grid evidence cannot decide a for-all/exists statement",
        )
    }
}

fn check_h4(family: &PotentialFamily, s_grid: &[f64]) -> HypothesisResult {
    if family.f.iter().all(|s| s.as_power_law().is_some()) {
        // Convexity is automatic; the lower bound f_j'(t) >= f_l'(s) - C with
        // s <= t reduces to s = t, bounded iff the exponents are ordered.
        let mut wit = Vec::new();
        for l in 0..family.n {
            for j in l + 1..family.n {
                let (fl, fj) = (
                    family.f[l].as_power_law().unwrap(),
                    family.f[j].as_power_law().unwrap(),
                );
                let bad = fj.p > fl.p || (fj.p == fl.p && fj.a > fl.a);
                if bad {
                    let s = s_grid[0];
                    wit.push(Witness {
                        indices: vec![j, l],
                        s,
                        t: vec![],
                        value: fj.d1(s) - fl.d1(s),
                    });
                }
            }
        }
        return if wit.is_empty() {
            HypothesisResult::pass(true, "power laws are convex and ordered")
        } else {
            HypothesisResult::fail(true, wit, "f_j' - f_l' unbounded below near the origin")
        };
    }
    let mut wit = Vec::new();
    for (i, spec) in family.f.iter().enumerate() {
        for w in s_grid.windows(3) {
            let vals: Vec<_> = w.iter().map(|&s| spec.eval3(s).map(|e| e.0)).collect();
            if let [Ok(a), Ok(b), Ok(c)] = vals.as_slice() {
                let (h0, h1) = (w[1] - w[0], w[2] - w[1]);
                let second = (c - b) / h1 - (b - a) / h0;
                if second < -1e-12 * (a.abs() + c.abs()) {
                    wit.push(Witness {
                        indices: vec![i],
                        s: w[1],
                        t: vec![],
                        value: second,
                    });
                    break;
                }
            }
        }
    }
    if wit.is_empty() {
        HypothesisResult::inconclusive("no grid witness; grid evidence only")
    } else {
        HypothesisResult::fail(false, wit, "attraction not convex")
    }
}

/// The three sufficient conditions for power-law families.
pub fn power_law_bullets(family: &PotentialFamily) -> BulletFlags {
    let n = family.n;
    let fa: Vec<PowerLaw> = family
        .f
        .iter()
        .map(|s| *s.as_power_law().expect("power law"))
        .collect();
    let mut failed = Vec::new();

    let mut ordering = true;
    for l in 0..n {
        for j in l..n {
            if fa[l].p < fa[j].p || (fa[l].p == fa[j].p && fa[j].a > fa[l].a) {
                ordering = false;
            }
        }
    }
    if !ordering {
        failed.push(Bullet::ExponentOrdering);
    }

    let alpha_star = fa.iter().map(|f| f.p).fold(f64::NEG_INFINITY, f64::max);
    let range = fa.iter().all(|f| f.p > 0.0 && f.p < 2.0)
        && family
            .g
            .values()
            .all(|g| g.as_power_law().expect("power law").p >= alpha_star);
    if !range {
        failed.push(Bullet::ExponentRange);
    }

    let mut charge = true;
    for j in 0..n {
        if fa[j].p != alpha_star {
            continue;
        }
        let sum: f64 = (0..n)
            .filter(|&i| i != j)
            .filter_map(|i| family.repulsion(i, j).and_then(|g| g.as_power_law()))
            .filter(|g| g.p == alpha_star)
            .map(|g| g.a)
            .sum();
        let nonempty = (0..n).filter(|&i| i != j).any(|i| {
            family
                .repulsion(i, j)
                .and_then(|g| g.as_power_law())
                .is_some_and(|g| g.p == alpha_star)
        });
        if nonempty && !(sum < fa[j].a) {
            charge = false;
        }
    }
    if !charge {
        failed.push(Bullet::ChargeSum);
    }
    BulletFlags {
        exponent_ordering: ordering,
        exponent_range: range,
        charge_sum: charge,
        failed,
    }
}
