//! Banded LU with partial pivoting, sized for the block-tridiagonal
//! Jacobians of the discrete Euler-Lagrange system.

use crate::error::{Error, Result};

/// Square band matrix with `kl` sub- and `ku` super-diagonals. Rows keep
/// `kl` extra columns on the right for pivoting fill-in.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    dim: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(dim: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            dim,
            kl,
            ku,
            width,
            data: vec![0.0; dim * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn slot(&self, r: usize, c: usize) -> Option<usize> {
        if c + self.kl < r || c > r + self.kl + self.ku || c >= self.dim {
            None
        } else {
            Some(r * self.width + (c + self.kl - r))
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.slot(r, c).map_or(0.0, |k| self.data[k])
    }

    /// Adds `v` at (r, c). Panics if (r, c) lies outside the declared band.
    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        assert!(
            c + self.kl >= r && c <= r + self.ku,
            "entry ({r},{c}) outside band"
        );
        let k = self.slot(r, c).expect("in band");
        self.data[k] += v;
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize, v: f64) {
        let k = self.slot(r, c).expect("in storage");
        self.data[k] = v;
    }

    /// Replaces row `r` by the identity row (Dirichlet pin).
    pub fn pin_row(&mut self, r: usize) {
        let lo = r.saturating_sub(self.kl);
        let hi = (r + self.ku).min(self.dim - 1);
        for c in lo..=hi {
            self.set(r, c, if c == r { 1.0 } else { 0.0 });
        }
    }

    /// Pins row and column `r`, so the unknown decouples exactly when its
    /// right-hand side is zero.
    pub fn pin(&mut self, r: usize) {
        self.pin_row(r);
        let lo = r.saturating_sub(self.ku);
        let hi = (r + self.kl).min(self.dim - 1);
        for row in lo..=hi {
            if row != r {
                self.set(row, r, 0.0);
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for (r, yr) in y.iter_mut().enumerate() {
            let lo = r.saturating_sub(self.kl);
            let hi = (r + self.ku).min(self.dim - 1);
            *yr = (lo..=hi).map(|c| self.get(r, c) * x[c]).sum();
        }
        y
    }

    /// In-place factorization.
    pub fn factor(mut self) -> Result<BandLu> {
        let n = self.dim;
        let reach = self.kl + self.ku;
        let mut piv = vec![0usize; n];
        for c in 0..n {
            let last = (c + self.kl).min(n - 1);
            let mut p = c;
            let mut best = self.get(c, c).abs();
            for r in c + 1..=last {
                let v = self.get(r, c).abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Solver {
                    reason: format!("singular band matrix at column {c}"),
                    residual: f64::NAN,
                    iterations: 0,
                });
            }
            piv[c] = p;
            let cmax = (c + reach).min(n - 1);
            if p != c {
                for j in c..=cmax {
                    let a = self.get(c, j);
                    let b = self.get(p, j);
                    self.set(c, j, b);
                    self.set(p, j, a);
                }
            }
            let d = self.get(c, c);
            for r in c + 1..=last {
                let l = self.get(r, c) / d;
                if l == 0.0 {
                    continue;
                }
                self.set(r, c, l);
                for j in c + 1..=cmax {
                    let u = self.get(c, j);
                    if u != 0.0 {
                        let k = self.slot(r, j).expect("fill within storage");
                        self.data[k] -= l * u;
                    }
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.m.dim;
        let kl = self.m.kl;
        let reach = kl + self.m.ku;
        let mut x = rhs.to_vec();
        for c in 0..n {
            let p = self.piv[c];
            if p != c {
                x.swap(c, p);
            }
            let xc = x[c];
            if xc != 0.0 {
                for r in c + 1..=(c + kl).min(n - 1) {
                    x[r] -= self.m.get(r, c) * xc;
                }
            }
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for j in r + 1..=(r + reach).min(n - 1) {
                s -= self.m.get(r, j) * x[j];
            }
            x[r] = s / self.m.get(r, r);
        }
        x
    }
}

/// Solves a symmetric tridiagonal system given its diagonal and
/// off-diagonal (Thomas algorithm, no pivoting; caller guarantees
/// diagonal dominance).
pub fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    c[0] = if n > 1 { off[0] / denom } else { 0.0 };
    d[0] = rhs[0] / denom;
    for k in 1..n {
        denom = diag[k] - off[k - 1] * c[k - 1];
        if k < n - 1 {
            c[k] = off[k] / denom;
        }
        d[k] = (rhs[k] - off[k - 1] * d[k - 1]) / denom;
    }
    for k in (0..n - 1).rev() {
        d[k] -= c[k] * d[k + 1];
    }
    d
}
