//! Clamped B-spline bases on a closed interval.
//!
//! Basis functions are evaluated with the triangular de Boor scheme on the
//! single knot span containing `t`, so at most `order` entries of any
//! evaluated vector are nonzero. Spans are right-continuous; at the upper
//! domain end the last span is used so the final basis function equals one.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A clamped B-spline basis with uniformly spaced interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSystem {
    domain_lo: f64,
    domain_hi: f64,
    order: usize,
    num_basis: usize,
    knots: Vec<f64>,
}

impl BasisSystem {
    /// Builds a clamped basis of `num_basis` functions of the given `order`
    /// (4 = cubic) on `[domain_lo, domain_hi]`.
    pub fn new(domain_lo: f64, domain_hi: f64, num_basis: usize, order: usize) -> Result<Self> {
        if order < 1 || num_basis < order {
            return Err(Error::InvalidConfig(format!(
                "basis needs num_basis >= order >= 1 (num_basis = {num_basis}, order = {order})"
            )));
        }
        if !(domain_lo.is_finite() && domain_hi.is_finite() && domain_hi > domain_lo) {
            return Err(Error::InvalidDomain {
                lo: domain_lo,
                hi: domain_hi,
            });
        }
        let interior = num_basis - order;
        let width = domain_hi - domain_lo;
        let mut knots = Vec::with_capacity(num_basis + order);
        knots.extend(std::iter::repeat_n(domain_lo, order));
        for i in 1..=interior {
            knots.push(domain_lo + width * i as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(domain_hi, order));
        Ok(BasisSystem {
            domain_lo,
            domain_hi,
            order,
            num_basis,
            knots,
        })
    }

    /// Cubic basis, the default used throughout the pipeline.
    pub fn cubic(domain_lo: f64, domain_hi: f64, num_basis: usize) -> Result<Self> {
        Self::new(domain_lo, domain_hi, num_basis, 4)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain_lo, self.domain_hi)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.domain_lo && t <= self.domain_hi
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutOfDomain {
                t,
                lo: self.domain_lo,
                hi: self.domain_hi,
            })
        }
    }

    fn check_ell(&self, ell: usize) -> Result<()> {
        if ell >= self.order {
            Err(Error::UnsupportedDerivative {
                ell,
                order: self.order,
            })
        } else {
            Ok(())
        }
    }

    /// Index `mu` of the knot span `[knots[mu], knots[mu + 1])` holding `t`.
    fn span(&self, t: f64) -> usize {
        let last = self.num_basis - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // knots[order - 1] == domain_lo <= t < knots[last + 1]
        let mut lo = self.order - 1;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis values at `t`: returns the index of the first function
    /// and the `order` values starting there.
    pub fn eval_local(&self, t: f64) -> Result<(usize, Vec<f64>)> {
        self.check_domain(t)?;
        let mu = self.span(t);
        Ok((mu + 1 - self.order, self.local_values(mu, t)))
    }

    fn local_values(&self, mu: usize, t: f64) -> Vec<f64> {
        let degree = self.order - 1;
        let mut n = vec![0.0; self.order];
        let mut left = vec![0.0; self.order];
        let mut right = vec![0.0; self.order];
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = t - self.knots[mu + 1 - j];
            right[j] = self.knots[mu + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// Nonzero values of the `ell`-th derivative at `t`, in the same layout as
    /// [`BasisSystem::eval_local`].
    pub fn eval_deriv_local(&self, t: f64, ell: usize) -> Result<(usize, Vec<f64>)> {
        self.check_ell(ell)?;
        if ell == 0 {
            return self.eval_local(t);
        }
        self.check_domain(t)?;
        let mu = self.span(t);
        let ders = self.local_derivatives(mu, t, ell);
        Ok((mu + 1 - self.order, ders.into_iter().nth(ell).unwrap()))
    }

    /// Derivatives 0..=max_ell of the nonzero functions on span `mu`.
    fn local_derivatives(&self, mu: usize, t: f64, max_ell: usize) -> Vec<Vec<f64>> {
        let p = self.order - 1;
        let u = &self.knots;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[mu + 1 - j];
            right[j] = u[mu + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                // lower triangle holds knot differences
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![0.0; p + 1]; max_ell + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let p_i = p as isize;
        let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
        for r in 0..=p_i {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=max_ell as isize {
                let mut d = 0.0;
                let rk = r - k;
                let pk = p_i - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk as usize];
                }
                let j1 = if rk >= -1 { 1 } else { -rk };
                let j2 = if r - 1 <= pk { k - 1 } else { p_i - r };
                for j in j1..=j2 {
                    let (ju, rkj) = (j as usize, (rk + j) as usize);
                    a[s2][ju] = (a[s1][ju] - a[s1][ju - 1]) / ndu[(pk + 1) as usize][rkj];
                    d += a[s2][ju] * ndu[rkj][pk as usize];
                }
                if r <= pk {
                    let ku = k as usize;
                    a[s2][ku] = -a[s1][ku - 1] / ndu[(pk + 1) as usize][r as usize];
                    d += a[s2][ku] * ndu[r as usize][pk as usize];
                }
                ders[k as usize][r as usize] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (k, row) in ders.iter_mut().enumerate().skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= (p as f64) - k as f64;
        }
        ders
    }

    /// All `num_basis` basis values at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let (first, local) = self.eval_local(t)?;
        Ok(self.scatter(first, &local))
    }

    /// All `num_basis` values of the `ell`-th derivative at `t`.
    pub fn eval_deriv(&self, t: f64, ell: usize) -> Result<Vec<f64>> {
        let (first, local) = self.eval_deriv_local(t, ell)?;
        Ok(self.scatter(first, &local))
    }

    fn scatter(&self, first: usize, local: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis];
        out[first..first + local.len()].copy_from_slice(local);
        out
    }

    /// Collocation matrix `M[i, k] = D^ell phi_k(ts[i])`.
    pub fn collocation(&self, ts: &[f64], ell: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(ts.len(), self.num_basis);
        for (i, &t) in ts.iter().enumerate() {
            let (first, local) = self.eval_deriv_local(t, ell)?;
            for (j, v) in local.into_iter().enumerate() {
                m[(i, first + j)] = v;
            }
        }
        Ok(m)
    }

    /// Gram matrix of second derivatives, `R[j, k] = ∫ D²phi_j D²phi_k dt`,
    /// integrated exactly span by span with Gauss–Legendre.
    pub fn roughness_matrix(&self) -> Result<DMatrix<f64>> {
        if self.order < 3 {
            return Err(Error::UnsupportedDerivative {
                ell: 2,
                order: self.order,
            });
        }
        let degree = 2 * (self.order - 3);
        let nodes = (degree + 1).div_ceil(2) + 1;
        let (xs, ws) = gauss_legendre(nodes);
        let k = self.num_basis;
        let mut r = DMatrix::zeros(k, k);
        for mu in (self.order - 1)..k {
            let (a, b) = (self.knots[mu], self.knots[mu + 1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            let first = mu + 1 - self.order;
            for (&x, &w) in xs.iter().zip(&ws) {
                let t = mid + half * x;
                let d2 = &self.local_derivatives(mu, t, 2)[2];
                for (i, &di) in d2.iter().enumerate() {
                    for (j, &dj) in d2.iter().enumerate().skip(i) {
                        r[(first + i, first + j)] += w * half * di * dj;
                    }
                }
            }
        }
        r.fill_lower_triangle_with_upper_triangle();
        Ok(r)
    }

    /// `G` uniformly spaced points covering the domain, endpoints included exactly.
    pub fn uniform_grid(&self, points: usize) -> Result<Vec<f64>> {
        uniform_grid(self.domain_lo, self.domain_hi, points)
    }
}

pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid needs at least 2 points, got {points}"
        )));
    }
    let step = (hi - lo) / (points - 1) as f64;
    let mut grid: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    grid[points - 1] = hi;
    Ok(grid)
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = -x;
        xs[n - 1 - i] = x;
        ws[i] = w;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}

/// Legendre polynomial P_n(x) and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
