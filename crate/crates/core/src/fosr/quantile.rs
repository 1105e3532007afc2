//! Pointwise L1-penalized quantile regression with an optimality certificate.

use serde::{Deserialize, Serialize};

use super::simplex::{sample_quantile, DualSimplex};
use super::DesignMatrix;
use crate::error::{Error, Result};

/// Tolerance of the subgradient certificate checked after every solve.
pub const CERTIFICATE_TOL: f64 = 1e-6;

/// Check (pinball) loss `ρ_τ(r) = r (τ − 1{r < 0})`.
pub fn pinball_loss(r: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(pinball(r, tau))
}

#[inline]
pub(crate) fn pinball(r: f64, tau: f64) -> f64 {
    if r < 0.0 {
        r * (tau - 1.0)
    } else {
        r * tau
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidQuantile(tau))
    }
}

/// Subgradient optimality report for one solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `|Σ ψ_i|`.
    pub intercept: f64,
    /// Largest violation of the slope conditions.
    pub slopes: f64,
    /// Largest distance of a weight from the value its residual sign forces.
    pub sign: f64,
    /// Primal minus dual objective.
    pub gap: f64,
}

impl Certificate {
    pub fn holds(&self, tol: f64) -> bool {
        self.intercept <= tol && self.slopes <= tol && self.sign <= tol && self.gap.abs() <= tol.max(1e-9)
    }

    pub fn worst(&self) -> f64 {
        self.intercept.max(self.slopes).max(self.sign).max(self.gap.abs())
    }
}

/// Solution of the quantile LASSO at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseFit {
    pub grid_index: usize,
    pub intercept: f64,
    pub slopes: Vec<f64>,
    pub objective: f64,
    /// Indices of nonzero slopes.
    pub active: Vec<usize>,
    /// Pinball subgradient `ψ_i ∈ [τ − 1, τ]` at the solution.
    #[serde(skip)]
    pub subgradient: Vec<f64>,
    pub certificate: Certificate,
    pub iterations: usize,
}

/// `Σ ρ_τ(y_i − β₀ − x_iᵀβ) + nλ Σ |β_j|`.
pub fn qr_lasso_objective(
    y: &[f64],
    x: &[f64],
    p: usize,
    tau: f64,
    lambda: f64,
    intercept: f64,
    slopes: &[f64],
) -> f64 {
    let n = y.len();
    let loss: f64 = (0..n)
        .map(|i| pinball(y[i] - intercept - dot(&x[i * p..(i + 1) * p], slopes), tau))
        .sum();
    loss + n as f64 * lambda * slopes.iter().map(|b| b.abs()).sum::<f64>()
}

/// Minimizes the penalized pinball objective with an unpenalized intercept.
pub fn pointwise_qr_lasso(y: &[f64], x: &DesignMatrix, tau: f64, lambda: f64) -> Result<PointwiseFit> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    solve_qr_lasso(y, x.data(), x.ncols(), tau, lambda, None)
}

/// Slice-level solver used by the functional fits. `x` is row-major `n × p`.
pub fn solve_qr_lasso(
    y: &[f64],
    x: &[f64],
    p: usize,
    tau: f64,
    lambda: f64,
    warm: Option<&[f64]>,
) -> Result<PointwiseFit> {
    check_tau(tau)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "penalty must be finite and nonnegative, got {lambda}"
        )));
    }
    let n = y.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "quantile regression needs at least 2 observations, got {n}"
        )));
    }
    if x.len() != n * p {
        return Err(Error::DimensionMismatch {
            expected: n * p,
            got: x.len(),
        });
    }
    if let Some(w) = warm {
        if w.len() != p + 1 {
            return Err(Error::DimensionMismatch {
                expected: p + 1,
                got: w.len(),
            });
        }
    }
    let penalty = n as f64 * lambda;
    let max_iter = 50 * (n + 2 * p + 1) + 1000;
    let mut sol = None;
    if p > 0 && penalty > 0.0 {
        // zero slopes are optimal whenever the intercept-only subgradient
        // satisfies the slope conditions; return that solution so the
        // boundary case λ = λ_max does not land on another vertex
        let base = DualSimplex::new(y, &[], 0, tau, 0.0, None).solve(max_iter)?;
        let fits = (0..p).all(|j| {
            let g: f64 = (0..n).map(|i| base.weights[i] * x[i * p + j]).sum();
            g.abs() <= penalty * (1.0 + 1e-12)
        });
        if fits {
            let mut base = base;
            base.slopes = vec![0.0; p];
            sol = Some(base);
        }
    }
    let sol = match sol {
        Some(s) => s,
        None => DualSimplex::new(y, x, p, tau, penalty, warm).solve(max_iter)?,
    };

    let objective = qr_lasso_objective(y, x, p, tau, lambda, sol.intercept, &sol.slopes);
    let certificate = certify(y, x, p, tau, lambda, sol.intercept, &sol.slopes, &sol.weights, sol.dual_objective);
    let scale = objective.abs().max(1.0);
    let passes = certificate.intercept <= CERTIFICATE_TOL
        && certificate.slopes <= CERTIFICATE_TOL
        && certificate.sign <= CERTIFICATE_TOL
        && certificate.gap.abs() <= 1e-9 * scale;
    if !passes {
        return Err(Error::NoConvergence {
            iterations: sol.iterations,
            best_objective: objective,
            gap: certificate.worst(),
        });
    }
    let active = (0..p).filter(|&j| sol.slopes[j] != 0.0).collect();
    Ok(PointwiseFit {
        grid_index: 0,
        intercept: sol.intercept,
        slopes: sol.slopes,
        objective,
        active,
        subgradient: sol.weights,
        certificate,
        iterations: sol.iterations,
    })
}

/// Checks the subgradient conditions for `(β₀, β)` with weights `ψ`.
#[allow(clippy::too_many_arguments)]
pub fn certify(
    y: &[f64],
    x: &[f64],
    p: usize,
    tau: f64,
    lambda: f64,
    intercept: f64,
    slopes: &[f64],
    psi: &[f64],
    dual_objective: f64,
) -> Certificate {
    let n = y.len();
    let penalty = n as f64 * lambda;
    let scale = y.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let zero_band = 1e-9 * scale;
    let mut sign = 0.0f64;
    let mut sums = vec![0.0; p];
    let mut total = 0.0;
    for i in 0..n {
        let row = &x[i * p..(i + 1) * p];
        let r = y[i] - intercept - dot(row, slopes);
        let w = psi[i];
        let v = if r > zero_band {
            (w - tau).abs()
        } else if r < -zero_band {
            (w - (tau - 1.0)).abs()
        } else {
            (tau - 1.0 - w).max(w - tau).max(0.0)
        };
        sign = sign.max(v);
        total += w;
        for j in 0..p {
            sums[j] += w * row[j];
        }
    }
    // loss gradient in β_j is −Σ ψ_i x_ij; optimality needs it to equal
    // −nλ·sign(β_j) (or lie in [−nλ, nλ] when β_j = 0)
    let slopes_violation = (0..p)
        .map(|j| {
            let grad = -sums[j];
            if slopes[j] == 0.0 {
                (grad.abs() - penalty).max(0.0)
            } else {
                (grad + penalty * slopes[j].signum()).abs()
            }
        })
        .fold(0.0, f64::max);
    let primal = qr_lasso_objective(y, x, p, tau, lambda, intercept, slopes);
    Certificate {
        intercept: total.abs(),
        slopes: slopes_violation,
        sign,
        gap: primal - dual_objective,
    }
}

/// Smallest penalty at which the zero-slope solution is certified optimal,
/// using the intercept-only subgradient.
pub fn lambda_max(y: &[f64], x: &DesignMatrix, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let n = y.len();
    let base = solve_qr_lasso(y, &[], 0, tau, 0.0, None)?;
    let p = x.ncols();
    let data = x.data();
    let worst = (0..p)
        .map(|j| {
            (0..n)
                .map(|i| base.subgradient[i] * data[i * p + j])
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max);
    Ok(worst / n as f64)
}

/// Intercept-only solution: the lower sample `τ`-quantile.
pub fn intercept_only(y: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if y.is_empty() {
        return Err(Error::Empty("no observations".into()));
    }
    Ok(sample_quantile(y, tau))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
