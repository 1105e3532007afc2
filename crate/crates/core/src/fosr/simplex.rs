//! Bounded-variable primal simplex on the dual of the L1-penalized quantile
//! regression linear program.
//!
//! Primal: `min Σ ρ_τ(y_i − β₀ − x_iᵀβ) + c Σ |β_j|` with `c = nλ`.
//! Dual:   `max Σ a_i y_i` subject to
//!
//! ```text
//!   Σ a_i           = 0
//!   Σ a_i x_ij − g_j = 0      (j = 1..p)
//!   τ − 1 ≤ a_i ≤ τ,   −c ≤ g_j ≤ c
//! ```
//!
//! There are only `p + 1` equality rows, so the basis is tiny and every
//! pivot costs `O(n p)`. The primal coefficients are the negated simplex
//! multipliers of the optimal basis.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Consecutive degenerate pivots after which Bland's rule takes over.
const DEGENERATE_SWITCH: usize = 50;
const PIVOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Feasibility,
    Optimality,
}

pub(crate) struct DualSolution {
    pub intercept: f64,
    pub slopes: Vec<f64>,
    /// Dual weights `a_i ∈ [τ − 1, τ]`, a pinball subgradient at the solution.
    pub weights: Vec<f64>,
    pub dual_objective: f64,
    pub iterations: usize,
}

pub(crate) struct DualSimplex<'a> {
    y: &'a [f64],
    x: &'a [f64],
    n: usize,
    p: usize,
    m: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    value: Vec<f64>,
    art_sign: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    cost_tol: f64,
}

impl<'a> DualSimplex<'a> {
    /// `x` is row-major `n × p`; `warm` optionally holds `(β₀, β)` used to
    /// pick the starting bounds of the dual weights.
    pub fn new(
        y: &'a [f64],
        x: &'a [f64],
        p: usize,
        tau: f64,
        penalty: f64,
        warm: Option<&[f64]>,
    ) -> Self {
        let n = y.len();
        let m = p + 1;
        let total = n + p + m;
        let mut lower = vec![0.0; total];
        let mut upper = vec![0.0; total];
        let mut cost = vec![0.0; total];
        for i in 0..n {
            lower[i] = tau - 1.0;
            upper[i] = tau;
            cost[i] = -y[i];
        }
        for j in 0..p {
            lower[n + j] = -penalty;
            upper[n + j] = penalty;
        }
        for k in 0..m {
            upper[n + p + k] = f64::INFINITY;
        }

        let start = match warm {
            Some(w) => w.to_vec(),
            None => {
                let mut s = vec![0.0; m];
                s[0] = sample_quantile(y, tau);
                s
            }
        };
        let mut value = vec![0.0; total];
        for i in 0..n {
            let r = y[i] - start[0] - dot(&x[i * p..(i + 1) * p], &start[1..]);
            value[i] = if r > 0.0 { tau } else { tau - 1.0 };
        }

        let scale = y.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        let mut solver = DualSimplex {
            y,
            x,
            n,
            p,
            m,
            lower,
            upper,
            cost,
            value,
            art_sign: vec![1.0; m],
            basis: Vec::with_capacity(m),
            is_basic: vec![false; total],
            cost_tol: 1e-11 * scale * (n as f64).sqrt().max(1.0),
        };
        solver.initial_basis(&start);
        solver
    }

    /// Row 0 always starts on an artificial; row `j` starts on `g_j` when the
    /// implied value fits inside `[−c, c]`, otherwise on an artificial.
    fn initial_basis(&mut self, start: &[f64]) {
        let (n, p) = (self.n, self.p);
        let mut row_sums = vec![0.0; self.m];
        for i in 0..n {
            row_sums[0] += self.value[i];
            for j in 0..p {
                row_sums[j + 1] += self.value[i] * self.x[i * p + j];
            }
        }
        let art = n + p;
        // row 0: s·v = −Σ a_i
        let need = -row_sums[0];
        self.art_sign[0] = if need >= 0.0 { 1.0 } else { -1.0 };
        self.value[art] = need.abs();
        self.push_basic(art);
        for j in 0..p {
            let g = n + j;
            let implied = row_sums[j + 1];
            if implied >= self.lower[g] && implied <= self.upper[g] && self.upper[g] > self.lower[g] {
                self.value[g] = implied;
                self.push_basic(g);
            } else {
                let bound = if start[j + 1] > 0.0 || implied > self.upper[g] {
                    self.upper[g]
                } else {
                    self.lower[g]
                };
                self.value[g] = bound;
                // row j+1: Σ a_i x_ij − g_j + s·v = 0
                let need = -(implied - bound);
                self.art_sign[j + 1] = if need >= 0.0 { 1.0 } else { -1.0 };
                self.value[art + j + 1] = need.abs();
                self.push_basic(art + j + 1);
            }
        }
    }

    fn push_basic(&mut self, j: usize) {
        self.basis.push(j);
        self.is_basic[j] = true;
    }

    fn column(&self, j: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (n, p) = (self.n, self.p);
        if j < n {
            out[0] = 1.0;
            out[1..].copy_from_slice(&self.x[j * p..(j + 1) * p]);
        } else if j < n + p {
            out[j - n + 1] = -1.0;
        } else {
            let k = j - n - p;
            out[k] = self.art_sign[k];
        }
    }

    /// `πᵀA_j` without materializing the column.
    fn price(&self, j: usize, pi: &[f64]) -> f64 {
        let (n, p) = (self.n, self.p);
        if j < n {
            pi[0] + dot(&self.x[j * p..(j + 1) * p], &pi[1..])
        } else if j < n + p {
            -pi[j - n + 1]
        } else {
            let k = j - n - p;
            self.art_sign[k] * pi[k]
        }
    }

    fn basis_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.m, self.m);
        let mut col = vec![0.0; self.m];
        for (k, &j) in self.basis.iter().enumerate() {
            self.column(j, &mut col);
            for r in 0..self.m {
                b[(r, k)] = col[r];
            }
        }
        b
    }

    /// Recomputes basic values from the nonbasic ones (`B x_B = −N x_N`).
    fn refresh_basic(&mut self, lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) {
        let mut rhs = DVector::zeros(self.m);
        let mut col = vec![0.0; self.m];
        let total = self.value.len();
        for j in 0..total {
            if self.is_basic[j] || self.value[j] == 0.0 {
                continue;
            }
            self.column(j, &mut col);
            for r in 0..self.m {
                rhs[r] -= col[r] * self.value[j];
            }
        }
        if let Some(xb) = lu.solve(&rhs) {
            for (k, &j) in self.basis.iter().enumerate() {
                self.value[j] = xb[k];
            }
        }
    }

    fn phase_cost(&self, phase: Phase, j: usize) -> f64 {
        let art = self.n + self.p;
        match phase {
            Phase::Feasibility => {
                if j >= art {
                    1.0
                } else {
                    0.0
                }
            }
            Phase::Optimality => {
                if j >= art {
                    0.0
                } else {
                    self.cost[j]
                }
            }
        }
    }

    pub fn solve(mut self, max_iter: usize) -> Result<DualSolution> {
        let mut iterations = 0;
        self.run(Phase::Feasibility, max_iter, &mut iterations)?;
        let art = self.n + self.p;
        let infeasibility: f64 = (art..self.value.len()).map(|j| self.value[j].abs()).sum();
        if infeasibility > 1e-7 * (self.n as f64).max(1.0) {
            return Err(Error::NoConvergence {
                iterations,
                best_objective: f64::NAN,
                gap: infeasibility,
            });
        }
        for j in art..self.value.len() {
            self.upper[j] = 0.0;
            if !self.is_basic[j] {
                self.value[j] = 0.0;
            }
        }
        let pi = self.run(Phase::Optimality, max_iter, &mut iterations)?;
        Ok(self.extract(pi, iterations))
    }

    /// Runs the simplex loop for one phase and returns the final multipliers.
    fn run(&mut self, phase: Phase, max_iter: usize, iterations: &mut usize) -> Result<Vec<f64>> {
        let m = self.m;
        let total = self.value.len();
        let tol = match phase {
            Phase::Feasibility => 1e-11,
            Phase::Optimality => self.cost_tol,
        };
        let mut degenerate_run = 0usize;
        let mut col = vec![0.0; m];
        loop {
            let b = self.basis_matrix();
            let lu = b.clone().lu();
            self.refresh_basic(&lu);
            let cb = DVector::from_iterator(m, self.basis.iter().map(|&j| self.phase_cost(phase, j)));
            let pi = b
                .transpose()
                .lu()
                .solve(&cb)
                .ok_or_else(|| Error::SingularFit("simplex basis became singular".into()))?;
            let pi: Vec<f64> = pi.iter().copied().collect();

            let bland = degenerate_run >= DEGENERATE_SWITCH;
            let mut entering: Option<(usize, f64, f64)> = None; // (index, reduced cost, direction)
            for j in 0..total {
                if self.is_basic[j] || self.upper[j] <= self.lower[j] {
                    continue;
                }
                let d = self.phase_cost(phase, j) - self.price(j, &pi);
                let at_upper = self.value[j] >= self.upper[j];
                let dir = if !at_upper && d < -tol {
                    1.0
                } else if at_upper && d > tol {
                    -1.0
                } else {
                    continue;
                };
                if bland {
                    entering = Some((j, d, dir));
                    break;
                }
                if entering.is_none_or(|(_, best, _)| d.abs() > best.abs()) {
                    entering = Some((j, d, dir));
                }
            }
            let Some((q, _, dir)) = entering else {
                return Ok(pi);
            };

            *iterations += 1;
            if *iterations > max_iter {
                let objective = self.current_objective();
                return Err(Error::NoConvergence {
                    iterations: *iterations,
                    best_objective: objective,
                    gap: f64::NAN,
                });
            }

            self.column(q, &mut col);
            let w = lu
                .solve(&DVector::from_column_slice(&col))
                .ok_or_else(|| Error::SingularFit("simplex basis became singular".into()))?;

            // entering moves by dir·θ; basic k moves by −dir·θ·w_k
            let mut theta = self.upper[q] - self.lower[q];
            let mut leaving: Option<(usize, f64)> = None; // (basis slot, bound value)
            let mut best_pivot = 0.0;
            for k in 0..m {
                let rate = -dir * w[k];
                if rate.abs() <= PIVOT_TOL {
                    continue;
                }
                let j = self.basis[k];
                let (limit, bound) = if rate > 0.0 {
                    ((self.upper[j] - self.value[j]) / rate, self.upper[j])
                } else {
                    ((self.lower[j] - self.value[j]) / rate, self.lower[j])
                };
                let limit = limit.max(0.0);
                let better = if limit < theta - 1e-12 {
                    true
                } else if limit <= theta + 1e-12 {
                    match leaving {
                        None => true,
                        Some((slot, _)) => {
                            if bland {
                                j < self.basis[slot]
                            } else {
                                w[k].abs() > best_pivot
                            }
                        }
                    }
                } else {
                    false
                };
                if better {
                    theta = theta.min(limit);
                    leaving = Some((k, bound));
                    best_pivot = w[k].abs();
                }
            }
            if !theta.is_finite() {
                return Err(Error::NoConvergence {
                    iterations: *iterations,
                    best_objective: f64::NEG_INFINITY,
                    gap: f64::INFINITY,
                });
            }

            if theta <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            match leaving {
                Some((k, bound)) if theta < self.upper[q] - self.lower[q] || self.upper[q].is_infinite() => {
                    let old = self.basis[k];
                    self.value[q] += dir * theta;
                    self.value[old] = bound;
                    self.is_basic[old] = false;
                    self.is_basic[q] = true;
                    self.basis[k] = q;
                }
                _ => {
                    // bound flip, basis unchanged
                    self.value[q] = if dir > 0.0 { self.upper[q] } else { self.lower[q] };
                }
            }
        }
    }

    fn current_objective(&self) -> f64 {
        (0..self.n).map(|i| self.value[i] * self.y[i]).sum()
    }

    fn extract(&self, pi: Vec<f64>, iterations: usize) -> DualSolution {
        let (n, p) = (self.n, self.p);
        let intercept = -pi[0];
        let slopes = (0..p)
            .map(|j| if self.is_basic[n + j] { 0.0 } else { -pi[j + 1] })
            .collect();
        let weights = (0..n)
            .map(|i| self.value[i].clamp(self.lower[i], self.upper[i]))
            .collect();
        DualSolution {
            intercept,
            slopes,
            weights,
            dual_objective: self.current_objective(),
            iterations,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower sample `τ`-quantile, an exact minimizer of the intercept-only
/// pinball objective.
pub(crate) fn sample_quantile(y: &[f64], tau: f64) -> f64 {
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let k = ((tau * n as f64).ceil() as usize).clamp(1, n);
    s[k - 1]
}
