//! Curve representation: least-squares fits of raw series onto a shared
//! B-spline basis, grid evaluation of curves and their derivatives, and
//! pointwise descriptive statistics.
//!
//! A curve observed only up to some day before the end of the common domain
//! is fitted with the basis functions its observations support. Grid values
//! past its last observed day are reported as `NaN` (missing) and are skipped
//! by every pointwise statistic.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};

/// Basis functions whose largest value over the observed times falls below
/// this are left out of an unpenalized fit.
const MIN_SUPPORT_VALUE: f64 = 1e-3;
/// Relative threshold on the triangular factor diagonal for rank detection.
const RANK_TOL: f64 = 1e-10;
/// Slack when comparing a grid point against a curve's last observed time.
const OBSERVED_SLACK: f64 = 1e-9;

/// An irregularly sampled series, e.g. cumulative deaths per 100k by epidemic day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCurve {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl RawCurve {
    pub fn new(id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if times.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: values.len(),
            });
        }
        if times.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "curve {id} has {} observations, need at least 2",
                times.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig(format!(
                "curve {id}: times must be strictly increasing"
            )));
        }
        if values.iter().chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "curve {id}: non-finite observation"
            )));
        }
        Ok(RawCurve { id, times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// One functional datum: coefficients over a shared basis, valid up to
/// `observed_hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedCurve {
    pub id: String,
    pub basis: Arc<BasisSystem>,
    pub coefficients: Vec<f64>,
    pub observed_hi: f64,
}

impl SmoothedCurve {
    pub fn new(
        id: impl Into<String>,
        basis: Arc<BasisSystem>,
        coefficients: Vec<f64>,
    ) -> Result<Self> {
        if coefficients.len() != basis.num_basis() {
            return Err(Error::DimensionMismatch {
                expected: basis.num_basis(),
                got: coefficients.len(),
            });
        }
        let observed_hi = basis.domain().1;
        Ok(SmoothedCurve {
            id: id.into(),
            basis,
            coefficients,
            observed_hi,
        })
    }

    pub fn with_observed_hi(mut self, observed_hi: f64) -> Self {
        self.observed_hi = observed_hi.min(self.basis.domain().1);
        self
    }

    /// `ωᵀφ(t)`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let phi = self.basis.eval(t)?;
        Ok(dot(&self.coefficients, &phi))
    }

    /// `ωᵀD^ell φ(t)`.
    pub fn eval_deriv(&self, t: f64, ell: usize) -> Result<f64> {
        let (first, local) = self.basis.eval_deriv_local(t, ell)?;
        Ok(dot(&self.coefficients[first..first + local.len()], &local))
    }

    /// `ell`-th derivative at every grid point, ignoring the observed range.
    pub fn derivative_values(&self, ell: usize, grid: &[f64]) -> Result<Vec<f64>> {
        grid.iter().map(|&t| self.eval_deriv(t, ell)).collect()
    }

    /// Like [`SmoothedCurve::derivative_values`] but `NaN` past `observed_hi`.
    pub fn masked_values(&self, ell: usize, grid: &[f64]) -> Result<Vec<f64>> {
        grid.iter()
            .map(|&t| {
                if self.is_observed(t) {
                    self.eval_deriv(t, ell)
                } else {
                    Ok(f64::NAN)
                }
            })
            .collect()
    }

    pub fn is_observed(&self, t: f64) -> bool {
        t <= self.observed_hi + OBSERVED_SLACK
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smoothing parameter policy for the roughness penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Smoothing {
    /// Fixed `lambda_s` (0 = plain least squares).
    Fixed(f64),
    /// Generalized cross-validation over `10^-6 ..= 10^6` in decade steps.
    Gcv,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Fixed(0.0)
    }
}

/// A fitted curve plus its fit diagnostics.
#[derive(Debug, Clone)]
pub struct CurveFit {
    pub curve: SmoothedCurve,
    pub rss: f64,
    pub rmse: f64,
    pub lambda: f64,
    pub n_points: usize,
}

/// Fits raw series onto one basis; caches the square root of the roughness
/// matrix so a panel shares one eigendecomposition.
#[derive(Debug, Clone)]
pub struct CurveFitter {
    basis: Arc<BasisSystem>,
    roughness: Option<DMatrix<f64>>,
    penalty_root: Option<DMatrix<f64>>,
}

impl CurveFitter {
    pub fn new(basis: Arc<BasisSystem>) -> Self {
        CurveFitter {
            basis,
            roughness: None,
            penalty_root: None,
        }
    }

    /// Prepares the penalty factors; needed before any fit with `lambda_s > 0`.
    pub fn with_penalty(mut self) -> Result<Self> {
        let r = self.basis.roughness_matrix()?;
        let eig = r.clone().symmetric_eigen();
        let scale = eig.eigenvalues.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
        let rows: Vec<_> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > 1e-13 * scale)
            .map(|i| eig.eigenvectors.column(i).transpose() * eig.eigenvalues[i].sqrt())
            .collect();
        let k = self.basis.num_basis();
        let mut root = DMatrix::zeros(rows.len(), k);
        for (i, row) in rows.iter().enumerate() {
            root.row_mut(i).copy_from(row);
        }
        self.roughness = Some(r);
        self.penalty_root = Some(root);
        Ok(self)
    }

    pub fn basis(&self) -> &Arc<BasisSystem> {
        &self.basis
    }

    /// Penalized least-squares fit, `argmin ||y − Φω||² + λ ωᵀRω`.
    pub fn fit(&self, raw: &RawCurve, lambda_s: f64) -> Result<CurveFit> {
        if !(lambda_s >= 0.0 && lambda_s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "smoothing parameter must be finite and nonnegative, got {lambda_s}"
            )));
        }
        let (lo, hi) = self.basis.domain();
        if let Some(&t) = raw.times.iter().find(|&&t| t < lo || t > hi) {
            return Err(Error::OutOfDomain { t, lo, hi });
        }
        let phi = self.basis.collocation(&raw.times, 0)?;
        let k = self.basis.num_basis();
        let n = raw.len();
        let y = DVector::from_column_slice(&raw.values);

        let coefficients = if lambda_s == 0.0 {
            let active: Vec<usize> = (0..k)
                .filter(|&j| phi.column(j).iter().any(|&v| v >= MIN_SUPPORT_VALUE))
                .collect();
            if n < active.len() {
                return Err(Error::InsufficientData(format!(
                    "curve {} has {n} observations but {} basis functions are active; \
                     use a roughness penalty or fewer basis functions",
                    raw.id,
                    active.len()
                )));
            }
            let sub = phi.select_columns(&active);
            let sol = solve_least_squares(sub, &y).map_err(|_| {
                Error::SingularFit(format!(
                    "curve {}: design is rank deficient; try a positive smoothing penalty",
                    raw.id
                ))
            })?;
            let mut w = vec![0.0; k];
            for (&j, v) in active.iter().zip(sol.iter()) {
                w[j] = *v;
            }
            w
        } else {
            let root = self.penalty_root.as_ref().ok_or_else(|| {
                Error::InvalidConfig("fitter was built without a roughness penalty".into())
            })?;
            let m = root.nrows();
            let mut aug = DMatrix::zeros(n + m, k);
            aug.rows_mut(0, n).copy_from(&phi);
            aug.rows_mut(n, m).copy_from(&(root * lambda_s.sqrt()));
            let mut rhs = DVector::zeros(n + m);
            rhs.rows_mut(0, n).copy_from(&y);
            solve_least_squares(aug, &rhs)
                .map_err(|_| {
                    Error::SingularFit(format!("curve {}: penalized system is singular", raw.id))
                })?
                .iter()
                .copied()
                .collect()
        };

        let fitted = &phi * DVector::from_column_slice(&coefficients);
        let rss = (&y - fitted).norm_squared();
        let curve = SmoothedCurve::new(raw.id.clone(), self.basis.clone(), coefficients)?
            .with_observed_hi(raw.last_time());
        Ok(CurveFit {
            curve,
            rss,
            rmse: (rss / n as f64).sqrt(),
            lambda: lambda_s,
            n_points: n,
        })
    }

    /// Chooses `lambda_s` by generalized cross-validation, then fits.
    pub fn fit_gcv(&self, raw: &RawCurve) -> Result<CurveFit> {
        let r = self.roughness.as_ref().ok_or_else(|| {
            Error::InvalidConfig("fitter was built without a roughness penalty".into())
        })?;
        let phi = self.basis.collocation(&raw.times, 0)?;
        let gram = phi.transpose() * &phi;
        let n = raw.len() as f64;
        let mut best: Option<(f64, f64)> = None;
        for e in -6..=6 {
            let lambda = 10f64.powi(e);
            let a = &gram + r * lambda;
            let Some(chol) = a.cholesky() else { continue };
            let edf = chol.solve(&gram).trace();
            if n - edf <= 0.0 {
                continue;
            }
            let Ok(fit) = self.fit(raw, lambda) else {
                continue;
            };
            let gcv = n * fit.rss / (n - edf).powi(2);
            if best.is_none_or(|(_, g)| gcv < g) {
                best = Some((lambda, gcv));
            }
        }
        let (lambda, _) = best.ok_or_else(|| {
            Error::SingularFit(format!("curve {}: no admissible GCV penalty", raw.id))
        })?;
        self.fit(raw, lambda)
    }

    pub fn fit_with(&self, raw: &RawCurve, smoothing: Smoothing) -> Result<CurveFit> {
        match smoothing {
            Smoothing::Fixed(lambda) => self.fit(raw, lambda),
            Smoothing::Gcv => self.fit_gcv(raw),
        }
    }
}

/// Least squares through a Householder QR, refusing rank-deficient systems.
pub(crate) fn solve_least_squares(a: DMatrix<f64>, b: &DVector<f64>) -> std::result::Result<DVector<f64>, usize> {
    let (rows, cols) = a.shape();
    if rows < cols {
        return Err(cols);
    }
    let qr = a.qr();
    let r = qr.r();
    let scale = (0..cols).fold(0.0f64, |m, i| m.max(r[(i, i)].abs()));
    if let Some(bad) = (0..cols).find(|&i| r[(i, i)].abs() <= RANK_TOL * scale || scale == 0.0) {
        return Err(bad);
    }
    let qtb = qr.q().transpose() * b;
    let upper = r.rows(0, cols).into_owned();
    upper
        .solve_upper_triangular(&qtb.rows(0, cols).into_owned())
        .ok_or(cols)
}

/// Convenience wrapper: fit one curve with a fresh fitter.
pub fn fit_curve(raw: &RawCurve, basis: Arc<BasisSystem>, lambda_s: f64) -> Result<CurveFit> {
    let fitter = CurveFitter::new(basis);
    let fitter = if lambda_s > 0.0 {
        fitter.with_penalty()?
    } else {
        fitter
    };
    fitter.fit(raw, lambda_s)
}

/// Curves on a common basis together with the evaluation grid.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    pub basis: Arc<BasisSystem>,
    pub curves: Vec<SmoothedCurve>,
    pub grid: Vec<f64>,
}

impl FunctionalDataset {
    pub fn new(basis: Arc<BasisSystem>, curves: Vec<SmoothedCurve>, grid: Vec<f64>) -> Result<Self> {
        if grid.len() < basis.num_basis() {
            return Err(Error::InvalidConfig(format!(
                "grid of {} points is smaller than the basis size {}",
                grid.len(),
                basis.num_basis()
            )));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) || !grid.iter().all(|&t| basis.contains(t)) {
            return Err(Error::InvalidConfig(
                "grid must be strictly increasing and inside the basis domain".into(),
            ));
        }
        if let Some(c) = curves.iter().find(|c| c.basis != basis) {
            return Err(Error::InvalidConfig(format!(
                "curve {} does not share the dataset basis",
                c.id
            )));
        }
        Ok(FunctionalDataset {
            basis,
            curves,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.curves.iter().map(|c| c.id.as_str()).collect()
    }

    /// Masked grid values of every curve's `ell`-th derivative, one row per curve.
    pub fn grid_values(&self, ell: usize) -> Result<Vec<Vec<f64>>> {
        self.curves
            .par_iter()
            .map(|c| c.masked_values(ell, &self.grid))
            .collect()
    }
}

/// Settings for [`fit_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothConfig {
    pub num_basis: usize,
    pub order: usize,
    pub grid_points: usize,
    pub smoothing: Smoothing,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            num_basis: 20,
            order: 4,
            grid_points: 300,
            smoothing: Smoothing::Fixed(0.0),
        }
    }
}

/// Per-curve outcome of a dataset fit.
#[derive(Debug, Clone, Serialize)]
pub struct CurveReport {
    pub id: String,
    pub n_points: usize,
    pub rss: f64,
    pub rmse: f64,
    pub lambda: f64,
}

#[derive(Debug)]
pub struct DatasetFit {
    pub dataset: FunctionalDataset,
    pub reports: Vec<CurveReport>,
    pub failures: Vec<(String, Error)>,
}

/// Fits every raw curve on a basis spanning all observed times.
pub fn fit_dataset(raws: &[RawCurve], config: &SmoothConfig) -> Result<DatasetFit> {
    if raws.is_empty() {
        return Err(Error::Empty("no curves to fit".into()));
    }
    let lo = raws.iter().map(|r| r.times[0]).fold(f64::INFINITY, f64::min).min(0.0);
    let hi = raws.iter().map(RawCurve::last_time).fold(f64::NEG_INFINITY, f64::max);
    let basis = Arc::new(BasisSystem::new(lo, hi, config.num_basis, config.order)?);
    let grid = basis.uniform_grid(config.grid_points)?;
    let fitter = CurveFitter::new(basis.clone());
    let fitter = match config.smoothing {
        Smoothing::Fixed(0.0) => fitter,
        _ => fitter.with_penalty()?,
    };

    let outcomes: Vec<_> = raws
        .par_iter()
        .map(|raw| (raw.id.clone(), fitter.fit_with(raw, config.smoothing)))
        .collect();

    let mut curves = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(fit) => {
                reports.push(CurveReport {
                    id,
                    n_points: fit.n_points,
                    rss: fit.rss,
                    rmse: fit.rmse,
                    lambda: fit.lambda,
                });
                curves.push(fit.curve);
            }
            Err(e) => failures.push((id, e)),
        }
    }
    if curves.is_empty() {
        let detail = failures
            .first()
            .map(|(id, e)| format!("{id}: {e}"))
            .unwrap_or_default();
        return Err(Error::InsufficientData(format!(
            "no curve could be fitted ({detail})"
        )));
    }
    Ok(DatasetFit {
        dataset: FunctionalDataset::new(basis, curves, grid)?,
        reports,
        failures,
    })
}

/// Coefficient-wise mean curve. Valid up to the shortest member's last
/// observed time.
pub fn functional_mean(ds: &FunctionalDataset) -> Result<SmoothedCurve> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Empty("functional mean of an empty dataset".into()));
    }
    let k = ds.basis.num_basis();
    let mut mean = vec![0.0; k];
    for c in &ds.curves {
        for (m, w) in mean.iter_mut().zip(&c.coefficients) {
            *m += w;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let observed_hi = ds
        .curves
        .iter()
        .map(|c| c.observed_hi)
        .fold(f64::INFINITY, f64::min);
    Ok(SmoothedCurve::new("mean", ds.basis.clone(), mean)?.with_observed_hi(observed_hi))
}

/// Mean over the curves observed at each grid point (`NaN` where none are).
pub fn pointwise_mean(values: &[Vec<f64>]) -> Vec<f64> {
    let g = values.first().map_or(0, Vec::len);
    (0..g)
        .map(|j| {
            let (sum, count) = values
                .iter()
                .map(|row| row[j])
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                f64::NAN
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Sample standard deviation (denominator n − 1) of the curves at every grid
/// point, over the curves observed there.
pub fn functional_sd(ds: &FunctionalDataset) -> Result<Vec<f64>> {
    if ds.len() < 2 {
        return Err(Error::InsufficientData(
            "standard deviation needs at least two curves".into(),
        ));
    }
    let values = ds.grid_values(0)?;
    let means = pointwise_mean(&values);
    Ok(means
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let (ss, count) = values
                .iter()
                .map(|row| row[j])
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, c), v| (s + (v - m).powi(2), c + 1));
            if count < 2 {
                f64::NAN
            } else {
                (ss / (count - 1) as f64).sqrt()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn basis(k: usize) -> Arc<BasisSystem> {
        Arc::new(BasisSystem::cubic(0.0, 100.0, k).unwrap())
    }

    #[test]
    fn raw_curve_validation() {
        assert!(RawCurve::new("a", vec![0.0], vec![1.0]).is_err());
        assert!(RawCurve::new("a", vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(RawCurve::new("a", vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(RawCurve::new("a", vec![0.0, 1.0], vec![1.0, 0.5]).is_ok());
    }

    #[test]
    fn ones_evaluate_to_one() {
        let b = basis(8);
        let c = SmoothedCurve::new("x", b, vec![1.0; 8]).unwrap();
        for &t in &[0.0, 12.5, 50.0, 99.0, 100.0] {
            assert_abs_diff_eq!(c.eval(t).unwrap(), 1.0, epsilon = 1e-14);
        }
        assert!(c.eval(101.0).is_err());
    }

    #[test]
    fn first_unit_vector_at_left_end() {
        let mut w = vec![0.0; 8];
        w[0] = 1.0;
        let c = SmoothedCurve::new("x", basis(8), w).unwrap();
        assert_eq!(c.eval(0.0).unwrap(), 1.0);
    }

    #[test]
    fn too_few_points_without_penalty() {
        let raw = RawCurve::new("short", vec![0.0, 50.0, 100.0], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            fit_curve(&raw, basis(8), 0.0),
            Err(Error::InsufficientData(_))
        ));
        // the penalty identifies the affine part from three points
        let fit = fit_curve(&raw, basis(8), 1.0).unwrap();
        assert_abs_diff_eq!(fit.curve.eval(50.0).unwrap(), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn short_curve_is_masked_past_last_day() {
        let times: Vec<f64> = (0..=60).map(f64::from).collect();
        let values: Vec<f64> = times.iter().map(|t| 0.5 * t).collect();
        let raw = RawCurve::new("s", times, values).unwrap();
        let fit = fit_curve(&raw, basis(10), 0.0).unwrap();
        assert_eq!(fit.curve.observed_hi, 60.0);
        let grid = [0.0, 30.0, 60.0, 61.0, 100.0];
        let v = fit.curve.masked_values(0, &grid).unwrap();
        assert_abs_diff_eq!(v[1], 15.0, epsilon = 1e-8);
        assert!(v[3].is_nan() && v[4].is_nan());
    }

    #[test]
    fn dataset_collects_per_curve_failures() {
        let good: Vec<RawCurve> = (0..3)
            .map(|i| {
                let t: Vec<f64> = (0..=100).map(f64::from).collect();
                let y = t.iter().map(|x| x * (i + 1) as f64).collect();
                RawCurve::new(format!("c{i}"), t, y).unwrap()
            })
            .collect();
        let mut raws = good;
        raws.push(RawCurve::new("tiny", vec![0.0, 50.0, 100.0], vec![0.0, 1.0, 2.0]).unwrap());
        let cfg = SmoothConfig {
            num_basis: 8,
            grid_points: 50,
            ..Default::default()
        };
        let fit = fit_dataset(&raws, &cfg).unwrap();
        assert_eq!(fit.dataset.len(), 3);
        assert_eq!(fit.failures.len(), 1);
        assert_eq!(fit.failures[0].0, "tiny");
    }

    #[test]
    fn sd_of_constant_shift() {
        let b = basis(6);
        let grid = b.uniform_grid(20).unwrap();
        let c1 = SmoothedCurve::new("a", b.clone(), vec![1.0, 2.0, 0.0, 4.0, 1.0, 3.0]).unwrap();
        let c2 = SmoothedCurve::new("b", b.clone(), vec![4.0, 5.0, 3.0, 7.0, 4.0, 6.0]).unwrap();
        let ds = FunctionalDataset::new(b, vec![c1, c2], grid).unwrap();
        for s in functional_sd(&ds).unwrap() {
            assert_abs_diff_eq!(s, 3.0 / 2f64.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn sd_needs_two_curves_and_mean_needs_one() {
        let b = basis(6);
        let grid = b.uniform_grid(10).unwrap();
        let ds = FunctionalDataset::new(b.clone(), vec![], grid.clone()).unwrap();
        assert!(functional_mean(&ds).is_err());
        let one = SmoothedCurve::new("a", b.clone(), vec![1.0; 6]).unwrap();
        let ds = FunctionalDataset::new(b, vec![one.clone()], grid).unwrap();
        assert!(functional_sd(&ds).is_err());
        assert_eq!(functional_mean(&ds).unwrap().coefficients, one.coefficients);
    }
}
