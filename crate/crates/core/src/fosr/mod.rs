//! Function-on-scalar regression.
//!
//! Both estimators are two-step: an independent regression of the curve
//! values on the covariates at every grid time, then a least-squares fit of
//! each coefficient path onto the B-spline basis. The mean model uses
//! ordinary least squares; the quantile model minimizes the pinball loss
//! with an L1 penalty on the (standardized) slopes.

mod quantile;
mod simplex;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use quantile::{
    certify, intercept_only, lambda_max, pinball_loss, pointwise_qr_lasso, qr_lasso_objective,
    solve_qr_lasso, Certificate, PointwiseFit, CERTIFICATE_TOL,
};

use crate::basis::BasisSystem;
use crate::cluster::ClusterModel;
use crate::curve::{solve_least_squares, CurveFitter, FunctionalDataset, RawCurve, SmoothedCurve};
use crate::error::{Error, Result};
use quantile::{check_tau, pinball};

/// Per-column z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: raw.len(),
            });
        }
        Ok(raw
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: z.len(),
            });
        }
        Ok(z.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }
}

/// Standardized covariates, one row per curve id. The intercept is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    ids: Vec<String>,
    standardization: Standardization,
    data: Vec<f64>,
}

impl DesignMatrix {
    /// Z-scores each column (sample sd, denominator n − 1).
    pub fn standardize(ids: Vec<String>, names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = names.len();
        if ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: ids.len(),
            });
        }
        if let Some(r) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: r.len(),
            });
        }
        if n < 2 && p > 0 {
            return Err(Error::InsufficientData(
                "standardization needs at least two rows".into(),
            ));
        }
        let mut means = vec![0.0; p];
        let mut sds = vec![0.0; p];
        for j in 0..p {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            if !(sd > 1e-12 * mean.abs().max(1.0)) || !sd.is_finite() {
                return Err(Error::ConstantColumn(names[j].clone()));
            }
            means[j] = mean;
            sds[j] = sd;
        }
        let standardization = Standardization { names, means, sds };
        let mut data = Vec::with_capacity(n * p);
        for r in rows {
            data.extend(standardization.apply(r)?);
        }
        Ok(DesignMatrix {
            ids,
            standardization,
            data,
        })
    }

    /// Wraps covariates that are already standardized.
    pub fn from_standardized(
        ids: Vec<String>,
        standardization: Standardization,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != ids.len() * standardization.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * standardization.len(),
                got: data.len(),
            });
        }
        Ok(DesignMatrix {
            ids,
            standardization,
            data,
        })
    }

    pub fn nrows(&self) -> usize {
        self.ids.len()
    }

    pub fn ncols(&self) -> usize {
        self.standardization.len()
    }

    /// Row-major `n × p` standardized values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.standardization.names
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    /// Raw (unstandardized) covariates of row `i`.
    pub fn raw_row(&self, i: usize) -> Vec<f64> {
        self.standardization.invert(self.row(i)).unwrap()
    }

    fn gather(&self, rows: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * self.ncols());
        for &i in rows {
            out.extend_from_slice(self.row(i));
        }
        out
    }
}

/// Intercept and slopes of a least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

/// Least squares with an intercept.
pub fn pointwise_ols(y: &[f64], x: &DesignMatrix) -> Result<OlsFit> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    ols_slices(y, x.data(), x.ncols(), x.names())
}

fn ols_slices(y: &[f64], x: &[f64], p: usize, names: &[String]) -> Result<OlsFit> {
    let n = y.len();
    if n <= p + 1 {
        return Err(Error::InsufficientData(format!(
            "least squares with {p} covariates needs more than {} rows, got {n}",
            p + 1
        )));
    }
    let mut a = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        a[(i, 0)] = 1.0;
        for j in 0..p {
            a[(i, j + 1)] = x[i * p + j];
        }
    }
    let b = DVector::from_column_slice(y);
    match solve_least_squares(a, &b) {
        Ok(sol) => Ok(OlsFit {
            intercept: sol[0],
            slopes: sol.iter().skip(1).copied().collect(),
        }),
        Err(col) => {
            let mut named = vec!["intercept".to_string()];
            named.extend(names.iter().cloned());
            let culprit = named.get(col).cloned().unwrap_or_else(|| format!("column {col}"));
            let prior: Vec<String> = named[..col.min(named.len())].to_vec();
            let mut listed = vec![culprit];
            listed.push(format!("(dependent on: {})", prior.join(", ")));
            Err(Error::Collinear(listed))
        }
    }
}

/// Coefficient functions `β_j(t)`, `j = 0..=p`, with the covariate scaling
/// needed to evaluate predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFunctions {
    pub basis: Arc<BasisSystem>,
    /// `curves[0]` is the intercept.
    pub curves: Vec<SmoothedCurve>,
    pub standardization: Standardization,
    /// RMS deviation of each smoothed curve from its pointwise path.
    pub smoothing_residual: Vec<f64>,
}

impl CoefficientFunctions {
    pub fn num_covariates(&self) -> usize {
        self.curves.len() - 1
    }

    /// Prediction for standardized covariates; `NaN` where a coefficient
    /// curve is not defined.
    pub fn predict_standardized(&self, z: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.num_covariates() {
            return Err(Error::DimensionMismatch {
                expected: self.num_covariates(),
                got: z.len(),
            });
        }
        let paths = self.paths(grid)?;
        Ok(recompose(&paths, z))
    }

    /// Masked grid values of every coefficient curve.
    pub fn paths(&self, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.curves.iter().map(|c| c.masked_values(0, grid)).collect()
    }
}

fn recompose(paths: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let g = paths[0].len();
    (0..g)
        .map(|t| {
            paths[0][t]
                + z.iter()
                    .zip(&paths[1..])
                    .map(|(zj, path)| zj * path[t])
                    .sum::<f64>()
        })
        .collect()
}

/// Function-on-scalar quantile regression fit at one quantile level.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFitModel {
    pub tau: f64,
    pub lambda: f64,
    pub coefficients: CoefficientFunctions,
    pub pointwise: Vec<PointwiseFit>,
    /// Grid indices without a pointwise solve.
    pub skipped: Vec<usize>,
}

impl QuantileFitModel {
    /// Covariates with a nonzero slope at some grid point.
    pub fn active_covariates(&self) -> Vec<usize> {
        let p = self.coefficients.num_covariates();
        (0..p)
            .filter(|&j| self.pointwise.iter().any(|f| f.slopes[j] != 0.0))
            .collect()
    }
}

/// Pointwise-OLS functional linear model used as the comparator.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFitModel {
    pub coefficients: CoefficientFunctions,
    pub pointwise: Vec<(usize, OlsFit)>,
    pub skipped: Vec<usize>,
}

/// Either regression model; both predict a curve from raw covariates.
pub trait CurvePredictor {
    fn coefficient_functions(&self) -> &CoefficientFunctions;

    /// `β₀(t) + Σ z_j β_j(t)` with `z` the model-standardized `x`.
    fn predict(&self, x_raw: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
        let coef = self.coefficient_functions();
        let z = coef.standardization.apply(x_raw)?;
        coef.predict_standardized(&z, grid)
    }
}

impl CurvePredictor for QuantileFitModel {
    fn coefficient_functions(&self) -> &CoefficientFunctions {
        &self.coefficients
    }
}

impl CurvePredictor for MeanFitModel {
    fn coefficient_functions(&self) -> &CoefficientFunctions {
        &self.coefficients
    }
}

/// Predicted quantile curve for raw covariates `x`.
pub fn predict_curve(model: &impl CurvePredictor, x: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    model.predict(x, grid)
}

/// Smooths pointwise coefficient paths onto `basis`. `points[k]` is the grid
/// time of `paths[·][k]`.
pub fn smooth_paths(
    points: &[f64],
    paths: &[Vec<f64>],
    basis: Arc<BasisSystem>,
) -> Result<(Vec<SmoothedCurve>, Vec<f64>)> {
    let fitter = CurveFitter::new(basis);
    let mut curves = Vec::with_capacity(paths.len());
    let mut residuals = Vec::with_capacity(paths.len());
    for (j, path) in paths.iter().enumerate() {
        let raw = RawCurve::new(format!("beta_{j}"), points.to_vec(), path.clone())?;
        let fit = fitter.fit(&raw, 0.0)?;
        residuals.push(fit.rmse);
        curves.push(fit.curve);
    }
    Ok((curves, residuals))
}

/// Smooths the coefficient paths of a set of pointwise fits.
pub fn smooth_coefficients(
    pointwise: &[PointwiseFit],
    grid: &[f64],
    basis: Arc<BasisSystem>,
) -> Result<(Vec<SmoothedCurve>, Vec<f64>)> {
    let Some(first) = pointwise.first() else {
        return Err(Error::Empty("no pointwise fits to smooth".into()));
    };
    let p = first.slopes.len();
    let mut points = Vec::with_capacity(pointwise.len());
    let mut paths = vec![Vec::with_capacity(pointwise.len()); p + 1];
    for f in pointwise {
        let t = *grid.get(f.grid_index).ok_or(Error::DimensionMismatch {
            expected: grid.len(),
            got: f.grid_index + 1,
        })?;
        points.push(t);
        paths[0].push(f.intercept);
        for j in 0..p {
            paths[j + 1].push(f.slopes[j]);
        }
    }
    smooth_paths(&points, &paths, basis)
}

/// Options shared by the functional regression fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionOptions {
    /// Largest tolerated fraction of grid points without a pointwise fit.
    pub max_skip_fraction: f64,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        RegressionOptions {
            max_skip_fraction: 0.10,
        }
    }
}

/// Design rows matched to the dataset's curves, in dataset order.
fn align_rows(ds: &FunctionalDataset, x: &DesignMatrix) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = x.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut missing = Vec::new();
    let rows: Vec<usize> = ds
        .curves
        .iter()
        .filter_map(|c| match index.get(c.id.as_str()) {
            Some(&i) => Some(i),
            None => {
                missing.push(c.id.clone());
                None
            }
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    Ok(rows)
}

struct PointData {
    y: Vec<f64>,
    x: Vec<f64>,
}

/// Responses and covariates of the curves observed at grid index `g`.
fn point_data(values: &[Vec<f64>], rows: &[usize], x: &DesignMatrix, g: usize, subset: Option<&[usize]>) -> PointData {
    let members: Box<dyn Iterator<Item = usize>> = match subset {
        Some(s) => Box::new(s.iter().copied()),
        None => Box::new(0..values.len()),
    };
    let mut y = Vec::new();
    let mut idx = Vec::new();
    for c in members {
        let v = values[c][g];
        if !v.is_nan() {
            y.push(v);
            idx.push(rows[c]);
        }
    }
    PointData { y, x: x.gather(&idx) }
}

/// OLS start shifted so the residual `τ`-quantile is zero.
fn warm_start(data: &PointData, p: usize, tau: f64) -> Option<Vec<f64>> {
    let ols = ols_slices(&data.y, &data.x, p, &[]).ok()?;
    let resid: Vec<f64> = (0..data.y.len())
        .map(|i| {
            data.y[i]
                - ols.intercept
                - ols.slopes.iter().zip(&data.x[i * p..(i + 1) * p]).map(|(b, v)| b * v).sum::<f64>()
        })
        .collect();
    let shift = simplex::sample_quantile(&resid, tau);
    let mut start = vec![ols.intercept + shift];
    start.extend(ols.slopes);
    Some(start)
}

fn check_skips(skipped: usize, total: usize, opts: &RegressionOptions) -> Result<()> {
    if skipped == total {
        return Err(Error::InsufficientData(
            "no grid point has enough observed curves for the regression".into(),
        ));
    }
    if skipped as f64 > opts.max_skip_fraction * total as f64 {
        return Err(Error::InsufficientData(format!(
            "{skipped} of {total} grid points could not be fitted (limit {:.0}%)",
            100.0 * opts.max_skip_fraction
        )));
    }
    Ok(())
}

/// Two-step function-on-scalar quantile regression at level `tau`.
pub fn fit_fosqr(
    ds: &FunctionalDataset,
    x: &DesignMatrix,
    tau: f64,
    lambda: f64,
    opts: &RegressionOptions,
) -> Result<QuantileFitModel> {
    check_tau(tau)?;
    let rows = align_rows(ds, x)?;
    let values = ds.grid_values(0)?;
    let p = x.ncols();
    let outcomes: Vec<Option<PointwiseFit>> = (0..ds.grid.len())
        .into_par_iter()
        .map(|g| {
            let data = point_data(&values, &rows, x, g, None);
            if data.y.len() < p + 2 {
                return None;
            }
            let warm = warm_start(&data, p, tau);
            match solve_qr_lasso(&data.y, &data.x, p, tau, lambda, warm.as_deref()) {
                Ok(mut fit) => {
                    fit.grid_index = g;
                    Some(fit)
                }
                Err(e) => {
                    log::warn!("quantile fit failed at grid point {g}: {e}");
                    None
                }
            }
        })
        .collect();
    let skipped: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(g, o)| o.is_none().then_some(g))
        .collect();
    check_skips(skipped.len(), ds.grid.len(), opts)?;
    let pointwise: Vec<PointwiseFit> = outcomes.into_iter().flatten().collect();
    let (curves, smoothing_residual) = smooth_coefficients(&pointwise, &ds.grid, ds.basis.clone())?;
    Ok(QuantileFitModel {
        tau,
        lambda,
        coefficients: CoefficientFunctions {
            basis: ds.basis.clone(),
            curves,
            standardization: x.standardization().clone(),
            smoothing_residual,
        },
        pointwise,
        skipped,
    })
}

/// Two-step functional linear model (pointwise OLS, then smoothing).
pub fn fit_flm(ds: &FunctionalDataset, x: &DesignMatrix, opts: &RegressionOptions) -> Result<MeanFitModel> {
    let rows = align_rows(ds, x)?;
    let values = ds.grid_values(0)?;
    let p = x.ncols();
    let outcomes: Vec<Option<OlsFit>> = (0..ds.grid.len())
        .into_par_iter()
        .map(|g| {
            let data = point_data(&values, &rows, x, g, None);
            if data.y.len() < p + 2 {
                return None;
            }
            match ols_slices(&data.y, &data.x, p, x.names()) {
                Ok(f) => Some(f),
                Err(e) => {
                    log::warn!("least-squares fit failed at grid point {g}: {e}");
                    None
                }
            }
        })
        .collect();
    let skipped: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(g, o)| o.is_none().then_some(g))
        .collect();
    check_skips(skipped.len(), ds.grid.len(), opts)?;
    let pointwise: Vec<(usize, OlsFit)> = outcomes
        .into_iter()
        .enumerate()
        .filter_map(|(g, o)| o.map(|f| (g, f)))
        .collect();
    let points: Vec<f64> = pointwise.iter().map(|(g, _)| ds.grid[*g]).collect();
    let mut paths = vec![Vec::with_capacity(points.len()); p + 1];
    for (_, f) in &pointwise {
        paths[0].push(f.intercept);
        for j in 0..p {
            paths[j + 1].push(f.slopes[j]);
        }
    }
    let (curves, smoothing_residual) = smooth_paths(&points, &paths, ds.basis.clone())?;
    Ok(MeanFitModel {
        coefficients: CoefficientFunctions {
            basis: ds.basis.clone(),
            curves,
            standardization: x.standardization().clone(),
            smoothing_residual,
        },
        pointwise,
        skipped,
    })
}

/// Count of (curve, grid point) pairs where a lower-level quantile
/// prediction exceeds a higher-level one. Models are compared in `τ` order.
pub fn crossing_count(ds: &FunctionalDataset, x: &DesignMatrix, models: &[QuantileFitModel]) -> Result<usize> {
    let rows = align_rows(ds, x)?;
    let mut ordered: Vec<&QuantileFitModel> = models.iter().collect();
    ordered.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let paths: Vec<Vec<Vec<f64>>> = ordered
        .iter()
        .map(|m| m.coefficients.paths(&ds.grid))
        .collect::<Result<_>>()?;
    let mut count = 0;
    for &row in &rows {
        let preds: Vec<Vec<f64>> = paths.iter().map(|pp| recompose(pp, x.row(row))).collect();
        for w in preds.windows(2) {
            count += w[0].iter().zip(&w[1]).filter(|(a, b)| a > b).count();
        }
    }
    Ok(count)
}

/// One line of the fit-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitMetric {
    /// `fosqr` or `flm`.
    pub model: String,
    /// Level at which the pinball loss is evaluated.
    pub tau: f64,
    /// Alert label for a per-cluster row, `all` otherwise.
    pub group: String,
    pub mean_pinball: f64,
    pub n_evaluations: usize,
}

fn mean_pinball(values: &[Vec<f64>], preds: &[Vec<f64>], members: &[usize], tau: f64) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0usize;
    for &c in members {
        for (v, q) in values[c].iter().zip(&preds[c]) {
            if v.is_nan() || q.is_nan() {
                continue;
            }
            total += pinball(v - q, tau);
            count += 1;
        }
    }
    if count == 0 {
        (f64::NAN, 0)
    } else {
        (total / count as f64, count)
    }
}

/// Mean pinball loss of each quantile model at its own level, of the FLM
/// at every level, and per alert level when a clustering is supplied.
pub fn evaluate_fits(
    ds: &FunctionalDataset,
    x: &DesignMatrix,
    models: &[QuantileFitModel],
    flm: &MeanFitModel,
    clusters: Option<&ClusterModel>,
) -> Result<Vec<FitMetric>> {
    let rows = align_rows(ds, x)?;
    let values = ds.grid_values(0)?;
    let predict_all = |coef: &CoefficientFunctions| -> Result<Vec<Vec<f64>>> {
        let paths = coef.paths(&ds.grid)?;
        Ok(rows.iter().map(|&r| recompose(&paths, x.row(r))).collect())
    };
    let flm_preds = predict_all(&flm.coefficients)?;

    let mut groups: Vec<(String, Vec<usize>)> = vec![("all".into(), (0..ds.len()).collect())];
    if let Some(cm) = clusters {
        let mut by_label: BTreeMap<usize, (String, Vec<usize>)> = BTreeMap::new();
        let mut missing = Vec::new();
        for (c, curve) in ds.curves.iter().enumerate() {
            match cm.cluster_of(&curve.id) {
                Some(k) => {
                    let rank = cm.alert_rank(k);
                    by_label
                        .entry(rank)
                        .or_insert_with(|| (cm.alert_label(k).to_string(), Vec::new()))
                        .1
                        .push(c);
                }
                None => missing.push(curve.id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::IdMismatch(missing));
        }
        groups.extend(by_label.into_values());
    }

    let mut out = Vec::new();
    for m in models {
        let preds = predict_all(&m.coefficients)?;
        for (label, members) in &groups {
            let (loss, count) = mean_pinball(&values, &preds, members, m.tau);
            out.push(FitMetric {
                model: "fosqr".into(),
                tau: m.tau,
                group: label.clone(),
                mean_pinball: loss,
                n_evaluations: count,
            });
            let (loss, count) = mean_pinball(&values, &flm_preds, members, m.tau);
            out.push(FitMetric {
                model: "flm".into(),
                tau: m.tau,
                group: label.clone(),
                mean_pinball: loss,
                n_evaluations: count,
            });
        }
    }
    Ok(out)
}

/// Outcome of cross-validated penalty selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `(λ, mean held-out pinball loss)` for each distinct candidate.
    pub scores: Vec<(f64, f64)>,
}

/// Settings for [`select_lambda`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Number of equally spaced grid points scored.
    pub eval_points: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: 5,
            seed: 0,
            eval_points: 10,
        }
    }
}

/// Penalty grid scaled to the data: `0` followed by `count` log-spaced
/// values from `1e-3·λ_ref` to `λ_ref`, where `λ_ref` is the largest
/// zero-slope penalty over the scored grid points.
pub fn default_lambda_grid(
    ds: &FunctionalDataset,
    x: &DesignMatrix,
    tau: f64,
    count: usize,
    eval_points: usize,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let rows = align_rows(ds, x)?;
    let values = ds.grid_values(0)?;
    let p = x.ncols();
    let g = ds.grid.len();
    let k = eval_points.clamp(1, g);
    let mut reference = 0.0f64;
    for i in 0..k {
        let gi = if k == 1 { g / 2 } else { i * (g - 1) / (k - 1) };
        let data = point_data(&values, &rows, x, gi, None);
        let n = data.y.len();
        if n < p + 2 {
            continue;
        }
        let base = solve_qr_lasso(&data.y, &[], 0, tau, 0.0, None)?;
        for j in 0..p {
            let s: f64 = (0..n).map(|r| base.subgradient[r] * data.x[r * p + j]).sum();
            reference = reference.max(s.abs() / n as f64);
        }
    }
    if !(reference > 0.0) {
        return Ok(vec![0.0]);
    }
    let mut grid = vec![0.0];
    let count = count.max(1);
    for i in 0..count {
        let e = if count == 1 { 0.0 } else { -3.0 + 3.0 * i as f64 / (count - 1) as f64 };
        grid.push(reference * 10f64.powf(e));
    }
    Ok(grid)
}

/// K-fold cross-validation of the penalty over curves. Ties go to the
/// larger (sparser) penalty.
pub fn select_lambda(
    ds: &FunctionalDataset,
    x: &DesignMatrix,
    tau: f64,
    lambda_grid: &[f64],
    opts: &CvOptions,
) -> Result<LambdaSelection> {
    check_tau(tau)?;
    if lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("empty penalty grid".into()));
    }
    if opts.folds < 2 {
        return Err(Error::InvalidConfig(format!(
            "cross-validation needs at least 2 folds, got {}",
            opts.folds
        )));
    }
    if let Some(bad) = lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidConfig(format!("invalid penalty {bad}")));
    }
    let mut lambdas = lambda_grid.to_vec();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();

    let rows = align_rows(ds, x)?;
    let values = ds.grid_values(0)?;
    let p = x.ncols();
    let n = ds.len();
    if n < opts.folds {
        return Err(Error::InsufficientData(format!(
            "{n} curves cannot fill {} folds",
            opts.folds
        )));
    }

    // fold assignment keyed to sorted ids so input order does not matter
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ds.curves[a].id.cmp(&ds.curves[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    order.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); opts.folds];
    for (pos, &c) in order.iter().enumerate() {
        folds[pos % opts.folds].push(c);
    }
    for f in &folds {
        if n - f.len() < p + 2 {
            return Err(Error::InsufficientData(format!(
                "a training split has {} curves, need at least {}",
                n - f.len(),
                p + 2
            )));
        }
    }
    let trains: Vec<Vec<usize>> = folds
        .iter()
        .map(|f| {
            let mut t: Vec<usize> = (0..n).filter(|c| !f.contains(c)).collect();
            t.sort_unstable();
            t
        })
        .collect();

    let g = ds.grid.len();
    let k = opts.eval_points.clamp(1, g);
    let points: Vec<usize> = if k == 1 {
        vec![g / 2]
    } else {
        let mut v: Vec<usize> = (0..k)
            .map(|i| ((i as f64) * (g - 1) as f64 / (k - 1) as f64).round() as usize)
            .collect();
        v.dedup();
        v
    };

    let jobs: Vec<(usize, usize, usize)> = (0..lambdas.len())
        .flat_map(|l| {
            let npts = points.len();
            (0..opts.folds).flat_map(move |f| (0..npts).map(move |q| (l, f, q)))
        })
        .collect();
    let results: Vec<(usize, f64, usize)> = jobs
        .par_iter()
        .map(|&(l, f, q)| {
            let gi = points[q];
            let train = point_data(&values, &rows, x, gi, Some(&trains[f]));
            if train.y.len() < p + 2 {
                return (l, 0.0, 0);
            }
            let warm = warm_start(&train, p, tau);
            let Ok(fit) = solve_qr_lasso(&train.y, &train.x, p, tau, lambdas[l], warm.as_deref()) else {
                return (l, 0.0, 0);
            };
            let mut loss = 0.0;
            let mut count = 0;
            for &c in &folds[f] {
                let v = values[c][gi];
                if v.is_nan() {
                    continue;
                }
                let pred = fit.intercept
                    + fit.slopes.iter().zip(x.row(rows[c])).map(|(b, z)| b * z).sum::<f64>();
                loss += pinball(v - pred, tau);
                count += 1;
            }
            (l, loss, count)
        })
        .collect();

    let mut totals = vec![(0.0, 0usize); lambdas.len()];
    for (l, loss, count) in results {
        totals[l].0 += loss;
        totals[l].1 += count;
    }
    let scores: Vec<(f64, f64)> = lambdas
        .iter()
        .zip(&totals)
        .map(|(&l, &(s, c))| (l, if c == 0 { f64::INFINITY } else { s / c as f64 }))
        .collect();
    let best = scores
        .iter()
        .map(|s| s.1)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::InsufficientData(
            "no penalty candidate could be scored".into(),
        ));
    }
    let lambda = scores
        .iter()
        .filter(|(_, s)| *s <= best + 1e-12 * best.abs().max(1e-300))
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(LambdaSelection { lambda, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn design(rows: &[Vec<f64>]) -> DesignMatrix {
        let ids = (0..rows.len()).map(|i| format!("c{i}")).collect();
        let names = (0..rows[0].len()).map(|j| format!("x{j}")).collect();
        DesignMatrix::standardize(ids, names, rows).unwrap()
    }

    #[test]
    fn standardization_round_trip() {
        let x = design(&[vec![10.0, 1.0], vec![30.0, 4.0], vec![20.0, 2.5]]);
        assert_abs_diff_eq!(x.row(0)[0], -1.0, epsilon = 1e-12);
        let raw = x.raw_row(1);
        assert_abs_diff_eq!(raw[0], 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(raw[1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_column_rejected() {
        let ids = vec!["a".into(), "b".into()];
        let names = vec!["area".into()];
        assert!(matches!(
            DesignMatrix::standardize(ids, names, &[vec![3.0], vec![3.0]]),
            Err(Error::ConstantColumn(c)) if c == "area"
        ));
    }

    #[test]
    fn ols_constant_response() {
        let x = design(&[vec![1.0], vec![2.0], vec![5.0], vec![3.0]]);
        let fit = pointwise_ols(&[4.0; 4], &x).unwrap();
        assert_abs_diff_eq!(fit.intercept, 4.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.slopes[0], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn ols_names_collinear_column() {
        let x = design(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![5.0, 10.0], vec![3.0, 6.0]]);
        match pointwise_ols(&[1.0, 2.0, 3.0, 4.0], &x) {
            Err(Error::Collinear(cols)) => assert_eq!(cols[0], "x1"),
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }

    #[test]
    fn select_lambda_rejects_bad_options() {
        let basis = Arc::new(BasisSystem::cubic(0.0, 1.0, 4).unwrap());
        let grid = basis.uniform_grid(5).unwrap();
        let ds = FunctionalDataset::new(basis, vec![], grid).unwrap();
        let x = design(&[vec![1.0], vec![2.0]]);
        assert!(select_lambda(&ds, &x, 0.5, &[], &CvOptions::default()).is_err());
        let opts = CvOptions {
            folds: 1,
            ..Default::default()
        };
        assert!(select_lambda(&ds, &x, 0.5, &[0.0], &opts).is_err());
    }
}
