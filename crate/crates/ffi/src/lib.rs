//! C interface to the basis, curve fitting, quantile LASSO and model
//! prediction routines.
//!
//! Every function returns an [`FdpStatus`]. On failure a message is kept in
//! thread-local storage and can be read with [`fdp_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;
use std::sync::Arc;

use fdapanel::basis::BasisSystem;
use fdapanel::curve::{CurveFitter, RawCurve};
use fdapanel::fosr::{pinball_loss, solve_qr_lasso, CoefficientFunctions};
use fdapanel::io::ModelFile;
use fdapanel::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericalError = 4,
    IoError = 5,
    Panic = 6,
}

/// Opaque B-spline basis.
pub struct FdpBasis {
    inner: Arc<BasisSystem>,
}

/// Opaque fitted regression model loaded from a model file.
pub struct FdpModel {
    tau: Option<f64>,
    coefficients: CoefficientFunctions,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FdpStatus {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidDomain { .. }
        | Error::OutOfDomain { .. }
        | Error::UnsupportedDerivative { .. }
        | Error::InvalidQuantile(_)
        | Error::DimensionMismatch { .. } => FdpStatus::InvalidArgument,
        Error::Io { .. } => FdpStatus::IoError,
        e if e.is_numerical() => FdpStatus::NumericalError,
        _ => FdpStatus::DataError,
    }
}

struct Failure(FdpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FdpStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FdpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FdpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FdpStatus::Panic
        }
    }
}

/// Borrows `len` values; a null pointer is accepted only when `len == 0`.
unsafe fn input<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        Ok(&[])
    } else if ptr.is_null() {
        Err(null(what))
    } else {
        Ok(slice::from_raw_parts(ptr, len))
    }
}

unsafe fn output<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        Ok(&mut [])
    } else if ptr.is_null() {
        Err(null(what))
    } else {
        Ok(slice::from_raw_parts_mut(ptr, len))
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), Failure> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got }.into())
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fdp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fdp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a clamped basis of `num_basis` functions of `order` on `[lo, hi]`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn fdp_basis_new(
    lo: f64,
    hi: f64,
    num_basis: usize,
    order: usize,
    out: *mut *mut FdpBasis,
) -> FdpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let basis = BasisSystem::new(lo, hi, num_basis, order)?;
        *out = Box::into_raw(Box::new(FdpBasis { inner: Arc::new(basis) }));
        Ok(())
    })
}

/// Releases a basis; null is ignored.
///
/// # Safety
/// `basis` must come from [`fdp_basis_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fdp_basis_free(basis: *mut FdpBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// Number of basis functions, or 0 for a null handle.
///
/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdp_basis_num(basis: *const FdpBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.inner.num_basis())
}

/// Writes the `ell`-th derivative of every basis function at `t` into `out`
/// (`out_len` must equal the number of basis functions).
///
/// # Safety
/// `basis` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fdp_basis_eval(
    basis: *const FdpBasis,
    t: f64,
    ell: usize,
    out: *mut f64,
    out_len: usize,
) -> FdpStatus {
    guard(|| {
        let b = basis.as_ref().ok_or_else(|| null("basis"))?;
        check_len(b.inner.num_basis(), out_len)?;
        let out = output(out, out_len, "out")?;
        out.copy_from_slice(&b.inner.eval_deriv(t, ell)?);
        Ok(())
    })
}

/// Penalized least-squares fit of `(times, values)` onto the basis. Writes
/// the coefficients and, when `rmse_out` is non-null, the residual RMS.
///
/// # Safety
/// Arrays must hold the stated number of doubles; `rmse_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn fdp_fit_curve(
    basis: *const FdpBasis,
    times: *const f64,
    values: *const f64,
    n: usize,
    lambda: f64,
    coef_out: *mut f64,
    coef_len: usize,
    rmse_out: *mut f64,
) -> FdpStatus {
    guard(|| {
        let b = basis.as_ref().ok_or_else(|| null("basis"))?;
        check_len(b.inner.num_basis(), coef_len)?;
        let times = input(times, n, "times")?;
        let values = input(values, n, "values")?;
        let coef = output(coef_out, coef_len, "coef_out")?;
        let raw = RawCurve::new("ffi", times.to_vec(), values.to_vec())?;
        let fitter = CurveFitter::new(b.inner.clone());
        let fitter = if lambda == 0.0 { fitter } else { fitter.with_penalty()? };
        let fit = fitter.fit(&raw, lambda)?;
        coef.copy_from_slice(&fit.curve.coefficients);
        if !rmse_out.is_null() {
            *rmse_out = fit.rmse;
        }
        Ok(())
    })
}

/// Check loss `ρ_τ(r)`.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn fdp_pinball(r: f64, tau: f64, out: *mut f64) -> FdpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = pinball_loss(r, tau)?;
        Ok(())
    })
}

/// Minimizes `Σ ρ_τ(y − b0 − x b) + nλ|b|₁` with `x` row-major `n × p`.
/// Writes the intercept, the `p` slopes and the objective value.
///
/// # Safety
/// `y` holds `n` doubles, `x` holds `n·p`, `slopes_out` holds `p`; the scalar
/// outputs must be writable (`objective_out` may be null).
#[no_mangle]
pub unsafe extern "C" fn fdp_qr_lasso(
    y: *const f64,
    x: *const f64,
    n: usize,
    p: usize,
    tau: f64,
    lambda: f64,
    intercept_out: *mut f64,
    slopes_out: *mut f64,
    objective_out: *mut f64,
) -> FdpStatus {
    guard(|| {
        let y = input(y, n, "y")?;
        let x = input(x, n * p, "x")?;
        let slopes = output(slopes_out, p, "slopes_out")?;
        if intercept_out.is_null() {
            return Err(null("intercept_out"));
        }
        let fit = solve_qr_lasso(y, x, p, tau, lambda, None)?;
        *intercept_out = fit.intercept;
        slopes.copy_from_slice(&fit.slopes);
        if !objective_out.is_null() {
            *objective_out = fit.objective;
        }
        Ok(())
    })
}

/// Loads a model file written by `fdapanel regress`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fdp_model_load(path: *const c_char, out: *mut *mut FdpModel) -> FdpStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(FdpStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let file = ModelFile::read(path)?;
        let model = FdpModel {
            tau: file.tau,
            coefficients: file.coefficient_functions()?,
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`fdp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fdp_model_free(model: *mut FdpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Quantile level of the model; NaN for a mean model or a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdp_model_tau(model: *const FdpModel) -> f64 {
    model.as_ref().and_then(|m| m.tau).unwrap_or(f64::NAN)
}

/// Number of scalar covariates the model expects.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdp_model_num_covariates(model: *const FdpModel) -> usize {
    model.as_ref().map_or(0, |m| m.coefficients.num_covariates())
}

/// Predicted curve for raw (unstandardized) covariates `x` on `grid`.
/// Grid points beyond the fitted range come back as NaN.
///
/// # Safety
/// `x` holds `p` doubles, `grid` and `out` hold `g` doubles.
#[no_mangle]
pub unsafe extern "C" fn fdp_model_predict(
    model: *const FdpModel,
    x: *const f64,
    p: usize,
    grid: *const f64,
    g: usize,
    out: *mut f64,
) -> FdpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        check_len(m.coefficients.num_covariates(), p)?;
        let x = input(x, p, "x")?;
        let grid = input(grid, g, "grid")?;
        let out = output(out, g, "out")?;
        let z = m.coefficients.standardization.apply(x)?;
        out.copy_from_slice(&m.coefficients.predict_standardized(&z, grid)?);
        Ok(())
    })
}
