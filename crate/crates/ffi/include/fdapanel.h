#ifndef FDAPANEL_H
#define FDAPANEL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FdpStatus {
  FDP_STATUS_OK = 0,
  FDP_STATUS_NULL_POINTER = 1,
  FDP_STATUS_INVALID_ARGUMENT = 2,
  FDP_STATUS_DATA_ERROR = 3,
  FDP_STATUS_NUMERICAL_ERROR = 4,
  FDP_STATUS_IO_ERROR = 5,
  FDP_STATUS_PANIC = 6,
} FdpStatus;

/**
 * Opaque B-spline basis.
 */
typedef struct FdpBasis FdpBasis;

/**
 * Opaque fitted regression model loaded from a model file.
 */
typedef struct FdpModel FdpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *fdp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fdp_version(void);

/**
 * Creates a clamped basis of `num_basis` functions of `order` on `[lo, hi]`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum FdpStatus fdp_basis_new(double lo,
                             double hi,
                             size_t num_basis,
                             size_t order,
                             struct FdpBasis **out);

/**
 * Releases a basis; null is ignored.
 *
 * # Safety
 * `basis` must come from [`fdp_basis_new`] and not be used afterwards.
 */
void fdp_basis_free(struct FdpBasis *basis);

/**
 * Number of basis functions, or 0 for a null handle.
 *
 * # Safety
 * `basis` must be null or a live handle.
 */
size_t fdp_basis_num(const struct FdpBasis *basis);

/**
 * Writes the `ell`-th derivative of every basis function at `t` into `out`
 * (`out_len` must equal the number of basis functions).
 *
 * # Safety
 * `basis` must be a live handle and `out` must hold `out_len` doubles.
 */
enum FdpStatus fdp_basis_eval(const struct FdpBasis *basis,
                              double t,
                              size_t ell,
                              double *out,
                              size_t out_len);

/**
 * Penalized least-squares fit of `(times, values)` onto the basis. Writes
 * the coefficients and, when `rmse_out` is non-null, the residual RMS.
 *
 * # Safety
 * Arrays must hold the stated number of doubles; `rmse_out` may be null.
 */
enum FdpStatus fdp_fit_curve(const struct FdpBasis *basis,
                             const double *times,
                             const double *values,
                             size_t n,
                             double lambda,
                             double *coef_out,
                             size_t coef_len,
                             double *rmse_out);

/**
 * Check loss `ρ_τ(r)`.
 *
 * # Safety
 * `out` must point to a writable double.
 */
enum FdpStatus fdp_pinball(double r, double tau, double *out);

/**
 * Minimizes `Σ ρ_τ(y − b0 − x b) + nλ|b|₁` with `x` row-major `n × p`.
 * Writes the intercept, the `p` slopes and the objective value.
 *
 * # Safety
 * `y` holds `n` doubles, `x` holds `n·p`, `slopes_out` holds `p`; the scalar
 * outputs must be writable (`objective_out` may be null).
 */
enum FdpStatus fdp_qr_lasso(const double *y,
                            const double *x,
                            size_t n,
                            size_t p,
                            double tau,
                            double lambda,
                            double *intercept_out,
                            double *slopes_out,
                            double *objective_out);

/**
 * Loads a model file written by `fdapanel regress`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum FdpStatus fdp_model_load(const char *path, struct FdpModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`fdp_model_load`] and not be used afterwards.
 */
void fdp_model_free(struct FdpModel *model);

/**
 * Quantile level of the model; NaN for a mean model or a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
double fdp_model_tau(const struct FdpModel *model);

/**
 * Number of scalar covariates the model expects.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fdp_model_num_covariates(const struct FdpModel *model);

/**
 * Predicted curve for raw (unstandardized) covariates `x` on `grid`.
 * Grid points beyond the fitted range come back as NaN.
 *
 * # Safety
 * `x` holds `p` doubles, `grid` and `out` hold `g` doubles.
 */
enum FdpStatus fdp_model_predict(const struct FdpModel *model,
                                 const double *x,
                                 size_t p,
                                 const double *grid,
                                 size_t g,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FDAPANEL_H */
