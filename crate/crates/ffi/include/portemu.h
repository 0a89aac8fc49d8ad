#ifndef PORTEMU_H
#define PORTEMU_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every interface call.
 */
typedef enum PortemuStatus {
  PortemuStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  PortemuStatus_NullArgument = 1,
  /**
   * Arguments were structurally invalid (dimensions, signs, families).
   */
  PortemuStatus_InvalidArgument = 2,
  /**
   * The computation itself failed (degenerate inputs, no convergence).
   */
  PortemuStatus_Failed = 3,
} PortemuStatus;

/**
 * Forecast moments for `horizon` steps over `assets` series; opaque.
 */
typedef struct PortemuMoments PortemuMoments;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread.
 *
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *portemu_last_error_message(void);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *portemu_version(void);

/**
 * Build a moments handle.
 *
 * `means` holds `horizon` blocks of `assets` values (step-major).
 * `precisions` holds `horizon` blocks of `assets * assets` values, each a
 * symmetric positive-definite matrix in column-major order. On success
 * `*out` owns the handle; release it with [`portemu_moments_free`].
 *
 * # Safety
 * `means` must point to `horizon * assets` readable doubles, `precisions`
 * to `horizon * assets * assets`, and `out` to a writable pointer slot.
 */
enum PortemuStatus portemu_moments_new(uintptr_t assets,
                                       uintptr_t horizon,
                                       const double *means,
                                       const double *precisions,
                                       struct PortemuMoments **out);

/**
 * Release a handle from [`portemu_moments_new`]; `handle` may be null.
 *
 * # Safety
 * `handle` must be null or a pointer returned by `portemu_moments_new`
 * that has not been freed yet.
 */
void portemu_moments_free(struct PortemuMoments *handle);

/**
 * Number of forecast steps in the handle.
 *
 * # Safety
 * `handle` must be a live pointer from `portemu_moments_new`.
 */
uintptr_t portemu_moments_horizon(const struct PortemuMoments *handle);

/**
 * Number of assets in the handle.
 *
 * # Safety
 * `handle` must be a live pointer from `portemu_moments_new`.
 */
uintptr_t portemu_moments_assets(const struct PortemuMoments *handle);

/**
 * Myopic mean-variance weights from the first-step moments, subject to
 * the expected-return target and the unit budget.
 *
 * # Safety
 * `handle` must be live and `out_weights` must point to `assets` writable
 * doubles.
 */
enum PortemuStatus portemu_markowitz(const struct PortemuMoments *handle,
                                     double target,
                                     double *out_weights);

/**
 * Minimum-variance weights and the standard-deviation bound they attain.
 *
 * # Safety
 * `handle` must be live, `out_weights` must point to `assets` writable
 * doubles, and `out_bound` to one writable double.
 */
enum PortemuStatus portemu_min_variance(const struct PortemuMoments *handle,
                                        double *out_weights,
                                        double *out_bound);

/**
 * First-step decision of the multi-step quadratic-turnover solve.
 *
 * The loss weighs target tracking by `1/alpha`, risk by `1/beta`, and
 * squared turnover by `1/lambda` at every step; `initial_weights` are the
 * current holdings and must sum to one.
 *
 * # Safety
 * `handle` must be live; `initial_weights` must point to `assets` readable
 * doubles and `out_weights` to `assets` writable doubles.
 */
enum PortemuStatus portemu_solve_normal(const struct PortemuMoments *handle,
                                        double alpha,
                                        double beta,
                                        double lambda,
                                        double target,
                                        const double *initial_weights,
                                        double *out_weights);

/**
 * First-step decision of the absolute-turnover solve (profiled path via
 * the latent-scale EM iteration). `gamma` adds weight shrinkage when
 * finite; pass INFINITY to disable it.
 *
 * # Safety
 * `handle` must be live; `initial_weights` must point to `assets` readable
 * doubles and `out_weights` to `assets` writable doubles.
 */
enum PortemuStatus portemu_solve_profiled(const struct PortemuMoments *handle,
                                          double alpha,
                                          double beta,
                                          double lambda,
                                          double gamma,
                                          double target,
                                          const double *initial_weights,
                                          double *out_weights);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PORTEMU_H */
