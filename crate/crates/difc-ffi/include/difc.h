#ifndef DIFC_H
#define DIFC_H

/* Generated by cbindgen from the difc-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared by every entry point. They mirror the CLI exit
 * codes: 0 success, 1 numerical failure, 2 invalid input.
 */
typedef enum DifcStatus {
  DIFC_STATUS_OK = 0,
  DIFC_STATUS_NUMERICAL = 1,
  DIFC_STATUS_INVALID = 2,
} DifcStatus;

/**
 * Nodal solver output: mesh coordinates, state, coefficient, and the
 * headline errors. Opaque to C; use the accessor functions.
 */
typedef struct DifcResult DifcResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, empty when none.
 * The pointer stays valid until the next failing call on the same thread.
 *
 * # Safety
 * The returned pointer must not be freed or written through.
 */
const char *difc_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 *
 * # Safety
 * The returned pointer is static and must not be freed.
 */
const char *difc_version(void);

/**
 * Solve the Dirichlet problem of a registered benchmark on a uniform
 * mesh with `cells` cells per side. The handle's state is the finite
 * element solution, its coefficient the true one sampled at the nodes,
 * `l2_error` the state L2 error and `weighted_error` the H1 seminorm
 * error against the manufactured solution.
 *
 * # Safety
 * `problem_id` must be a NUL-terminated string and `out` a valid pointer;
 * the returned handle must be released with `difc_result_free`.
 */
enum DifcStatus difc_forward_solve(const char *problem_id, size_t cells, struct DifcResult **out);

/**
 * Tikhonov finite element reconstruction from a smooth synthetic
 * observation at noise level `delta`. Pass `cells = 0` or a negative
 * `gamma` to couple that parameter to delta through the built-in rule
 * (mesh width tracking sqrt(delta), penalty tracking delta squared).
 * The handle's coefficient is the reconstruction, the state the final
 * forward solve, and `l2_error`/`weighted_error` compare the coefficient
 * against the true one.
 *
 * # Safety
 * `problem_id` must be a NUL-terminated string and `out` a valid pointer;
 * the returned handle must be released with `difc_result_free`.
 */
enum DifcStatus difc_fem_reconstruct(const char *problem_id,
                                     double delta,
                                     size_t cells,
                                     double gamma,
                                     uint64_t seed,
                                     struct DifcResult **out);

/**
 * Spatial dimension of the handle's mesh, 0 for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle from this library.
 */
size_t difc_result_dim(const struct DifcResult *result);

/**
 * Number of mesh nodes, 0 for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle from this library.
 */
size_t difc_result_len(const struct DifcResult *result);

/**
 * Copy the node coordinates into `buf`, which must hold exactly
 * `dim * len` doubles, laid out per node.
 *
 * # Safety
 * `result` must be a live handle and `buf` writable for `len` doubles.
 */
enum DifcStatus difc_result_coordinates(const struct DifcResult *result, double *buf, size_t len);

/**
 * Copy the nodal state values into `buf` (exactly `len` doubles).
 *
 * # Safety
 * `result` must be a live handle and `buf` writable for `len` doubles.
 */
enum DifcStatus difc_result_state(const struct DifcResult *result, double *buf, size_t len);

/**
 * Copy the nodal coefficient values into `buf` (exactly `len` doubles).
 *
 * # Safety
 * `result` must be a live handle and `buf` writable for `len` doubles.
 */
enum DifcStatus difc_result_coefficient(const struct DifcResult *result, double *buf, size_t len);

/**
 * Headline L2 error of the handle, NaN for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle from this library.
 */
double difc_result_l2_error(const struct DifcResult *result);

/**
 * Secondary error of the handle (weighted coefficient error for
 * reconstructions, H1 seminorm error for forward solves); NaN when null.
 *
 * # Safety
 * `result` must be null or a live handle from this library.
 */
double difc_result_weighted_error(const struct DifcResult *result);

/**
 * 1 when the optimizer met its tolerance, 0 when it hit the iteration
 * cap, -1 for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle from this library.
 */
int32_t difc_result_converged(const struct DifcResult *result);

/**
 * Optimizer iterations behind the handle, 0 for forward solves or null.
 *
 * # Safety
 * `result` must be null or a live handle from this library.
 */
size_t difc_result_iterations(const struct DifcResult *result);

/**
 * Release a handle. Null is a no-op; a handle must not be freed twice.
 *
 * # Safety
 * `result` must be null or an unfreed handle from this library.
 */
void difc_result_free(struct DifcResult *result);

/**
 * Discovery stability of a multistep method named like "ab2", "am3" or
 * "bdf4": writes 1/0 into `stable`, the number of sigma-root moduli into
 * `n_moduli`, and up to `capacity` moduli into `moduli` (which may be
 * null when `capacity` is 0). Fails with an invalid-input status when the
 * moduli do not fit.
 *
 * # Safety
 * `method` must be NUL-terminated; `stable` and `n_moduli` must be valid
 * pointers; `moduli` must be writable for `capacity` doubles.
 */
enum DifcStatus difc_lmm_stability(const char *method,
                                   int32_t *stable,
                                   double *moduli,
                                   size_t capacity,
                                   size_t *n_moduli);

/**
 * Recover the right-hand side of y' = y, y(0) = 1 from an exact
 * trajectory with `n` steps of size `h`, using the named multistep
 * method, and write the sup-norm recovery error into `max_error`.
 *
 * # Safety
 * `method` must be NUL-terminated and `max_error` a valid pointer.
 */
enum DifcStatus difc_lmm_recover(const char *method, double h, size_t n, double *max_error);

/**
 * Least-squares power-law fit through (x, err) pairs on log axes; writes
 * the fitted exponent and natural-log intercept. Needs at least three
 * pairs, all positive.
 *
 * # Safety
 * `xs` and `errs` must be readable for `len` doubles; `slope` and
 * `intercept` must be valid pointers.
 */
enum DifcStatus difc_fit_rate(const double *xs,
                              const double *errs,
                              size_t len,
                              double *slope,
                              double *intercept);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFC_H */
