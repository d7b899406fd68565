#ifndef GAMBLET_H
#define GAMBLET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum GambletStatus {
  GAMBLET_STATUS_OK = 0,
  GAMBLET_STATUS_NULL_POINTER = 1,
  GAMBLET_STATUS_INVALID_ARGUMENT = 2,
  GAMBLET_STATUS_DIMENSION_MISMATCH = 3,
  GAMBLET_STATUS_NOT_SPD = 4,
  GAMBLET_STATUS_NO_CONVERGENCE = 5,
  GAMBLET_STATUS_IO = 6,
  GAMBLET_STATUS_PARSE = 7,
  GAMBLET_STATUS_PANIC = 8,
} GambletStatus;

/**
 * Coefficient field of a finite-element operator, passed as its integer
 * value.
 */
typedef enum GambletCoefficient {
  GAMBLET_COEFFICIENT_UNIT = 0,
  GAMBLET_COEFFICIENT_ROUGH = 1,
} GambletCoefficient;

/**
 * Opaque handle to an operator and its gamblet decomposition.
 */
typedef struct GambletSystem GambletSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *gamblet_last_error_message(void);

/**
 * Forgets the last error message of this thread.
 */
void gamblet_clear_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *gamblet_version(void);

/**
 * Builds the finite-element operator of `-div(a grad u)` on the unit
 * interval (`dim = 1`) or square (`dim = 2`) with `2^q` cells per axis and
 * computes its gamblet decomposition. `coefficient` is a
 * [`GambletCoefficient`] value; `trunc = 0` keeps every entry.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum GambletStatus gamblet_system_new_fem(size_t dim,
                                          size_t q,
                                          uint32_t coefficient,
                                          double trunc,
                                          struct GambletSystem **out);

/**
 * Decomposes a caller-supplied SPD matrix (row-major, `n × n`) on the
 * dyadic hierarchy of dimension `dim` with `q` levels; `n` must equal
 * `2^(dim·q)`.
 *
 * # Safety
 * `matrix` must point to `n * n` readable values and `out` to writable
 * storage for one handle.
 */
enum GambletStatus gamblet_system_new_dense(size_t dim,
                                            size_t q,
                                            const double *matrix,
                                            size_t n,
                                            double trunc,
                                            struct GambletSystem **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `handle` must be null or a handle not yet freed.
 */
void gamblet_system_free(struct GambletSystem *handle);

/**
 * Number of levels `q`, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live handle.
 */
size_t gamblet_system_levels(const struct GambletSystem *handle);

/**
 * Number of fine unknowns, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live handle.
 */
size_t gamblet_system_fine_size(const struct GambletSystem *handle);

/**
 * Number of coefficients `|J^(k)|` on level `k` (`1 ≤ k ≤ q`).
 *
 * # Safety
 * `handle` must be a live handle and `out` a writable pointer.
 */
enum GambletStatus gamblet_system_level_size(const struct GambletSystem *handle,
                                             size_t k,
                                             size_t *out);

/**
 * Solves `A x = f` with the multilevel solver.
 *
 * # Safety
 * `f` and `x` must each point to `n` values, `n` being the fine size.
 */
enum GambletStatus gamblet_system_solve(const struct GambletSystem *handle,
                                        const double *f,
                                        double *x,
                                        size_t n);

/**
 * Multiresolution coefficients `c^(1), …, c^(q)` of `y`, concatenated by
 * level (total length equals the fine size).
 *
 * # Safety
 * `y` and `coeffs` must each point to `n` values.
 */
enum GambletStatus gamblet_system_analyze(const struct GambletSystem *handle,
                                          const double *y,
                                          double *coeffs,
                                          size_t n);

/**
 * Inverse of [`gamblet_system_analyze`] using levels `1..=upto` only.
 *
 * # Safety
 * `coeffs` and `y` must each point to `n` values.
 */
enum GambletStatus gamblet_system_reconstruct(const struct GambletSystem *handle,
                                              const double *coeffs,
                                              size_t upto,
                                              double *y,
                                              size_t n);

/**
 * Keeps levels `1..=level` of `y`; `level = q` returns `y`.
 *
 * # Safety
 * `y` and `out` must each point to `n` values.
 */
enum GambletStatus gamblet_system_level_filter(const struct GambletSystem *handle,
                                               const double *y,
                                               size_t level,
                                               double *out,
                                               size_t n);

/**
 * Energy norm `sqrt(xᵀ A x)` of a fine vector.
 *
 * # Safety
 * `x` must point to `n` values and `out` to one writable value.
 */
enum GambletStatus gamblet_system_energy_norm(const struct GambletSystem *handle,
                                              const double *x,
                                              size_t n,
                                              double *out);

/**
 * Near-minimax level `l†` for a dyadic problem of dimension `dim`
 * (`h = 1/2`, `s = 1`).
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum GambletStatus gamblet_select_level(size_t dim, size_t q, double sigma, double m, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAMBLET_H */
