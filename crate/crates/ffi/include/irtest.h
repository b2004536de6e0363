#ifndef IRTEST_H
#define IRTEST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every function.
 */
typedef enum IrtStatus {
  IRT_STATUS_OK = 0,
  IRT_STATUS_NULL_POINTER = 1,
  IRT_STATUS_INVALID_ARGUMENT = 2,
  IRT_STATUS_DIMENSION_MISMATCH = 3,
  IRT_STATUS_NON_FINITE = 4,
  IRT_STATUS_UNDEFINED = 5,
  IRT_STATUS_ZERO_DENOMINATOR = 6,
  IRT_STATUS_IO = 7,
  IRT_STATUS_FORMAT = 8,
  IRT_STATUS_PANIC = 9,
} IrtStatus;

/**
 * Opaque surrogate network.
 */
typedef struct IrtModel IrtModel;

/**
 * Opaque seeded random stream.
 */
typedef struct IrtRng IrtRng;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call that fails on the same thread.
 */
const char *irt_last_error(void);

/**
 * Create a random stream from a seed.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum IrtStatus irt_rng_new(uint64_t seed, struct IrtRng **out);

/**
 * # Safety
 * `rng` must come from [`irt_rng_new`] and not be used afterwards.
 */
void irt_rng_free(struct IrtRng *rng);

/**
 * Randomly initialised network with input dimension `dim` and `n_hidden`
 * hidden layers of the given widths.
 *
 * # Safety
 * `hidden` must point to `n_hidden` values; `out` must be valid.
 */
enum IrtStatus irt_model_init(size_t dim,
                              const size_t *hidden,
                              size_t n_hidden,
                              uint64_t seed,
                              struct IrtModel **out);

/**
 * Load a network saved by the core library.
 *
 * # Safety
 * `file` must be a NUL-terminated string; `out` must be valid.
 */
enum IrtStatus irt_model_load(const char *file, struct IrtModel **out);

/**
 * # Safety
 * `model` must be a live handle; `file` a NUL-terminated string.
 */
enum IrtStatus irt_model_save(const struct IrtModel *model, const char *file);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void irt_model_free(struct IrtModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be valid.
 */
enum IrtStatus irt_model_input_dim(const struct IrtModel *model, size_t *out);

/**
 * Failure probabilities for `n_rows` row-major states of width `dim`.
 *
 * # Safety
 * `x` must hold `n_rows * dim` values and `out` room for `n_rows`.
 */
enum IrtStatus irt_model_predict(const struct IrtModel *model,
                                 const double *x,
                                 size_t n_rows,
                                 size_t dim,
                                 double *out);

/**
 * Importance weight `p/q` of a state.
 *
 * # Safety
 * `out` must be valid.
 */
enum IrtStatus irt_weight_plain(bool in_critical,
                                double epsilon,
                                double critical_mass,
                                double *out);

/**
 * Class-rebalanced importance weight of a labelled state.
 *
 * # Safety
 * `out` must be valid.
 */
enum IrtStatus irt_weight_rebalanced(bool in_critical,
                                     bool failed,
                                     double epsilon,
                                     double p_fail,
                                     double critical_mass,
                                     double precision,
                                     double *out);

/**
 * Acquisition density at a state with naturalistic density `p_density`.
 *
 * # Safety
 * `out` must be valid.
 */
enum IrtStatus irt_q_density(double p_density,
                             bool in_critical,
                             double epsilon,
                             double f_th,
                             double critical_mass,
                             double *out);

/**
 * Average precision of `scores` against 0/1 `labels`.
 *
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be valid.
 */
enum IrtStatus irt_average_precision(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     double *out);

/**
 * Highest precision at recall of at least `recall`.
 *
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be valid.
 */
enum IrtStatus irt_precision_at_recall(const double *scores,
                                       const uint8_t *labels,
                                       size_t n,
                                       double recall,
                                       double *out);

/**
 * Minimise `|A alpha - t|^2` over the probability simplex. `a` is
 * row-major `n_rows x n_cols`; `warm_start` may be null.
 *
 * # Safety
 * Buffers must match the given sizes; `alpha_out` needs `n_cols` slots.
 */
enum IrtStatus irt_solve_simplex_qp(const double *a,
                                    const double *t,
                                    size_t n_rows,
                                    size_t n_cols,
                                    double tol,
                                    const double *warm_start,
                                    double *alpha_out,
                                    double *objective_out);

/**
 * Draw one state from the acquisition distribution built on `model` over
 * the uniform box `[low, high]^dim`.
 *
 * # Safety
 * `low`, `high` and `state_out` must hold `dim` values; `rng` and `model`
 * must be live handles. `in_critical_out` may be null.
 */
enum IrtStatus irt_sample_state(const struct IrtModel *model,
                                const double *low,
                                const double *high,
                                size_t dim,
                                double epsilon,
                                double f_th,
                                double critical_mass,
                                struct IrtRng *rng,
                                double *state_out,
                                bool *in_critical_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IRTEST_H */
