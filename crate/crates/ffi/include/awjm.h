#ifndef AWJM_H
#define AWJM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Bit flags selecting the controls that are optimized.
#define AWJM_CONTROL_A 1

#define AWJM_CONTROL_K 2

#define AWJM_CONTROL_E 4

typedef enum AwjmStatus {
  AWJM_STATUS_OK = 0,
  AWJM_STATUS_NULL_POINTER = 1,
  AWJM_STATUS_INVALID_ARGUMENT = 2,
  AWJM_STATUS_NUMERICAL = 3,
  AWJM_STATUS_IO = 4,
  AWJM_STATUS_PANIC = 5,
} AwjmStatus;

// How several measured profiles enter the misfit.
typedef enum AwjmCombine {
  AWJM_COMBINE_SINGLE = 0,
  AWJM_COMBINE_INDEPENDENT = 1,
  AWJM_COMBINE_SUPERPOSED = 2,
} AwjmCombine;

typedef enum AwjmRegularizer {
  // Squared distance of the active controls from the start values.
  AWJM_REGULARIZER_BACKGROUND = 0,
  // Squared gradient of the etch rate.
  AWJM_REGULARIZER_GRAD_E = 1,
} AwjmRegularizer;

// Measured final profiles on a model's grid.
typedef struct AwjmMeasurements AwjmMeasurements;

// Model parameters together with their grid and time scheme.
typedef struct AwjmModel AwjmModel;

// Misfit, regularization and their sum.
typedef struct AwjmCost {
  double misfit;
  double regularization;
  double total;
} AwjmCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into the library on the same thread.
const char *awjm_last_error(void);

// Library version as a static NUL-terminated string.
const char *awjm_version(void);

// Creates a model on `n` uniform nodes over `[x_min, x_max]` with etch rate
// `e` (length `n`), integrated to `t_end`. `n_steps == 0` picks the
// stability-limited default.
//
// # Safety
// `e` must point to `n` doubles and `out` to writable storage.
enum AwjmStatus awjm_model_new(double a,
                               double k,
                               double x_min,
                               double x_max,
                               size_t n,
                               const double *e,
                               double t_end,
                               size_t n_steps,
                               struct AwjmModel **out);

// Creates the true model of a named preset.
//
// # Safety
// `name` must be a NUL-terminated string and `out` writable.
enum AwjmStatus awjm_model_from_preset(const char *name, struct AwjmModel **out);

// # Safety
// `model` must come from this library and not be used afterwards.
void awjm_model_free(struct AwjmModel *model);

// Number of grid nodes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t awjm_model_nodes(const struct AwjmModel *model);

// Copies `a`, `k` and the etch rate (`len` must equal the node count).
// Any output pointer may be null to skip it.
//
// # Safety
// Non-null pointers must be writable; `e` must hold `len` doubles.
enum AwjmStatus awjm_model_params(const struct AwjmModel *model,
                                  double *a,
                                  double *k,
                                  double *e,
                                  size_t len);

// Final profile from a flat initial surface.
//
// # Safety
// `z_out` must hold `len` doubles.
enum AwjmStatus awjm_model_forward(const struct AwjmModel *model, double *z_out, size_t len);

// Wraps `count` profiles stored back to back in `profiles`, each on the
// model's grid.
//
// # Safety
// `profiles` must hold `count * nodes` doubles and `out` be writable.
enum AwjmStatus awjm_measurements_new(const struct AwjmModel *model,
                                      const double *profiles,
                                      size_t count,
                                      enum AwjmCombine combine,
                                      struct AwjmMeasurements **out);

// # Safety
// `meas` must come from this library and not be used afterwards.
void awjm_measurements_free(struct AwjmMeasurements *meas);

// Cost of `model` against `meas` and its adjoint gradient. For the
// background regularizer the model itself is the background. `grad_e`
// must hold `len` (node count) doubles; null output pointers are skipped.
//
// # Safety
// Handles must be live; non-null outputs writable.
enum AwjmStatus awjm_gradient(const struct AwjmModel *model,
                              const struct AwjmMeasurements *meas,
                              enum AwjmRegularizer regularizer,
                              double alpha,
                              uint32_t controls_mask,
                              struct AwjmCost *cost,
                              double *grad_a,
                              double *grad_k,
                              double *grad_e,
                              size_t len);

// Largest relative difference between the adjoint gradient and central
// differences with relative step `h`, over every active control.
//
// # Safety
// Handles must be live; `max_rel_error` writable.
enum AwjmStatus awjm_fd_check(const struct AwjmModel *model,
                              const struct AwjmMeasurements *meas,
                              enum AwjmRegularizer regularizer,
                              double alpha,
                              uint32_t controls_mask,
                              double h,
                              double *max_rel_error);

// Minimizes the cost from `start` with projected L-BFGS (controls kept
// nonnegative) and returns the optimum as a new model. `iterations` may be
// null.
//
// # Safety
// Handles must be live; `out` writable.
enum AwjmStatus awjm_identify(const struct AwjmModel *start,
                              const struct AwjmMeasurements *meas,
                              enum AwjmRegularizer regularizer,
                              double alpha,
                              uint32_t controls_mask,
                              size_t max_iters,
                              struct AwjmModel **out,
                              size_t *iterations);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AWJM_H */
