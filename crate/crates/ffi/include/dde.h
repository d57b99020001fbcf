#ifndef DDE_H
#define DDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DdeStatus {
  DDE_STATUS_OK = 0,
  DDE_STATUS_NULL_POINTER = 1,
  DDE_STATUS_INVALID_ARGUMENT = 2,
  DDE_STATUS_OUT_OF_RANGE = 3,
  DDE_STATUS_DIMENSION_MISMATCH = 4,
  DDE_STATUS_ZERO_VARIANCE = 5,
  DDE_STATUS_NON_FINITE = 6,
  DDE_STATUS_IO = 7,
  DDE_STATUS_FORMAT = 8,
  DDE_STATUS_INCOMPATIBLE = 9,
  DDE_STATUS_INTERNAL = 99,
} DdeStatus;

/**
 * Which calibration array an update targets.
 */
typedef enum DdeRole {
  DDE_ROLE_TARGET_WINNER = 0,
  DDE_ROLE_TARGET_LOSER = 1,
  DDE_ROLE_REFERENCE_WINNER = 2,
  DDE_ROLE_REFERENCE_LOSER = 3,
} DdeRole;

/**
 * Training objective.
 */
typedef enum DdeMethod {
  DDE_METHOD_DDE = 0,
  DDE_METHOD_DDE_SINGLE = 1,
  DDE_METHOD_DDE_STEP = 2,
  DDE_METHOD_UNIFORM = 3,
  DDE_METHOD_DISCOUNTED = 4,
  DDE_METHOD_SFT = 5,
} DdeMethod;

/**
 * Opaque calibration table.
 */
typedef struct DdeCalibrationTable DdeCalibrationTable;

/**
 * Opaque noise predictor.
 */
typedef struct DdePredictor DdePredictor;

/**
 * Opaque diffusion schedule.
 */
typedef struct DdeSchedule DdeSchedule;

/**
 * One preference pair and the noise used to diffuse it to step `t`.
 */
typedef struct DdePairInput {
  size_t class_index;
  /**
   * Winner sample, `dim` doubles.
   */
  const double *x0_winner;
  /**
   * Loser sample, `dim` doubles.
   */
  const double *x0_loser;
  const double *noise_winner;
  const double *noise_loser;
  size_t dim;
  size_t t;
} DdePairInput;

/**
 * Scalar results of a loss evaluation. Fields that a method does not use
 * are zero.
 */
typedef struct DdeLossOutput {
  double loss;
  double logit;
  double correction;
  double mse_target_winner;
  double mse_reference_winner;
  double mse_target_loser;
  double mse_reference_loser;
} DdeLossOutput;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dde_version(void);

/**
 * Message for the last failed call on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *dde_last_error(void);

/**
 * Linear-beta schedule with `steps` steps.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum DdeStatus dde_schedule_new_linear(size_t steps,
                                       double beta_start,
                                       double beta_end,
                                       struct DdeSchedule **out_schedule);

/**
 * # Safety
 * `schedule` must come from `dde_schedule_new_linear` and not be used
 * afterwards. Null is ignored.
 */
void dde_schedule_free(struct DdeSchedule *schedule);

/**
 * Number of steps `T`, or 0 for a null handle.
 *
 * # Safety
 * `schedule` must be null or a live handle.
 */
size_t dde_schedule_steps(const struct DdeSchedule *schedule);

/**
 * `alpha_bar(t)` for `0 <= t <= T`.
 *
 * # Safety
 * `schedule` must be a live handle and `out_value` writable.
 */
enum DdeStatus dde_schedule_alpha_bar(const struct DdeSchedule *schedule,
                                      size_t t,
                                      double *out_value);

/**
 * Single-shot amplification `sqrt((1 - alpha_bar) / alpha_bar)` at step `t`.
 *
 * # Safety
 * `schedule` must be a live handle and `out_value` writable.
 */
enum DdeStatus dde_schedule_single_shot_coefficient(const struct DdeSchedule *schedule,
                                                    size_t t,
                                                    double *out_value);

/**
 * Loads the predictor stored in a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_predictor` writable.
 */
enum DdeStatus dde_predictor_load(const char *path_, struct DdePredictor **out_predictor);

/**
 * Writes the predictor as a model-only checkpoint.
 *
 * # Safety
 * `predictor` must be a live handle and `path` NUL-terminated.
 */
enum DdeStatus dde_predictor_save(const struct DdePredictor *predictor, const char *path_);

/**
 * # Safety
 * `predictor` must come from this library and not be used afterwards.
 * Null is ignored.
 */
void dde_predictor_free(struct DdePredictor *predictor);

/**
 * Data dimension `d`, or 0 for a null handle.
 *
 * # Safety
 * `predictor` must be null or a live handle.
 */
size_t dde_predictor_input_dim(const struct DdePredictor *predictor);

/**
 * Number of parameters, or 0 for a null handle.
 *
 * # Safety
 * `predictor` must be null or a live handle.
 */
size_t dde_predictor_num_params(const struct DdePredictor *predictor);

/**
 * Predicted noise for `x_t` (length `dim`) at step `t` and `class`, written
 * to `out_eps` (length `dim`).
 *
 * # Safety
 * Pointers must be valid for `dim` doubles.
 */
enum DdeStatus dde_predictor_predict(const struct DdePredictor *predictor,
                                     const double *x_t,
                                     size_t dim,
                                     size_t t,
                                     size_t class_,
                                     double *out_eps);

/**
 * Zeroed table for `steps` indices with EMA rate `ema_decay`.
 *
 * # Safety
 * `out_table` must be writable.
 */
enum DdeStatus dde_table_new(size_t steps,
                             double ema_decay,
                             struct DdeCalibrationTable **out_table);

/**
 * # Safety
 * `table` must come from `dde_table_new` and not be used afterwards. Null
 * is ignored.
 */
void dde_table_free(struct DdeCalibrationTable *table);

/**
 * One EMA step of entry `k` in `role` towards `observation`. The change in
 * the entry is written to `out_delta` when it is not null.
 *
 * # Safety
 * `table` must be a live handle; `out_delta` null or writable.
 */
enum DdeStatus dde_table_ema_update(struct DdeCalibrationTable *table,
                                    enum DdeRole role_,
                                    size_t k,
                                    double observation,
                                    double *out_delta);

/**
 * Reads entry `k` of `role`.
 *
 * # Safety
 * `table` must be a live handle and `out_value` writable.
 */
enum DdeStatus dde_table_get(const struct DdeCalibrationTable *table,
                             enum DdeRole role_,
                             size_t k,
                             double *out_value);

/**
 * Correction term for step `t`: the sum over `k = t..T-1` of the combined
 * calibration differences.
 *
 * # Safety
 * `table` must be a live handle and `out_value` writable.
 */
enum DdeStatus dde_table_correction_term(const struct DdeCalibrationTable *table,
                                         size_t t,
                                         double *out_value);

/**
 * Closed-form calibration observation at step `t >= 2` for a posterior and
 * a model mean of length `dim`, both with the schedule's posterior variance.
 *
 * # Safety
 * Mean pointers must be valid for `dim` doubles; `out_value` writable.
 */
enum DdeStatus dde_calibration_observation(const struct DdeSchedule *schedule,
                                           const double *posterior_mean,
                                           const double *model_mean,
                                           size_t dim,
                                           size_t t,
                                           double *out_value);

/**
 * Evaluates `method` for one pair. When `out_grad` is not null it receives
 * the gradient with respect to the target's parameters (`grad_len` must
 * equal the parameter count).
 *
 * # Safety
 * Handles must be live, the pair pointers valid for `dim` doubles and
 * `out_grad` null or valid for `grad_len` doubles.
 */
enum DdeStatus dde_pair_loss(const struct DdeSchedule *schedule,
                             const struct DdePredictor *target,
                             const struct DdePredictor *reference,
                             const struct DdeCalibrationTable *table,
                             enum DdeMethod method_,
                             double beta_dpo,
                             const struct DdePairInput *pair,
                             struct DdeLossOutput *out_loss,
                             double *out_grad,
                             size_t grad_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDE_H */
