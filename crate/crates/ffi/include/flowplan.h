#ifndef FLOWPLAN_H
#define FLOWPLAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum FpStatus {
  FP_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  FP_STATUS_NULL_ARGUMENT = 1,
  /**
   * A value was out of range or a buffer too small.
   */
  FP_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The file could not be read.
   */
  FP_STATUS_IO = 3,
  /**
   * The file is not a valid dataset or checkpoint.
   */
  FP_STATUS_LOAD = 4,
  /**
   * Shapes or dimensions do not fit together.
   */
  FP_STATUS_DIMENSION = 5,
  /**
   * Training or sampling produced non-finite values.
   */
  FP_STATUS_NUMERIC = 6,
  /**
   * Unexpected internal failure.
   */
  FP_STATUS_INTERNAL = 7,
} FpStatus;

/**
 * A trajectory dataset.
 */
typedef struct FpDataset FpDataset;

/**
 * A trained velocity network with its environment and normalisation.
 */
typedef struct FpModel FpModel;

/**
 * Circular workspace obstacle.
 */
typedef struct FpObstacle {
  double cx;
  double cy;
  double radius;
} FpObstacle;

/**
 * Planner settings. Start from [`fp_plan_options_default`].
 */
typedef struct FpPlanOptions {
  uint32_t n_steps;
  uint64_t seed;
  double guidance_scale;
  /**
   * Nonzero enables inference-time trajectory splitting.
   */
  uint8_t split;
  const struct FpObstacle *obstacles;
  size_t n_obstacles;
} FpPlanOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *fp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fp_version(void);

/**
 * Loads a checkpoint written by `flowplan train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FpStatus fp_model_load(const char *path, struct FpModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`fp_model_load`] and not be used afterwards.
 */
void fp_model_free(struct FpModel *model);

/**
 * State dimension D of the model's environment, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fp_model_state_dim(const struct FpModel *model);

/**
 * Planning horizon T (states per plan).
 */
size_t fp_horizon(void);

/**
 * Default planner settings: configured step count, seed 0, unit guidance
 * scale, no splitting, no obstacles.
 */
struct FpPlanOptions fp_plan_options_default(void);

/**
 * Plans from `start` to `goal` (each `dim` values, environment units) and
 * writes the `T × dim` plan row-major into `out`, which holds `out_len`
 * values. `options` may be null for defaults.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `model` must be live.
 */
enum FpStatus fp_plan(const struct FpModel *model,
                      const double *start,
                      const double *goal,
                      size_t dim,
                      const struct FpPlanOptions *options,
                      double *out,
                      size_t out_len);

/**
 * Loads a dataset written by `flowplan gen-data`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FpStatus fp_dataset_load(const char *path, struct FpDataset **out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `dataset` must come from [`fp_dataset_load`] and not be used afterwards.
 */
void fp_dataset_free(struct FpDataset *dataset);

/**
 * Number of trajectories, 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t fp_dataset_len(const struct FpDataset *dataset);

/**
 * State dimension of the dataset, 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t fp_dataset_state_dim(const struct FpDataset *dataset);

/**
 * Copies trajectory `index` (`T × D`, environment units) into `out`.
 *
 * # Safety
 * `out` must be valid for `out_len` values; `dataset` must be live.
 */
enum FpStatus fp_dataset_trajectory(const struct FpDataset *dataset,
                                    size_t index,
                                    double *out,
                                    size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWPLAN_H */
