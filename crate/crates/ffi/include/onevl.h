/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef ONEVL_H
#define ONEVL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define ONEVL_MODE_ANSWER_ONLY 0

#define ONEVL_MODE_EXPLICIT_COT 1

#define ONEVL_MODE_LATENT_PREFILL 2

#define ONEVL_MODE_LATENT_ITERATIVE 3

#define ONEVL_MODE_MLP_HEAD 4

#define ONEVL_SCENARIO_STRAIGHT 0

#define ONEVL_SCENARIO_SLOW_LEAD 1

#define ONEVL_SCENARIO_CUT_IN 2

#define ONEVL_SCENARIO_WORKZONE_TAPER 3

/**
 * Number of doubles written by the predict functions: 8 waypoints × (x, y).
 */
#define ONEVL_TRAJECTORY_LEN 16

/**
 * Result code of every exported function.
 */
typedef enum OnevlStatus {
  ONEVL_STATUS_OK = 0,
  ONEVL_STATUS_NULL_ARGUMENT = 1,
  ONEVL_STATUS_INVALID_UTF8 = 2,
  /**
   * A file could not be read or is not a valid artifact.
   */
  ONEVL_STATUS_IO = 3,
  /**
   * Checkpoint and codebook disagree, or a setting is out of range.
   */
  ONEVL_STATUS_CONFIG = 4,
  ONEVL_STATUS_INVALID_INPUT = 5,
  /**
   * The model produced no parsable trajectory; outputs are NaN.
   */
  ONEVL_STATUS_DECODE_FAILURE = 6,
  ONEVL_STATUS_PANIC = 7,
} OnevlStatus;

/**
 * A loaded model with its vocabulary and visual codebook.
 */
typedef struct OnevlModel OnevlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model checkpoint and the visual codebook it was trained with.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be a valid pointer.
 */
enum OnevlStatus onevl_model_load(const char *checkpoint_path,
                                  const char *codebook_path,
                                  struct OnevlModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`onevl_model_load`] not yet freed.
 */
void onevl_model_free(struct OnevlModel *model);

/**
 * Raster height and width the model expects.
 *
 * # Safety
 * `model` must be a live handle; `h` and `w` must be valid pointers.
 */
enum OnevlStatus onevl_model_raster_size(const struct OnevlModel *model, size_t *h, size_t *w);

/**
 * Predicts a trajectory from a row-major raster of cell classes and the
 * ego-state sentence. Writes 16 doubles (x0, y0, …, x7, y7) in meters.
 *
 * # Safety
 * `cells` must hold `n_cells` bytes; `ego_state_text` must be NUL-terminated;
 * `out_xy` must hold 16 doubles; `out_decoded_tokens` may be null.
 */
enum OnevlStatus onevl_predict(const struct OnevlModel *model,
                               const uint8_t *cells,
                               size_t n_cells,
                               const char *ego_state_text,
                               uint32_t mode,
                               double *out_xy,
                               size_t *out_decoded_tokens);

/**
 * Generates the simulator scene for (`seed`, `scenario`) and predicts on it.
 *
 * # Safety
 * As for [`onevl_predict`].
 */
enum OnevlStatus onevl_predict_scenario(const struct OnevlModel *model,
                                        uint64_t seed,
                                        uint32_t scenario,
                                        uint32_t mode,
                                        double *out_xy,
                                        size_t *out_decoded_tokens);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *onevl_last_error(void);

/**
 * Library version, NUL-terminated and static.
 */
const char *onevl_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ONEVL_H */
