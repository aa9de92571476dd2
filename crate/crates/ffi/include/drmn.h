#ifndef DRMN_H
#define DRMN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum DrmnStatus {
  DRMN_STATUS_OK = 0,
  DRMN_STATUS_NULL_POINTER = 1,
  DRMN_STATUS_INVALID_ARGUMENT = 2,
  DRMN_STATUS_IO = 3,
  DRMN_STATUS_SHAPE = 4,
  DRMN_STATUS_NUMERIC = 5,
  DRMN_STATUS_BUFFER_TOO_SMALL = 6,
  DRMN_STATUS_PANIC = 7,
} DrmnStatus;

/**
 * Model parameters plus the run configuration that shaped them.
 */
typedef struct DrmnModel DrmnModel;

/**
 * Synthetic scene with its feature pyramid.
 */
typedef struct DrmnScene DrmnScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *drmn_version(void);

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated
 * to fit) into `buf` and returns its full length excluding the terminator.
 * `buf` may be null to query the length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t drmn_last_error(char *buf, size_t len);

/**
 * Generates a scene. `config` is config-file text or null for defaults.
 *
 * # Safety
 * `config` must be null or a NUL-terminated string; `out` must be writable.
 */
enum DrmnStatus drmn_scene_generate(const char *config, uint64_t seed, struct DrmnScene **out);

/**
 * Height, width and phrase count of a scene. Any output may be null.
 *
 * # Safety
 * `scene` must come from `drmn_scene_generate`; outputs null or writable.
 */
enum DrmnStatus drmn_scene_dims(const struct DrmnScene *scene,
                                size_t *height,
                                size_t *width,
                                size_t *phrases);

/**
 * Writes the ground-truth mask (row-major, 0/1) of one phrase.
 *
 * # Safety
 * `scene` must be a live handle and `out` valid for `len` bytes.
 */
enum DrmnStatus drmn_scene_mask(const struct DrmnScene *scene,
                                size_t phrase,
                                uint8_t *out,
                                size_t len);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void drmn_scene_free(struct DrmnScene *scene);

/**
 * Freshly initialised model. `config` as for `drmn_scene_generate`.
 *
 * # Safety
 * `config` must be null or a NUL-terminated string; `out` must be writable.
 */
enum DrmnStatus drmn_model_init(const char *config, uint64_t seed, struct DrmnModel **out);

/**
 * Loads a checkpoint directory written by `drmn train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum DrmnStatus drmn_model_load(const char *dir, struct DrmnModel **out);

/**
 * Number of refinement rounds; predictions exist for `0..=rounds`.
 *
 * # Safety
 * `model` must be a live handle and `rounds` writable.
 */
enum DrmnStatus drmn_model_rounds(const struct DrmnModel *model, size_t *rounds);

/**
 * Per-pixel probabilities after `round` (0 is the initial map) for every
 * phrase of `scene`: `phrases × height × width` values, row-major.
 *
 * # Safety
 * Handles must be live and `out` valid for `len` doubles.
 */
enum DrmnStatus drmn_model_predict(const struct DrmnModel *model,
                                   const struct DrmnScene *scene,
                                   size_t round,
                                   double *out,
                                   size_t len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void drmn_model_free(struct DrmnModel *model);

/**
 * Runs the alternating assignment problem given as JSON (same schema as
 * `drmn oracle`). Writes the objective trace (initial value, then one per
 * iteration, so `iters + 1` values) and its length to `written`. A
 * hard-assignment objective that increases returns `DRMN_STATUS_NUMERIC`
 * with the trace still written.
 *
 * # Safety
 * `problem` must be NUL-terminated; `objectives` valid for `len` doubles;
 * `written` writable.
 */
enum DrmnStatus drmn_cluster_alternate(const char *problem,
                                       double *objectives,
                                       size_t len,
                                       size_t *written);

/**
 * Area under the recall-vs-threshold curve (thresholds 0, 0.01, ..., 1) for
 * `n` per-phrase IoUs.
 *
 * # Safety
 * `ious` must be valid for `n` doubles and `out` writable.
 */
enum DrmnStatus drmn_average_recall(const double *ious, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRMN_H */
