#ifndef PHOTONSHRINK_H
#define PHOTONSHRINK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_POINTER = 1,
  PS_STATUS_INVALID_ARGUMENT = 2,
  PS_STATUS_IO = 3,
  PS_STATUS_FORMAT = 4,
  PS_STATUS_SHAPE_MISMATCH = 5,
  PS_STATUS_NON_FINITE = 6,
  PS_STATUS_PANIC = 7,
} PsStatus;

/**
 * Synthetic scene selector for [`ps_simulate`].
 */
typedef enum PsScene {
  PS_SCENE_STAIRCASE = 0,
  PS_SCENE_WEDGE = 1,
  PS_SCENE_BLOCKS = 2,
} PsScene;

/**
 * Depth estimator selector for [`ps_reconstruct`].
 */
typedef enum PsMethod {
  PS_METHOD_ARGMAX = 0,
  PS_METHOD_LM_FILTER = 1,
  PS_METHOD_SHRINKAGE = 2,
  PS_METHOD_PRS_NET = 3,
} PsMethod;

/**
 * Photon-count cube.
 */
typedef struct PsCube PsCube;

/**
 * Depth map in meters.
 */
typedef struct PsDepth PsDepth;

/**
 * Trained network.
 */
typedef struct PsModel PsModel;

/**
 * Evaluation of a depth map against ground truth.
 */
typedef struct PsMetrics {
  double rmse;
  double acc_1_01;
  double acc_1_02;
  double acc_1_03;
} PsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, empty after a
 * success. The pointer stays valid until the next `ps_*` call on the same
 * thread.
 */
const char *ps_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ps_version(void);

/**
 * Builds a cube from `bins * rows * cols` pixel-major counts.
 *
 * # Safety
 * `counts` must point to `len` readable values and `out` must be writable.
 */
enum PsStatus ps_cube_from_counts(size_t bins,
                                  size_t rows,
                                  size_t cols,
                                  uint32_t bin_ps,
                                  const uint32_t *counts,
                                  size_t len,
                                  struct PsCube **out);

/**
 * Reads a cube file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum PsStatus ps_cube_read(const char *path, struct PsCube **out);

/**
 * Writes a cube file atomically.
 *
 * # Safety
 * `cube` must be a live handle and `path` a NUL-terminated string.
 */
enum PsStatus ps_cube_write(const struct PsCube *cube, const char *path);

/**
 * Reports the cube dimensions; any output pointer may be null.
 *
 * # Safety
 * `cube` must be a live handle; non-null outputs must be writable.
 */
enum PsStatus ps_cube_dims(const struct PsCube *cube,
                           size_t *bins,
                           size_t *rows,
                           size_t *cols,
                           uint32_t *bin_ps);

/**
 * Copies the pixel-major counts into `dst`, which must hold exactly
 * `bins * rows * cols` values.
 *
 * # Safety
 * `cube` must be a live handle and `dst` must point to `len` writable values.
 */
enum PsStatus ps_cube_counts(const struct PsCube *cube, uint32_t *dst, size_t len);

/**
 * Releases a cube; null is ignored.
 *
 * # Safety
 * `cube` must come from this library and not be used afterwards.
 */
void ps_cube_free(struct PsCube *cube);

/**
 * Simulates a synthetic scene. `gt_out` may be null; otherwise it receives
 * the ground-truth depth map.
 *
 * # Safety
 * `cube_out` must be writable; `gt_out` must be null or writable.
 */
enum PsStatus ps_simulate(enum PsScene scene,
                          size_t rows,
                          size_t cols,
                          double signal,
                          double background,
                          size_t bins,
                          double bin_ps,
                          double fwhm_ps,
                          uint64_t seed,
                          struct PsCube **cube_out,
                          struct PsDepth **gt_out);

/**
 * Loads a trained model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ps_model_free(struct PsModel *model);

/**
 * Estimates a depth map. `model` is required for [`PsMethod::PrsNet`] and
 * ignored otherwise. `patch == 0` processes the whole image; otherwise
 * square patches of that size are placed every `stride` pixels and overlaps
 * are averaged.
 *
 * # Safety
 * `cube` must be a live handle, `model` null or a live handle, `out`
 * writable.
 */
enum PsStatus ps_reconstruct(const struct PsCube *cube,
                             enum PsMethod method,
                             double fwhm_ps,
                             double s0,
                             struct PsModel *model,
                             size_t patch,
                             size_t stride,
                             struct PsDepth **out);

/**
 * Reads a PFM depth map.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum PsStatus ps_depth_read_pfm(const char *path, struct PsDepth **out);

/**
 * Writes a depth map as PFM atomically.
 *
 * # Safety
 * `depth` must be a live handle and `path` a NUL-terminated string.
 */
enum PsStatus ps_depth_write_pfm(const struct PsDepth *depth, const char *path);

/**
 * Reports the depth map size; any output pointer may be null.
 *
 * # Safety
 * `depth` must be a live handle; non-null outputs must be writable.
 */
enum PsStatus ps_depth_dims(const struct PsDepth *depth, size_t *rows, size_t *cols);

/**
 * Copies the row-major depths into `dst`, which must hold `rows * cols`
 * values.
 *
 * # Safety
 * `depth` must be a live handle and `dst` must point to `len` writable values.
 */
enum PsStatus ps_depth_values(const struct PsDepth *depth, double *dst, size_t len);

/**
 * Releases a depth map; null is ignored.
 *
 * # Safety
 * `depth` must come from this library and not be used afterwards.
 */
void ps_depth_free(struct PsDepth *depth);

/**
 * RMSE and accuracy at thresholds 1.01, 1.02 and 1.03.
 *
 * # Safety
 * `pred` and `gt` must be live handles and `out` writable.
 */
enum PsStatus ps_metrics(const struct PsDepth *pred,
                         const struct PsDepth *gt,
                         struct PsMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHOTONSHRINK_H */
