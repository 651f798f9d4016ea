#ifndef HSRECON_H
#define HSRECON_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HsStatus {
  HS_STATUS_OK = 0,
  HS_STATUS_NULL_POINTER = 1,
  HS_STATUS_INVALID_UTF8 = 2,
  HS_STATUS_OUT_OF_RANGE = 3,
  HS_STATUS_IO = 10,
  HS_STATUS_CONTAINER = 11,
  HS_STATUS_JSON = 12,
  HS_STATUS_DETECTION = 13,
  HS_STATUS_GEOMETRY = 14,
  HS_STATUS_UNSOLVABLE = 15,
  HS_STATUS_INVALID_INPUT = 16,
  HS_STATUS_SHAPE_MISMATCH = 17,
  HS_STATUS_EMPTY_MASK = 18,
  HS_STATUS_EMPTY_SET = 19,
  HS_STATUS_DEGENERATE = 20,
  HS_STATUS_MISSING_FIELD = 21,
  HS_STATUS_NON_FINITE = 22,
  HS_STATUS_DIVERGED = 23,
  HS_STATUS_PANIC = 99,
} HsStatus;

typedef enum HsAlignMode {
  HS_ALIGN_MODE_SCALE_ONLY = 0,
  HS_ALIGN_MODE_SCALE_SHIFT = 1,
} HsAlignMode;

/**
 * Opaque sequence bundle.
 */
typedef struct HsBundle HsBundle;

/**
 * Opaque AlignNet model.
 */
typedef struct HsModel HsModel;

/**
 * Opaque reconstruction result.
 */
typedef struct HsReconstruction HsReconstruction;

/**
 * Opaque body template.
 */
typedef struct HsTemplate HsTemplate;

typedef struct HsAlignment {
  double scale;
  double shift;
  double objective;
  size_t inlier_count;
} HsAlignment;

typedef struct HsDepthMetrics {
  double abs_rel;
  double delta_125;
  double alignment_scale;
  size_t pixels;
} HsDepthMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * Valid until the next call on the same thread.
 */
const char *hs_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *hs_version(void);

/**
 * Robust alignment of `pred` to `target`. `weights` may be null for unit
 * weights. `truncation` selects the objective: negative for plain L1, zero
 * for the default truncation, positive for an explicit threshold.
 *
 * # Safety
 * `pred`, `target` and a non-null `weights` must point to `n` doubles.
 */
enum HsStatus hs_roe_solve(const double *pred,
                           const double *target,
                           const double *weights,
                           size_t n,
                           enum HsAlignMode mode,
                           double truncation,
                           struct HsAlignment *out);

/**
 * Depth metrics over the pixels where `mask` is nonzero. A null mask keeps
 * every pixel with positive ground truth.
 *
 * # Safety
 * `pred`, `gt` and a non-null `mask` must point to `n` elements.
 */
enum HsStatus hs_depth_metrics(const double *pred,
                               const double *gt,
                               const uint8_t *mask,
                               size_t n,
                               bool align,
                               struct HsDepthMetrics *out);

/**
 * # Safety
 * `dir` must be a nul-terminated string; `out` must be writable.
 */
enum HsStatus hs_bundle_open(const char *dir, struct HsBundle **out);

/**
 * # Safety
 * `bundle` must be null or a handle from [`hs_bundle_open`], freed once.
 */
void hs_bundle_free(struct HsBundle *bundle);

/**
 * Loads weights from a directory holding `manifest.json`.
 *
 * # Safety
 * `dir` must be a nul-terminated string; `out` must be writable.
 */
enum HsStatus hs_model_load(const char *dir, struct HsModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`hs_model_load`], freed once.
 */
void hs_model_free(struct HsModel *model);

/**
 * Loads a template directory, or the built-in template when `dir` is null.
 *
 * # Safety
 * A non-null `dir` must be a nul-terminated string; `out` must be writable.
 */
enum HsStatus hs_template_load(const char *dir, struct HsTemplate **out);

/**
 * # Safety
 * `tmpl` must be null or a handle from [`hs_template_load`], freed once.
 */
void hs_template_free(struct HsTemplate *tmpl);

/**
 * Runs the full reconstruction. `f32_accumulation` selects the single
 * precision accumulator for the pointmap scaling.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum HsStatus hs_reconstruct(const struct HsBundle *bundle,
                             const struct HsModel *model,
                             const struct HsTemplate *tmpl,
                             bool f32_accumulation,
                             struct HsReconstruction **out);

/**
 * # Safety
 * `rec` must be null or a handle from [`hs_reconstruct`], freed once.
 */
void hs_reconstruction_free(struct HsReconstruction *rec);

/**
 * Number of frames, or 0 for a null handle.
 *
 * # Safety
 * `rec` must be null or live.
 */
size_t hs_reconstruction_frames(const struct HsReconstruction *rec);

/**
 * Metric scale, or NaN for a null handle.
 *
 * # Safety
 * `rec` must be null or live.
 */
double hs_reconstruction_scale(const struct HsReconstruction *rec);

/**
 * Metric body translation of `frame` into `out[0..3]`.
 *
 * # Safety
 * `rec` must be live; `out` must point to 3 writable doubles.
 */
enum HsStatus hs_reconstruction_translation(const struct HsReconstruction *rec,
                                            size_t frame,
                                            double *out);

/**
 * Writes the PLY export to `dir`, in world coordinates when `world` is set.
 *
 * # Safety
 * Handles must be live; `dir` must be a nul-terminated string.
 */
enum HsStatus hs_reconstruction_export(const struct HsReconstruction *rec,
                                       const struct HsTemplate *tmpl,
                                       const char *dir,
                                       bool world);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HSRECON_H */
