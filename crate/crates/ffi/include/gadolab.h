#ifndef GADOLAB_H
#define GADOLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GadoStatus {
  GADO_STATUS_OK = 0,
  GADO_STATUS_NULL_POINTER = 1,
  GADO_STATUS_INVALID_ARGUMENT = 2,
  GADO_STATUS_SHAPE = 3,
  GADO_STATUS_NUMERIC = 4,
  GADO_STATUS_INTEGRATION = 5,
  GADO_STATUS_IO = 6,
  GADO_STATUS_FORMAT = 7,
  GADO_STATUS_PANIC = 8,
} GadoStatus;

/**
 * Which array of a phantom volume to copy out.
 */
typedef enum GadoVolumeField {
  GADO_VOLUME_FIELD_PRE = 0,
  GADO_VOLUME_FIELD_POST = 1,
  /**
   * Region of interest as 0/1 values.
   */
  GADO_VOLUME_FIELD_ROI = 2,
  /**
   * Enhancing voxels as 0/1 values.
   */
  GADO_VOLUME_FIELD_ENHANCING = 3,
} GadoVolumeField;

/**
 * A validated run configuration.
 */
typedef struct GadoConfig GadoConfig;

/**
 * A generated pre/post phantom volume, stored `[H, W, D]` row-major.
 */
typedef struct GadoVolume GadoVolume;

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *gado_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gado_version(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void gado_string_free(char *s);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GadoStatus gado_config_new(struct GadoConfig **out);

/**
 * Parses a JSON configuration; omitted keys take their defaults.
 *
 * # Safety
 * `json` must be NUL-terminated and `out` a valid pointer.
 */
enum GadoStatus gado_config_from_json(const char *json, struct GadoConfig **out);

/**
 * Applies one `key.path=value` override. The handle is unchanged on failure.
 *
 * # Safety
 * `cfg` must be a live handle and `assignment` NUL-terminated.
 */
enum GadoStatus gado_config_set(struct GadoConfig *cfg, const char *assignment);

/**
 * Serializes the configuration; free the result with [`gado_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum GadoStatus gado_config_to_json(const struct GadoConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a live handle, and not used afterwards.
 */
void gado_config_free(struct GadoConfig *cfg);

/**
 * Generates the run's datasets.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum GadoStatus gado_run_gen(const struct GadoConfig *cfg);

/**
 * Trains `model` ("e2e", "dm", "fm") on `modality` ("t1", "t1w"). NULL
 * selects every configured model or modality.
 *
 * # Safety
 * `cfg` must be a live handle; the strings NULL or NUL-terminated.
 */
enum GadoStatus gado_run_train(const struct GadoConfig *cfg,
                               const char *model,
                               const char *modality);

/**
 * Writes test-slice predictions or posterior samples. NULL arguments as
 * for [`gado_run_train`].
 *
 * # Safety
 * `cfg` must be a live handle; the strings NULL or NUL-terminated.
 */
enum GadoStatus gado_run_sample(const struct GadoConfig *cfg,
                                const char *model,
                                const char *modality);

/**
 * Writes `reports/metrics.csv`.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum GadoStatus gado_run_eval(const struct GadoConfig *cfg);

/**
 * Writes `reports/sweep.csv` and the sweep plots.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum GadoStatus gado_run_sweep(const struct GadoConfig *cfg);

/**
 * Generates one phantom from a JSON recipe (NULL for the default recipe).
 *
 * # Safety
 * `recipe_json` must be NULL or NUL-terminated; `out` a valid pointer.
 */
enum GadoStatus gado_phantom_generate(const char *recipe_json, struct GadoVolume **out);

/**
 * # Safety
 * `vol` must be a live handle; the outputs valid pointers.
 */
enum GadoStatus gado_volume_dims(const struct GadoVolume *vol,
                                 size_t *height,
                                 size_t *width,
                                 size_t *depth);

/**
 * Copies one field into `buf`, which must hold exactly `H * W * D` values.
 *
 * # Safety
 * `vol` must be a live handle and `buf` writable for `len` floats.
 */
enum GadoStatus gado_volume_copy(const struct GadoVolume *vol,
                                 enum GadoVolumeField field,
                                 float *buf,
                                 size_t len);

/**
 * # Safety
 * `vol` must be NULL or a live handle, and not used afterwards.
 */
void gado_volume_free(struct GadoVolume *vol);

/**
 * Dice and Jaccard of two masks of `len` bytes (nonzero = set).
 *
 * # Safety
 * `pred` and `gt` must be readable for `len` bytes; outputs valid pointers.
 */
enum GadoStatus gado_dice_jaccard(const uint8_t *pred,
                                  const uint8_t *gt,
                                  size_t len,
                                  double *dice,
                                  double *jaccard);

/**
 * Marks in `mask_out` the `round(p / 100 * |ROI|)` ROI voxels with the
 * largest `|field|`, ties in index order.
 *
 * # Safety
 * `field` readable for `len` floats, `roi` for `len` bytes, `mask_out`
 * writable for `len` bytes.
 */
enum GadoStatus gado_threshold_segment(const float *field,
                                       const uint8_t *roi,
                                       size_t len,
                                       double percent,
                                       uint8_t *mask_out);

/**
 * Pearson correlation and two-sided p-value of two `len`-value arrays.
 *
 * # Safety
 * `u` and `v` readable for `len` floats; outputs valid pointers.
 */
enum GadoStatus gado_pearson(const float *u,
                             const float *v,
                             size_t len,
                             double *r,
                             double *p_value);

/**
 * Mean SSIM of two row-major `height x width` images with dynamic range `range`.
 *
 * # Safety
 * `a` and `b` readable for `height * width` floats; `result` a valid pointer.
 */
enum GadoStatus gado_ssim(const float *a,
                          const float *b,
                          size_t height,
                          size_t width,
                          double range,
                          double *result);

#endif  /* GADOLAB_H */
