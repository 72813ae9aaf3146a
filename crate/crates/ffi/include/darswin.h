#ifndef DARSWIN_H
#define DARSWIN_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_DOMAIN = 2,
  DS_STATUS_INVALID_DIMENSION = 3,
  DS_STATUS_SHAPE_MISMATCH = 4,
  DS_STATUS_INSUFFICIENT_SAMPLES = 5,
  DS_STATUS_INVALID_VALUE = 6,
  DS_STATUS_IO = 7,
  DS_STATUS_FORMAT = 8,
  DS_STATUS_BUFFER_TOO_SMALL = 9,
  DS_STATUS_PANIC = 10,
} DsStatus;

typedef enum DsProfile {
  DS_PROFILE_G = 0,
  DS_PROFILE_THETA = 1,
  DS_PROFILE_TAN = 2,
} DsProfile;

typedef struct DsGrid DsGrid;

typedef struct DsKnn DsKnn;

typedef struct DsLens DsLens;

typedef struct DsModel DsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread, NUL terminated and
 * truncated to `cap` bytes. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t ds_last_error(char *buf, size_t cap);

/**
 * Unified lens with distortion `xi` in [0, 1] and field of view in degrees.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DsStatus ds_lens_new(double xi, double fov_deg, struct DsLens **out);

/**
 * # Safety
 * `lens` must come from [`ds_lens_new`] and not be used afterwards.
 */
void ds_lens_free(struct DsLens *lens);

/**
 * Normalized image radius of incidence angle `theta` (radians).
 *
 * # Safety
 * Pointers must be valid.
 */
enum DsStatus ds_lens_project(const struct DsLens *lens, double theta, double *radius);

/**
 * Incidence angle of normalized radius `radius`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum DsStatus ds_lens_unproject(const struct DsLens *lens, double radius, double *theta);

/**
 * Polar grid of `n_r x n_phi` patches with `s_r x s_phi` samples each over a
 * `height x width` image.
 *
 * # Safety
 * Pointers must be valid.
 */
enum DsStatus ds_grid_new(const struct DsLens *lens,
                          enum DsProfile profile,
                          size_t n_r,
                          size_t n_phi,
                          size_t s_r,
                          size_t s_phi,
                          size_t height,
                          size_t width,
                          struct DsGrid **out);

/**
 * # Safety
 * `grid` must come from [`ds_grid_new`] and not be used afterwards.
 */
void ds_grid_free(struct DsGrid *grid);

/**
 * Number of sample points, or 0 for a null handle.
 *
 * # Safety
 * `grid` must be null or valid.
 */
size_t ds_grid_sample_count(const struct DsGrid *grid);

/**
 * Writes interleaved `x, y` pixel coordinates of every sample.
 *
 * # Safety
 * `xy` must point to `len` writable doubles.
 */
enum DsStatus ds_grid_points(const struct DsGrid *grid, double *xy, size_t len);

/**
 * Bilinearly samples a row-major `height x width x channels` image.
 * `out` receives `sample_count * channels` values.
 *
 * # Safety
 * `image` must hold `height * width * channels` doubles and `out` `out_len`.
 */
enum DsStatus ds_grid_sample(const struct DsGrid *grid,
                             const double *image,
                             size_t channels,
                             double *out,
                             size_t out_len);

/**
 * # Safety
 * Pointers must be valid.
 */
enum DsStatus ds_knn_new(const struct DsGrid *grid, size_t k, struct DsKnn **out);

/**
 * # Safety
 * `knn` must come from [`ds_knn_new`] and not be used afterwards.
 */
void ds_knn_free(struct DsKnn *knn);

/**
 * Averages `k` neighbor features into each valid pixel. `features` holds
 * `sample_count * dim` values; `out` receives `height * width * dim`.
 *
 * # Safety
 * Buffers must hold the stated lengths.
 */
enum DsStatus ds_knn_project(const struct DsKnn *knn,
                             const double *features,
                             size_t features_len,
                             size_t dim,
                             double *out,
                             size_t out_len);

/**
 * Loads a model checkpoint from a UTF-8 path.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid.
 */
enum DsStatus ds_model_load(const char *path, struct DsModel **out);

/**
 * # Safety
 * `model` must come from [`ds_model_load`] and not be used afterwards.
 */
void ds_model_free(struct DsModel *model);

/**
 * Side length of the square images the model expects, or 0 for null.
 *
 * # Safety
 * `model` must be null or valid.
 */
size_t ds_model_image_size(const struct DsModel *model);

/**
 * Predicts log-depth for a `size x size x 3` RGB image in [0, 1] taken
 * through `lens`. `mask` receives 1 where the prediction is defined.
 *
 * # Safety
 * `rgb` must hold `3 * size * size` doubles; `log_depth` and `mask` `len`
 * entries each.
 */
enum DsStatus ds_model_predict(const struct DsModel *model,
                               const struct DsLens *lens,
                               const double *rgb,
                               double *log_depth,
                               uint8_t *mask,
                               size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DARSWIN_H */
