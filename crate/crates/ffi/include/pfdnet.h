#ifndef PFDNET_H
#define PFDNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every exported function.
 */
typedef enum {
  PFD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PFD_STATUS_NULL_POINTER = 1,
  /**
   * Shapes, sizes or buffer lengths are inconsistent.
   */
  PFD_STATUS_SHAPE = 2,
  /**
   * A value lies outside its domain, such as a negative rate or a NaN.
   */
  PFD_STATUS_DOMAIN = 3,
  /**
   * A model needs an input that was not supplied, or an argument is
   * not valid for this call.
   */
  PFD_STATUS_USAGE = 4,
  /**
   * A file could not be read or is not a valid checkpoint.
   */
  PFD_STATUS_FORMAT = 5,
  /**
   * Input data is inconsistent, such as a head outside the image.
   */
  PFD_STATUS_DATA = 6,
  /**
   * A computation produced a non-finite value.
   */
  PFD_STATUS_NUMERICAL = 7,
  /**
   * The output buffer is too small; the needed size has been written.
   */
  PFD_STATUS_BUFFER_TOO_SMALL = 8,
  /**
   * The call panicked. This indicates a bug in the library.
   */
  PFD_STATUS_INTERNAL = 9,
} PfdStatus;

/**
 * Loaded counting network.
 */
typedef struct PfdModel PfdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the last failed call on this thread into `buf`
 * as a NUL-terminated string, truncating to `cap` bytes. Returns the
 * full message length in bytes, excluding the terminator.
 *
 * # Safety
 *
 * `buf` must be null or writable for `cap` bytes.
 */
size_t pfd_last_error(char *buf, size_t cap);

/**
 * Loads a counting-network checkpoint from `path` (UTF-8, NUL-terminated)
 * and stores a new handle in `*out`.
 *
 * # Safety
 *
 * `path` must be a NUL-terminated string and `out` writable.
 */
PfdStatus pfd_model_load(const char *path, PfdModel **out);

/**
 * Releases a handle from [`pfd_model_load`]. Null is ignored.
 *
 * # Safety
 *
 * `model` must be null or a handle from [`pfd_model_load`] that has not been freed.
 */
void pfd_model_free(PfdModel *model);

/**
 * Predicts the density map of one `3 x h x w` image with values in
 * `[0, 1]`.
 *
 * `persp` is an `h x w` perspective map, required by models trained on
 * ground-truth or mean perspective and ignored otherwise (pass null).
 * The map shape is written to `*out_h` and `*out_w`; when it exceeds
 * `cap` values the call returns `BufferTooSmall` without writing `out`.
 *
 * # Safety
 *
 * Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
 */
PfdStatus pfd_model_predict(const PfdModel *model,
                            const float *image,
                            size_t h,
                            size_t w,
                            const float *persp,
                            float *out,
                            size_t cap,
                            size_t *out_h,
                            size_t *out_w);

/**
 * Fractional-dilation convolution with stride 1 and zero padding.
 *
 * `x` is `n x cin x h x w`, `rates` holds one `h x w` map per item (or a
 * single map shared by all items when `rate_maps == 1`), `bias` may be
 * null for zero bias and `y` receives `n x cout x h x w` values.
 *
 * # Safety
 *
 * Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
 */
PfdStatus pfd_fdconv_forward(const float *x,
                             size_t n,
                             size_t cin,
                             size_t h,
                             size_t w,
                             const float *kernel,
                             const float *bias,
                             size_t cout,
                             size_t k,
                             const float *rates,
                             size_t rate_maps_count,
                             float *y);

/**
 * Backward pass of [`pfd_fdconv_forward`] for the upstream gradient `dy`
 * (`n x cout x h x w`).
 *
 * Writes `d_x` (like `x`), `d_kernel` (like `kernel`), `d_bias` (`cout`)
 * and `d_rates` (like `rates`). Any output pointer may be null to skip it.
 *
 * # Safety
 *
 * Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
 */
PfdStatus pfd_fdconv_backward(const float *x,
                              size_t n,
                              size_t cin,
                              size_t h,
                              size_t w,
                              const float *kernel,
                              size_t cout,
                              size_t k,
                              const float *rates,
                              size_t rate_maps_count,
                              const float *dy,
                              float *d_x,
                              float *d_kernel,
                              float *d_bias,
                              float *d_rates);

/**
 * Bilinear sample of an `h x w` plane at `(i, j)`, with zero outside the
 * plane. Writes the value and its derivatives along rows and columns.
 *
 * # Safety
 *
 * Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
 */
PfdStatus pfd_bilinear_sample(const float *plane,
                              size_t h,
                              size_t w,
                              float i,
                              float j,
                              float *value,
                              float *d_di,
                              float *d_dj);

/**
 * Geometry-adaptive density map of `count` heads given as interleaved
 * `(x, y)` pixel coordinates. Writes `h x w` values to `out`.
 *
 * # Safety
 *
 * Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
 */
PfdStatus pfd_make_density(const float *xy,
                           size_t count,
                           size_t h,
                           size_t w,
                           float *out);

/**
 * Grid Average Mean absolute Error of two `h x w` maps at `level`.
 *
 * # Safety
 *
 * Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
 */
PfdStatus pfd_game(const float *pred,
                   const float *gt,
                   size_t h,
                   size_t w,
                   uint32_t level,
                   double *out);

/**
 * Mean absolute and root mean squared error over `n` image counts.
 *
 * # Safety
 *
 * Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
 */
PfdStatus pfd_mae_rmse(const double *pred,
                       const double *gt,
                       size_t n,
                       double *mae,
                       double *rmse);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PFDNET_H */
