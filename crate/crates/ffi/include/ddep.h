#ifndef DDEP_H
#define DDEP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DdepStatus {
  DDEP_STATUS_OK = 0,
  DDEP_STATUS_INVALID_ARGUMENT = 1,
  DDEP_STATUS_INVALID_DATA = 2,
  DDEP_STATUS_IO = 3,
  DDEP_STATUS_CHECKPOINT = 4,
  DDEP_STATUS_CONFIG_MISMATCH = 5,
  DDEP_STATUS_NULL_POINTER = 6,
  DDEP_STATUS_UNDEFINED_METRIC = 7,
  DDEP_STATUS_INTERNAL = 8,
  DDEP_STATUS_PANIC = 9,
} DdepStatus;

/**
 * Running confusion matrix for mIoU.
 */
typedef struct DdepConfusion DdepConfusion;

/**
 * A trained network with its input normalization.
 */
typedef struct DdepModel DdepModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * success. Valid until the next call on the same thread.
 */
const char *ddep_last_error_message(void);

/**
 * γ such that the scaled corruption matches a simple one with noise `sigma`.
 *
 * # Safety
 * `out` must be valid for a write.
 */
enum DdepStatus ddep_sigma_to_gamma(double sigma, double *out);

/**
 * Inverse of [`ddep_sigma_to_gamma`].
 *
 * # Safety
 * `out` must be valid for a write.
 */
enum DdepStatus ddep_gamma_to_sigma(double gamma, double *out);

/**
 * Loads a checkpoint. Release the handle with [`ddep_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated UTF-8 string; `out` must be valid for a write.
 */
enum DdepStatus ddep_model_load(const char *path, struct DdepModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`ddep_model_load`] not yet freed.
 */
void ddep_model_free(struct DdepModel *model);

/**
 * Output channels (classes, or 3 for a denoiser) and the number every
 * input height and width must be a multiple of.
 *
 * # Safety
 * `model` must be a live handle; `channels` and `divisor` valid for writes.
 */
enum DdepStatus ddep_model_info(const struct DdepModel *model, size_t *channels, size_t *divisor);

/**
 * Raw network output: `n × C × h × w` for segmentation and denoising
 * heads, `n × C` for a classifier. `out_len` must equal that size.
 *
 * # Safety
 * `model` must be a live handle, `pixels` valid for `n * 3 * h * w` reads
 * and `out` valid for `out_len` writes.
 */
enum DdepStatus ddep_model_infer(const struct DdepModel *model,
                                 const float *pixels,
                                 size_t n,
                                 size_t h,
                                 size_t w,
                                 float *out,
                                 size_t out_len);

/**
 * Per-pixel class ids (`n × h × w`) from a segmentation checkpoint.
 *
 * # Safety
 * As [`ddep_model_infer`], with `mask` valid for `n * h * w` writes.
 */
enum DdepStatus ddep_model_predict_mask(const struct DdepModel *model,
                                        const float *pixels,
                                        size_t n,
                                        size_t h,
                                        size_t w,
                                        uint8_t *mask);

/**
 * # Safety
 * `out` must be valid for a write. Release with [`ddep_confusion_free`].
 */
enum DdepStatus ddep_confusion_new(size_t num_classes, struct DdepConfusion **out);

/**
 * Adds `len` (prediction, ground truth) pixel pairs; ground truth 255 is
 * ignored. The matrix is unchanged on failure.
 *
 * # Safety
 * `cm` must be a live handle; `pred` and `gt` valid for `len` reads.
 */
enum DdepStatus ddep_confusion_update(struct DdepConfusion *cm,
                                      const uint8_t *pred,
                                      const uint8_t *gt,
                                      size_t len);

/**
 * Mean IoU over classes present in prediction or ground truth.
 *
 * # Safety
 * `cm` must be a live handle; `out` valid for a write.
 */
enum DdepStatus ddep_confusion_miou(const struct DdepConfusion *cm, double *out);

/**
 * # Safety
 * `cm` must be null or a live handle.
 */
void ddep_confusion_free(struct DdepConfusion *cm);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDEP_H */
