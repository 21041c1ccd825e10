#ifndef HFF_H
#define HFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum HffStatus {
  HFF_STATUS_OK = 0,
  HFF_STATUS_NULL_ARGUMENT = 1,
  HFF_STATUS_INVALID_ARGUMENT = 2,
  HFF_STATUS_DIMENSION = 3,
  HFF_STATUS_CONFIG = 4,
  HFF_STATUS_FORMAT = 5,
  HFF_STATUS_IO = 6,
  HFF_STATUS_ARTIFACT = 7,
  HFF_STATUS_NON_FINITE = 8,
  HFF_STATUS_DIVERGENCE = 9,
  HFF_STATUS_BUFFER_TOO_SMALL = 10,
  HFF_STATUS_PANIC = 11,
} HffStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct HffModel HffModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a `model.bin` file. On success `*out` owns a new handle that must be
 * released with [`hff_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HffStatus hff_model_load(const char *path, struct HffModel **out);

/**
 * Releases a handle from [`hff_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void hff_model_free(struct HffModel *model);

/**
 * Number of classes the model predicts.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum HffStatus hff_model_num_classes(const struct HffModel *model, size_t *out);

/**
 * Number of layers, each of which produces its own prediction.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum HffStatus hff_model_num_layers(const struct HffModel *model, size_t *out);

/**
 * Values per input sample (for example 784 for MNIST).
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum HffStatus hff_model_input_len(const struct HffModel *model, size_t *out);

/**
 * Predicts `n` samples of raw `[0, 1]` pixels (`n x input_len`,
 * channel-major), writing `n` class indices to `out_labels`.
 *
 * # Safety
 * `pixels` must point to `n * input_len` floats and `out_labels` to `n`
 * writable `size_t` values.
 */
enum HffStatus hff_model_predict(const struct HffModel *model,
                                 const float *pixels,
                                 size_t n,
                                 size_t *out_labels);

/**
 * Per-class scores of layer `layer` for `n` samples, written row-major to
 * `out_scores` (`n x classes` doubles; `capacity` is its length). FF models
 * report per-class goodness.
 *
 * # Safety
 * `pixels` must point to `n * input_len` floats and `out_scores` to
 * `capacity` writable doubles.
 */
enum HffStatus hff_model_layer_scores(const struct HffModel *model,
                                      const float *pixels,
                                      size_t n,
                                      size_t layer,
                                      double *out_scores,
                                      size_t capacity);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call on this thread.
 */
const char *hff_last_error(void);

/**
 * Library version as a NUL-terminated string.
 */
const char *hff_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HFF_H */
