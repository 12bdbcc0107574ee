#ifndef FREQBOOT_H
#define FREQBOOT_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FbStatus {
  FB_STATUS_OK = 0,
  FB_STATUS_NULL_ARGUMENT = 1,
  FB_STATUS_INVALID_UTF8 = 2,
  FB_STATUS_CONFIG = 3,
  FB_STATUS_FORMAT = 4,
  FB_STATUS_DATA = 5,
  FB_STATUS_NOT_FOUND = 6,
  FB_STATUS_SHAPE = 7,
  FB_STATUS_STATE = 8,
  FB_STATUS_CONTRACT = 9,
  FB_STATUS_DIVERGENCE = 10,
  FB_STATUS_IO = 11,
  FB_STATUS_BUFFER_TOO_SMALL = 12,
  FB_STATUS_PANIC = 13,
} FbStatus;

/**
 * Opaque dataset handle.
 */
typedef struct FbDataset FbDataset;

/**
 * Opaque handle to a pretrained online/target pair.
 */
typedef struct FbModel FbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fb_version(void);

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `cap` bytes). Returns the full message length excluding the
 * terminator, or 0 when the last call succeeded.
 *
 * # Safety
 * `buf` is null or valid for writes of `cap` bytes.
 */
uintptr_t fb_last_error_message(char *buf, uintptr_t cap);

/**
 * Load split `split` ("train", "val" or "test") of the dataset directory
 * `dir`, z-scored with train statistics.
 *
 * # Safety
 * `dir` and `split` are NUL-terminated strings; `out` is valid for writes.
 */
enum FbStatus fb_dataset_load(const char *dir, const char *split, struct FbDataset **out);

/**
 * Generate the synthetic dataset. `spec_json` is a JSON object overriding
 * fields of the default generator settings, or null for the defaults.
 *
 * # Safety
 * `spec_json` is null or a NUL-terminated string; `out` is valid for writes.
 */
enum FbStatus fb_dataset_generate_synthetic(const char *spec_json,
                                            uint64_t seed,
                                            struct FbDataset **out);

/**
 * Sample count, channels, window length and class count.
 *
 * # Safety
 * `ds` is a live handle; each output pointer is null or valid for writes.
 */
enum FbStatus fb_dataset_shape(const struct FbDataset *ds,
                               uintptr_t *n,
                               uintptr_t *channels,
                               uintptr_t *length,
                               uintptr_t *num_classes);

/**
 * Copy the `n` labels into `out` (capacity `cap`).
 *
 * # Safety
 * `ds` is a live handle; `out` is valid for writes of `cap` values.
 */
enum FbStatus fb_dataset_labels(const struct FbDataset *ds, uint64_t *out, uintptr_t cap);

/**
 * Release a dataset handle. Null is ignored.
 *
 * # Safety
 * `ds` is null or a handle not yet freed.
 */
void fb_dataset_free(struct FbDataset *ds);

/**
 * Load a checkpoint written by the pretraining command.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is valid for writes.
 */
enum FbStatus fb_model_load(const char *path, struct FbModel **out);

/**
 * Flattened representation size `d` produced by [`fb_model_embed`].
 *
 * # Safety
 * `model` is a live handle; `dim` is valid for writes.
 */
enum FbStatus fb_model_embedding_dim(const struct FbModel *model, uintptr_t *dim);

/**
 * Eval-mode encoder representations of every sample, row-major `[n, d]`.
 *
 * # Safety
 * `model` and `ds` are live handles; `out` is valid for writes of `cap`
 * doubles.
 */
enum FbStatus fb_model_embed(const struct FbModel *model,
                             const struct FbDataset *ds,
                             double *out,
                             uintptr_t cap);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void fb_model_free(struct FbModel *model);

/**
 * Accuracy, macro-F1 and (when `per_class_f1` is non-null) the
 * `num_classes` per-class F1 scores of `n` predictions.
 *
 * # Safety
 * `preds` and `labels` are valid for reads of `n` values; `per_class_f1` is
 * null or valid for writes of `num_classes` values.
 */
enum FbStatus fb_compute_metrics(const uint64_t *preds,
                                 const uint64_t *labels,
                                 uintptr_t n,
                                 uintptr_t num_classes,
                                 double *accuracy,
                                 double *macro_f1,
                                 double *per_class_f1);

/**
 * Mean over rows of `‖q/‖q‖ − g/‖g‖‖²` for row-major `[rows, dim]` inputs.
 *
 * # Safety
 * `q` and `g` are valid for reads of `rows * dim` values; `out` is valid for
 * writes.
 */
enum FbStatus fb_regression_loss(const double *q,
                                 const double *g,
                                 uintptr_t rows,
                                 uintptr_t dim,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FREQBOOT_H */
