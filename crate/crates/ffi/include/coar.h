#ifndef COAR_H
#define COAR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Scores unseen classes only.
 */
#define COAR_MODE_ZSL 0

/**
 * Scores seen and unseen classes jointly.
 */
#define COAR_MODE_GZSL 1

typedef enum CoarStatus {
  COAR_STATUS_OK = 0,
  COAR_STATUS_NULL_POINTER = 1,
  COAR_STATUS_INVALID_ARGUMENT = 2,
  COAR_STATUS_IO = 3,
  COAR_STATUS_CONFIG = 4,
  COAR_STATUS_DATASET = 5,
  COAR_STATUS_CHECKPOINT = 6,
  COAR_STATUS_NUMERICAL = 7,
  COAR_STATUS_BUFFER_TOO_SMALL = 8,
  COAR_STATUS_PANIC = 9,
} CoarStatus;

/**
 * Loaded dataset.
 */
typedef struct CoarDataset CoarDataset;

/**
 * Trained model with its parameters.
 */
typedef struct CoarModel CoarModel;

typedef struct CoarDatasetInfo {
  size_t num_samples;
  size_t num_classes;
  size_t num_attributes;
  size_t num_seen;
  size_t num_unseen;
  size_t height;
  size_t width;
  size_t channels;
} CoarDatasetInfo;

/**
 * Per-class mean accuracies. Fields not produced by the mode are NaN.
 */
typedef struct CoarMetrics {
  double t1;
  double acc_u;
  double acc_s;
  double acc_h;
  size_t num_samples;
} CoarMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next failing call.
 */
const char *coar_last_error_message(void);

/**
 * `2·u·s / (u + s)`, and 0 when both are 0.
 */
double coar_harmonic_mean(double acc_u, double acc_s);

/**
 * Generates a synthetic dataset from a JSON spec and writes it to `out_dir`.
 *
 * # Safety
 * Both arguments must be null or valid NUL-terminated strings.
 */
enum CoarStatus coar_synthesize(const char *spec_json, const char *out_dir);

/**
 * # Safety
 * `dir` must be a valid string and `out` a valid pointer.
 */
enum CoarStatus coar_dataset_open(const char *dir, struct CoarDataset **out);

/**
 * # Safety
 * `dataset` must be null or a handle from [`coar_dataset_open`] not yet freed.
 */
void coar_dataset_free(struct CoarDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle and `info` a valid pointer.
 */
enum CoarStatus coar_dataset_info(const struct CoarDataset *dataset, struct CoarDatasetInfo *info);

/**
 * Copies sample `index` (channels-last `H·W·C` floats) into `buf` and its class into `label`.
 *
 * # Safety
 * `buf` must hold `len` floats; `label` may be null.
 */
enum CoarStatus coar_dataset_sample(const struct CoarDataset *dataset,
                                    size_t index,
                                    float *buf,
                                    size_t len,
                                    size_t *label);

/**
 * # Safety
 * `ckpt_dir` must be a valid string and `out` a valid pointer.
 */
enum CoarStatus coar_model_load(const char *ckpt_dir, struct CoarModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`coar_model_load`] not yet freed.
 */
void coar_model_free(struct CoarModel *model);

/**
 * Length of the class feature.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum CoarStatus coar_model_feature_dim(const struct CoarModel *model, size_t *out);

/**
 * Writes the class feature of a channels-last image into `out` (`out_len` ≥ feature dim).
 *
 * # Safety
 * `pixels` must hold `len` floats and `out` must hold `out_len` doubles.
 */
enum CoarStatus coar_model_extract(const struct CoarModel *model,
                                   const float *pixels,
                                   size_t len,
                                   double *out,
                                   size_t out_len);

/**
 * Predicts the global class id of an image among the classes of `mode`.
 *
 * # Safety
 * Handles must be live; `pixels` must hold `len` floats; `class_out` must be valid.
 */
enum CoarStatus coar_model_predict(const struct CoarModel *model,
                                   const struct CoarDataset *dataset,
                                   const float *pixels,
                                   size_t len,
                                   int mode,
                                   size_t *class_out);

/**
 * # Safety
 * Handles must be live and `metrics` a valid pointer.
 */
enum CoarStatus coar_model_evaluate(const struct CoarModel *model,
                                    const struct CoarDataset *dataset,
                                    int mode,
                                    struct CoarMetrics *metrics);

/**
 * Trains from a JSON run configuration (same schema as the CLI's `--config`).
 * When `ckpt_out` is non-null the final checkpoint directory is written there
 * as a NUL-terminated string; `BUFFER_TOO_SMALL` means training finished but
 * the path did not fit in `ckpt_cap` bytes.
 *
 * # Safety
 * `config_json` must be a valid string; `ckpt_out` must be null or hold `ckpt_cap` bytes.
 */
enum CoarStatus coar_train(const char *config_json, char *ckpt_out, size_t ckpt_cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COAR_H */
