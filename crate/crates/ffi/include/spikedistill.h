#ifndef SPIKEDISTILL_H
#define SPIKEDISTILL_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Norm selector for the spike-level losses.
 */
typedef enum SdNorm {
  SD_NORM_L1 = 1,
  SD_NORM_L2 = 2,
} SdNorm;

/**
 * Status codes returned by every fallible function.
 */
typedef enum SdStatus {
  SD_STATUS_OK = 0,
  /**
   * Null pointer, zero count or a buffer that is too small.
   */
  SD_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Configuration, architecture or shape mismatch.
   */
  SD_STATUS_CONFIG = 2,
  /**
   * Unreadable, malformed or inconsistent file.
   */
  SD_STATUS_DATA = 3,
  /**
   * Non-finite values or a diverged computation.
   */
  SD_STATUS_NUMERIC = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  SD_STATUS_INTERNAL = 5,
} SdStatus;

/**
 * Opaque labelled image dataset.
 */
typedef struct SdDataset SdDataset;

/**
 * Opaque trained network.
 */
typedef struct SdNetwork SdNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the thread.
 */
const char *sd_last_error(void);

/**
 * Loads a checkpoint. The network is frozen.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SdStatus sd_network_load(const char *path, struct SdNetwork **out);

/**
 * Writes the network to `path` atomically.
 *
 * # Safety
 * `net` must come from [`sd_network_load`]; `path` must be NUL-terminated.
 */
enum SdStatus sd_network_save(const struct SdNetwork *net,
                              const char *path,
                              uint64_t seed,
                              uint64_t epoch);

/**
 * # Safety
 * `net` must be null or come from [`sd_network_load`], and not be used afterwards.
 */
void sd_network_free(struct SdNetwork *net);

/**
 * Copies `timesteps`, input width and class count. Any out pointer may be null.
 *
 * # Safety
 * Non-null pointers must be valid for writes.
 */
enum SdStatus sd_network_shape(const struct SdNetwork *net,
                               size_t *timesteps,
                               size_t *inputs,
                               size_t *classes);

/**
 * Runs `count` images (8-bit pixels, `count * inputs` bytes) through the
 * network and writes the spike accumulation, `timesteps * classes * count`
 * values.
 *
 * # Safety
 * `pixels` must hold `count * inputs` bytes and `sat` `sat_len` doubles.
 */
enum SdStatus sd_network_infer(const struct SdNetwork *net,
                               const uint8_t *pixels,
                               size_t count,
                               double *sat,
                               size_t sat_len);

/**
 * Writes one predicted class per image: the arg-max of the summed spike counts.
 *
 * # Safety
 * `pixels` must hold `count * inputs` bytes and `labels` `count` entries.
 */
enum SdStatus sd_network_predict(const struct SdNetwork *net,
                                 const uint8_t *pixels,
                                 size_t count,
                                 uint32_t *labels);

/**
 * Classification accuracy of the network on a dataset, in `[0, 1]`.
 *
 * # Safety
 * Handles must be live; `accuracy` must be valid for writes.
 */
enum SdStatus sd_network_evaluate(const struct SdNetwork *net,
                                  const struct SdDataset *dataset,
                                  double *accuracy);

/**
 * Loads an IDX image/label pair; either file may be gzip-compressed.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be valid for writes.
 */
enum SdStatus sd_dataset_load_idx(const char *images, const char *labels, struct SdDataset **out);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or live.
 */
size_t sd_dataset_len(const struct SdDataset *dataset);

/**
 * Pixels per image, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or live.
 */
size_t sd_dataset_pixels(const struct SdDataset *dataset);

/**
 * Copies sample `index` into `pixels` (at least `pixels()` bytes) and its label.
 *
 * # Safety
 * `dataset` must be live; `pixels` must hold `pixels_len` bytes.
 */
enum SdStatus sd_dataset_sample(const struct SdDataset *dataset,
                                size_t index,
                                uint8_t *pixels,
                                size_t pixels_len,
                                uint32_t *label);

/**
 * # Safety
 * `dataset` must be null or come from [`sd_dataset_load_idx`], and not be used afterwards.
 */
void sd_dataset_free(struct SdDataset *dataset);

/**
 * Whole-sequence spike distance between two accumulations, averaged over the batch.
 *
 * # Safety
 * `teacher` and `student` must each hold `timesteps * classes * batch` doubles.
 */
enum SdStatus sd_loss_full(const double *teacher,
                           const double *student,
                           size_t timesteps,
                           size_t classes,
                           size_t batch,
                           enum SdNorm norm,
                           double *out);

/**
 * Sliding-window spike distance with window `delta` and the given stride.
 *
 * # Safety
 * As for [`sd_loss_full`].
 */
enum SdStatus sd_loss_sliding(const double *teacher,
                              const double *student,
                              size_t timesteps,
                              size_t classes,
                              size_t batch,
                              size_t delta,
                              size_t stride,
                              enum SdNorm norm,
                              double *out);

/**
 * Per-timestep KL divergence of the student from the teacher, averaged over the batch.
 *
 * # Safety
 * As for [`sd_loss_full`].
 */
enum SdStatus sd_loss_kl(const double *teacher,
                         const double *student,
                         size_t timesteps,
                         size_t classes,
                         size_t batch,
                         double *out);

/**
 * `alpha * sliding(L1, delta) + beta * full(L2) + gamma * KL`.
 *
 * # Safety
 * As for [`sd_loss_full`].
 */
enum SdStatus sd_loss_combined(const double *teacher,
                               const double *student,
                               size_t timesteps,
                               size_t classes,
                               size_t batch,
                               double alpha,
                               double beta,
                               double gamma,
                               size_t delta,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPIKEDISTILL_H */
