/* C interface to the decount cell counting library. */

#ifndef DECOUNT_H
#define DECOUNT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this interface.
 */
typedef enum DecountStatus {
  /**
   * The call succeeded.
   */
  DecountOk = 0,
  /**
   * A required pointer argument was null.
   */
  DecountNullPointer = 1,
  /**
   * Arguments were structurally valid but semantically rejected.
   */
  DecountInvalidArgument = 2,
  /**
   * An internal failure; see `decount_last_error`.
   */
  DecountInternal = 3,
} DecountStatus;

/**
 * Opaque handle to a trained counting network.
 */
typedef struct DecountCounter DecountCounter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *decount_version(void);

/**
 * Message of the last failure on this thread; empty when nothing failed.
 * The pointer is invalidated by the next failing call on the same thread.
 */
const char *decount_last_error(void);

/**
 * Rasterizes dot annotations into a caller-provided `height * width`
 * row-major density buffer. Each dot contributes unit mass, so the buffer
 * sums to `num_dots`.
 *
 * # Safety
 * `xs` and `ys` must point to `num_dots` doubles and `out` to
 * `height * width` doubles.
 */
enum DecountStatus decount_rasterize_density(const double *xs,
                                             const double *ys,
                                             uintptr_t num_dots,
                                             uintptr_t height,
                                             uintptr_t width,
                                             double sigma,
                                             double *out);

/**
 * Mean absolute counting error over `len` paired values.
 *
 * # Safety
 * `predicted` and `ground_truth` must point to `len` doubles each.
 */
enum DecountStatus decount_mae(const double *predicted,
                               const double *ground_truth,
                               uintptr_t len,
                               double *out);

/**
 * Mean square counting error over `len` paired values.
 *
 * # Safety
 * `predicted` and `ground_truth` must point to `len` doubles each.
 */
enum DecountStatus decount_mse(const double *predicted,
                               const double *ground_truth,
                               uintptr_t len,
                               double *out);

/**
 * Loads a counter from a stage-one checkpoint directory (the directory
 * containing `counter_config.json` and `counter.safetensors`). On success
 * `*out` owns the handle; release it with `decount_counter_free`.
 *
 * # Safety
 * `dir` must be a nul-terminated path and `out` a valid pointer.
 */
enum DecountStatus decount_counter_load(const char *dir, struct DecountCounter **out);

/**
 * Predicts the cell count of one image. `image` is row-major interleaved
 * `height * width * channels` with intensities in `[0, 1]`; the channel
 * count and spatial dimensions must match what the counter was trained on
 * (spatial dimensions divisible by 16).
 *
 * # Safety
 * `image` must point to `height * width * channels` floats; `handle` must
 * come from `decount_counter_load` and not have been freed.
 */
enum DecountStatus decount_counter_predict(const struct DecountCounter *handle,
                                           const float *image,
                                           uintptr_t height,
                                           uintptr_t width,
                                           uintptr_t channels,
                                           double *out_count);

/**
 * Releases a counter handle; a null handle is a no-op.
 *
 * # Safety
 * `handle` must come from `decount_counter_load` and not be used afterwards.
 */
void decount_counter_free(struct DecountCounter *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DECOUNT_H */
