#ifndef SDREAMER_H
#define SDREAMER_H

/* Generated from the sdreamer-ffi crate by its build script; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum SdreamerStatus {
  /**
   * Success.
   */
  SDREAMER_STATUS_OK = 0,
  /**
   * Checkpoint missing, unreadable, or not compatible with this library.
   */
  SDREAMER_STATUS_BAD_CHECKPOINT = 1,
  /**
   * Null pointer, zero-length buffer, or otherwise invalid argument.
   */
  SDREAMER_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The model could not score the given signal.
   */
  SDREAMER_STATUS_INFERENCE_FAILED = 3,
  /**
   * A defensive catch-all for internal panics.
   */
  SDREAMER_STATUS_INTERNAL = 4,
} SdreamerStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct SdreamerModel SdreamerModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Never null.
 */
const char *sdreamer_last_error(void);

/**
 * Load a checkpoint into a freshly allocated handle.
 *
 * `checkpoint_path` is a NUL-terminated UTF-8 path; on success `*out`
 * receives the handle, which must be released with `sdreamer_model_free`.
 *
 * # Safety
 * `checkpoint_path` must point to a valid NUL-terminated string and `out`
 * to a writable pointer slot.
 */
enum SdreamerStatus sdreamer_model_load(const char *checkpoint_path, struct SdreamerModel **out);

/**
 * Release a handle. Passing null is a no-op.
 *
 * # Safety
 * `model` must be null or a pointer returned by `sdreamer_model_load` that
 * has not been freed yet.
 */
void sdreamer_model_free(struct SdreamerModel *model);

/**
 * Number of stage classes the model scores (0 if `model` is null).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t sdreamer_model_classes(const struct SdreamerModel *model);

/**
 * Training step the checkpoint was saved at (0 if `model` is null).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint64_t sdreamer_model_step(const struct SdreamerModel *model);

/**
 * Smallest number of whole seconds `sdreamer_predict` accepts: 1 for an
 * epoch model, the sequence length for a sequence model (0 if null).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t sdreamer_model_min_seconds(const struct SdreamerModel *model);

/**
 * Score raw signal buffers, one prediction per whole second.
 *
 * `eeg` and `emg` each point to `n_samples` doubles or are null; at least
 * one must be present, and the model normalizes each buffer with its own
 * whole-trace statistics before scoring. `sample_rate_hz` samples make one
 * second; trailing samples beyond the last whole second are ignored.
 *
 * Outputs: `out_labels[i]` receives the class index of second `i`
 * (`n_seconds` entries); `out_probs`, unless null, receives the class
 * probabilities row-major (`n_seconds * n_classes` entries).
 *
 * # Safety
 * All non-null pointers must be valid for the stated number of elements.
 */
enum SdreamerStatus sdreamer_predict(const struct SdreamerModel *model,
                                     const double *eeg,
                                     const double *emg,
                                     size_t n_samples,
                                     uint32_t sample_rate_hz,
                                     uint32_t *out_labels,
                                     double *out_probs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDREAMER_H */
