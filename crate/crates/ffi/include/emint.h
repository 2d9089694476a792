#ifndef EMINT_H
#define EMINT_H

/* Generated by cbindgen from the emint-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  EMINT_STATUS_OK = 0,
  /**
   * Unexpected internal failure (panic caught at the boundary).
   */
  EMINT_STATUS_INTERNAL = 1,
  /**
   * Bad arguments or configuration (null pointers, invalid values).
   */
  EMINT_STATUS_CONFIG = 2,
  /**
   * Malformed data.
   */
  EMINT_STATUS_DATA = 3,
  /**
   * Dimension or checkpoint mismatch.
   */
  EMINT_STATUS_DIMS = 4,
} EmintStatus;

/**
 * A loaded model plus its checkpoint metadata.
 */
typedef struct EmintModel EmintModel;

/**
 * Library version as a static NUL-terminated string.
 */
const char *emint_version(void);

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread; do not
 * free it.
 */
const char *emint_last_error(void);

/**
 * Loads a checkpoint directory (as written by the `train`/`finetune`
 * commands) into a freshly allocated handle.
 *
 * # Safety
 * `checkpoint_dir` must be a valid NUL-terminated UTF-8 path and `out`
 * a valid pointer; on success `*out` owns the handle and must be
 * released with [`emint_model_free`].
 */
EmintStatus emint_model_load(const char *checkpoint_dir, EmintModel **out);

/**
 * Releases a handle returned by [`emint_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must have been returned by [`emint_model_load`] and not freed
 * already.
 */
void emint_model_free(EmintModel *model);

/**
 * Reports the hidden size and the class count of each task.
 *
 * # Safety
 * All pointers must be valid; `model` must be a live handle.
 */
EmintStatus emint_model_dims(const EmintModel *model,
                             uint32_t *hidden,
                             uint32_t *emotion_classes,
                             uint32_t *intent_classes);

/**
 * Reports the expected embedding width of each modality.
 *
 * # Safety
 * All pointers must be valid; `model` must be a live handle.
 */
EmintStatus emint_model_input_dims(const EmintModel *model,
                                   uint32_t *visual,
                                   uint32_t *audio,
                                   uint32_t *text);

/**
 * Runs evaluation-mode inference on one sample given as three row-major
 * f32 embedding matrices, writing softmax probabilities for both tasks.
 * Inputs are mean-pooled over time first when the checkpoint was trained
 * with averaged inputs.
 *
 * # Safety
 * `model` must be a live handle; each data pointer must reference
 * `steps * dim` readable floats; `emotion_probs` and `intent_probs` must
 * have room for the class counts reported by [`emint_model_dims`].
 */
EmintStatus emint_predict(const EmintModel *model,
                          const float *visual,
                          uint32_t visual_steps,
                          uint32_t visual_dim,
                          const float *audio,
                          uint32_t audio_steps,
                          uint32_t audio_dim,
                          const float *text,
                          uint32_t text_steps,
                          uint32_t text_dim,
                          double *emotion_probs,
                          double *intent_probs);

#endif  /* EMINT_H */
