#ifndef STANCEMOE_H
#define STANCEMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SM_NUM_CLASSES 3

#define SM_NUM_EXPERTS 6

typedef enum SmStatus {
  SM_STATUS_OK = 0,
  SM_STATUS_NULL_POINTER = 1,
  SM_STATUS_INVALID_UTF8 = 2,
  SM_STATUS_IO = 3,
  SM_STATUS_FORMAT = 4,
  SM_STATUS_DIMENSION = 5,
  SM_STATUS_CONFIG = 6,
  SM_STATUS_INVALID_ARGUMENT = 7,
  SM_STATUS_INTERNAL = 8,
} SmStatus;

/**
 * Opaque handle to a loaded ensemble.
 */
typedef struct SmModel SmModel;

typedef struct SmPrediction {
  /**
   * Label index: 0 pro-Palestine, 1 pro-Israel, 2 neutral.
   */
  int32_t label;
  double probs[SM_NUM_CLASSES];
  /**
   * First `gate_len` entries are the weights of the active experts.
   */
  double gate_weights[SM_NUM_EXPERTS];
  size_t gate_len;
} SmPrediction;

typedef struct SmMetrics {
  double accuracy;
  double macro_precision;
  double macro_recall;
  double macro_f1;
  double precision[SM_NUM_CLASSES];
  double recall[SM_NUM_CLASSES];
  double f1[SM_NUM_CLASSES];
} SmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads an SMCK1 checkpoint. On success `*out` owns a handle to release
 * with [`sm_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SmStatus sm_model_load(const char *path, struct SmModel **out);

/**
 * # Safety
 * `model` must come from [`sm_model_load`] and not be used afterwards. Null is ignored.
 */
void sm_model_free(struct SmModel *model);

/**
 * Number of fold models in the ensemble, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sm_model_num_folds(const struct SmModel *model);

/**
 * Tokenizes `text` with the checkpoint's vocabulary and lexicons and runs
 * the ensemble. Models trained on precomputed embeddings are rejected.
 *
 * # Safety
 * `model` must be a live handle, `text` NUL-terminated, `out` valid.
 */
enum SmStatus sm_predict_text(const struct SmModel *model,
                              const char *text,
                              struct SmPrediction *out);

/**
 * Accuracy and per-class/macro metrics from `n` gold and predicted label indices.
 *
 * # Safety
 * `golds` and `preds` must each point to `n` values (may be null when `n == 0`).
 */
enum SmStatus sm_metrics_from_labels(const int32_t *golds,
                                     const int32_t *preds,
                                     size_t n,
                                     struct SmMetrics *out);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library from the same thread.
 */
const char *sm_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *sm_version(void);

/**
 * Static label key (`pro_palestine`, `pro_israel`, `neutral`), or null when out of range.
 */
const char *sm_label_name(int32_t index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STANCEMOE_H */
