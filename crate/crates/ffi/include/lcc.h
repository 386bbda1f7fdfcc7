#ifndef LCC_H
#define LCC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LccStatus {
  LCC_STATUS_OK = 0,
  LCC_STATUS_NULL_POINTER = 1,
  LCC_STATUS_INVALID_ARGUMENT = 2,
  LCC_STATUS_SHAPE_MISMATCH = 3,
  LCC_STATUS_OUT_OF_RANGE = 4,
  LCC_STATUS_IO = 5,
  LCC_STATUS_FORMAT = 6,
  LCC_STATUS_CONFIG = 7,
  LCC_STATUS_NUMERIC = 8,
  LCC_STATUS_PANIC = 9,
} LccStatus;

typedef enum LccSplit {
  LCC_SPLIT_TRAIN = 0,
  LCC_SPLIT_RECOVERY = 1,
  LCC_SPLIT_PROBE = 2,
  LCC_SPLIT_HELD_OUT = 3,
} LccSplit;

/**
 * A loaded model.
 */
typedef struct LccModel LccModel;

typedef struct LccModelInfo {
  size_t vocab_size;
  size_t n_layers;
  size_t n_heads;
  size_t d_model;
  size_t d_head;
  size_t d_ffn;
  size_t max_seq_len;
} LccModelInfo;

typedef struct LccMetrics {
  double accuracy;
  double perplexity;
  size_t n_samples;
} LccMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *lcc_last_error(void);

/**
 * Loads a checkpoint into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a valid C string and `out` a writable pointer.
 */
enum LccStatus lcc_model_load(const char *path, struct LccModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from `lcc_model_load` and not be used afterwards.
 */
void lcc_model_free(struct LccModel *model);

/**
 * # Safety
 * `model` must be a live handle and `path` a valid C string.
 */
enum LccStatus lcc_model_save(const struct LccModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum LccStatus lcc_model_info(const struct LccModel *model, struct LccModelInfo *out);

/**
 * Writes `n_tokens × vocab_size` row-major logits to `logits`, whose
 * length must be exactly that.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum LccStatus lcc_model_forward(const struct LccModel *model,
                                 const uint32_t *tokens,
                                 size_t n_tokens,
                                 float *logits,
                                 size_t logits_len);

/**
 * Reads a head activation `z` (length `d_head`) through the model's
 * output projection, final norm and unembedding into `out` (length
 * `vocab_size`).
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum LccStatus lcc_model_logit_lens(const struct LccModel *model,
                                    size_t layer,
                                    size_t head,
                                    const float *z,
                                    size_t z_len,
                                    float *out,
                                    size_t out_len);

/**
 * Overwrites the constant bias slot of one head with `c` (length
 * `d_head`).
 *
 * # Safety
 * `model` must be a live handle and `c` hold `len` elements.
 */
enum LccStatus lcc_model_inject_head_bias(struct LccModel *model,
                                          size_t layer,
                                          size_t head,
                                          const float *c,
                                          size_t len);

/**
 * Accuracy and perplexity of one split of a JSONL dataset. Records without
 * a split belong to the training split.
 *
 * # Safety
 * `model` must be a live handle, `path` a valid C string, `out` writable.
 */
enum LccStatus lcc_evaluate(const struct LccModel *model,
                            const char *path,
                            enum LccSplit split,
                            struct LccMetrics *out);

/**
 * Runs the full pipeline for a TOML config and stores the JSON report in
 * `*report_json`.
 *
 * # Safety
 * `config_path` must be a valid C string and `report_json` writable.
 */
enum LccStatus lcc_run_pipeline(const char *config_path, char **report_json);

/**
 * Releases a string returned by the library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void lcc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LCC_H */
