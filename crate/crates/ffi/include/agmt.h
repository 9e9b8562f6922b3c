#ifndef AGMT_H
#define AGMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AgmtStatus {
  AGMT_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  AGMT_STATUS_NULL_ARGUMENT = 1,
  /**
   * Shapes, sizes or values that the call cannot accept.
   */
  AGMT_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The run configuration next to a checkpoint is invalid.
   */
  AGMT_STATUS_CONFIG = 3,
  /**
   * A computation produced a non-finite or degenerate value.
   */
  AGMT_STATUS_NUMERIC = 4,
  /**
   * A file could not be read.
   */
  AGMT_STATUS_IO = 5,
  /**
   * A checkpoint is malformed or does not match its configuration.
   */
  AGMT_STATUS_CHECKPOINT = 6,
  /**
   * The output buffer is shorter than the result.
   */
  AGMT_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * An internal invariant failed.
   */
  AGMT_STATUS_PANIC = 8,
} AgmtStatus;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct AgmtModel AgmtModel;

/**
 * Shape information of a loaded model.
 */
typedef struct AgmtModelInfo {
  /**
   * Input images are `image_size × image_size × channels`.
   */
  size_t image_size;
  size_t channels;
  /**
   * Embedding of one image: `groups × group_dim` doubles.
   */
  size_t groups;
  size_t group_dim;
  /**
   * Whether [`agmt_model_attention`] is available (A-grouping).
   */
  bool has_attention;
} AgmtModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's most recent failure, or an empty string
 * after a successful call. Valid until the next call on this thread.
 */
const char *agmt_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *agmt_version(void);

/**
 * Loads the checkpoint at `checkpoint_path` together with the run
 * configuration stored next to it. On success `*out` owns a new handle.
 *
 * # Safety
 * `checkpoint_path` must be a NUL-terminated string and `out` a valid
 * pointer.
 */
enum AgmtStatus agmt_model_load(const char *checkpoint_path, struct AgmtModel **out);

/**
 * Releases a handle from [`agmt_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void agmt_model_free(struct AgmtModel *model);

/**
 * Fills `*out` with the model's input and embedding shapes.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum AgmtStatus agmt_model_info(const struct AgmtModel *model, struct AgmtModelInfo *out);

/**
 * Embeds `n_images` images. Writes `n_images × groups × group_dim`
 * doubles to `out`, image by image and group by group.
 *
 * # Safety
 * `images` must hold `n_images·H·W·C` doubles and `out` `out_len`
 * writable doubles.
 */
enum AgmtStatus agmt_model_embed(const struct AgmtModel *model,
                                 const double *images,
                                 size_t n_images,
                                 double *out,
                                 size_t out_len);

/**
 * Attention maps of one image: `groups × H × W` doubles, each group's map
 * summing to 1. Fails with `AGMT_STATUS_INVALID_ARGUMENT` for models
 * without attention.
 *
 * # Safety
 * `image` must hold `H·W·C` doubles and `out` `out_len` writable doubles.
 */
enum AgmtStatus agmt_model_attention(const struct AgmtModel *model,
                                     const double *image,
                                     double *out,
                                     size_t out_len);

/**
 * Recall@k of `n` embeddings of dimension `dim` (row-major) with labels.
 *
 * # Safety
 * `embeddings` must hold `n·dim` doubles, `labels` `n` values and `out`
 * must be valid for one write.
 */
enum AgmtStatus agmt_recall_at_k(const double *embeddings,
                                 const uint64_t *labels,
                                 size_t n,
                                 size_t dim,
                                 size_t k,
                                 double *out);

/**
 * Class-wise mean average precision at R.
 *
 * # Safety
 * As for [`agmt_recall_at_k`].
 */
enum AgmtStatus agmt_map_at_r(const double *embeddings,
                              const uint64_t *labels,
                              size_t n,
                              size_t dim,
                              double *out);

/**
 * Normalized mutual information between a cluster assignment and labels.
 *
 * # Safety
 * `assignment` and `labels` must hold `n` values; `out` must be valid for
 * one write.
 */
enum AgmtStatus agmt_nmi(const uint64_t *assignment, const uint64_t *labels, size_t n, double *out);

/**
 * Expected Recall@1 of a random ranking over the given labels.
 *
 * # Safety
 * `labels` must hold `n` values; `out` must be valid for one write.
 */
enum AgmtStatus agmt_chance_recall_at_1(const uint64_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGMT_H */
