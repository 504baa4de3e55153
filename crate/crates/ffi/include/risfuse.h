#ifndef RISFUSE_H
#define RISFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of precision thresholds written by [`rf_metrics`] (`P@0.5` .. `P@0.9`).
 */
#define RF_PRECISION_COUNT 5

/**
 * Result of every call.
 */
typedef enum RfStatus {
  RF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  RF_STATUS_NULL_POINTER = 1,
  /**
   * Arguments were inconsistent (sizes, dimensions, values).
   */
  RF_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file was malformed.
   */
  RF_STATUS_FORMAT = 3,
  /**
   * A file could not be read.
   */
  RF_STATUS_IO = 4,
  /**
   * Computation failed.
   */
  RF_STATUS_RUNTIME = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  RF_STATUS_PANIC = 6,
} RfStatus;

/**
 * Opaque `[tokens, dim]` text embedding.
 */
typedef struct RfEmbedding RfEmbedding;

/**
 * Opaque trained model.
 */
typedef struct RfModel RfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *rf_last_error_message(void);

/**
 * Loads a checkpoint. On success `*out` owns a model to release with [`rf_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum RfStatus rf_model_load(const char *path, struct RfModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`rf_model_load`] and not be used afterwards.
 */
void rf_model_free(struct RfModel *model);

/**
 * Embedding width the model expects, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t rf_model_text_dim(const struct RfModel *model);

/**
 * Reads a TEB embedding file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum RfStatus rf_embedding_load(const char *path, struct RfEmbedding **out);

/**
 * Embeds `text` with the deterministic built-in toy embedder.
 *
 * # Safety
 * `text` must be a nul-terminated string and `out` a valid pointer.
 */
enum RfStatus rf_embedding_from_text(const char *text, size_t dim, struct RfEmbedding **out);

/**
 * Number of tokens in an embedding, or 0 for null.
 *
 * # Safety
 * `emb` must be null or a live embedding handle.
 */
size_t rf_embedding_tokens(const struct RfEmbedding *emb);

/**
 * Releases an embedding. Null is ignored.
 *
 * # Safety
 * `emb` must come from this library and not be used afterwards.
 */
void rf_embedding_free(struct RfEmbedding *emb);

/**
 * Fuses one pair. `vis` is planar RGB (`3 * height * width`), `ir` a single
 * plane. Writes the fused planar RGB to `out_rgb` and, when `out_prob` is not
 * null, the `height * width` mask probabilities.
 *
 * # Safety
 * Buffers must hold the stated number of doubles; handles must be live.
 */
enum RfStatus rf_fuse(const struct RfModel *model,
                      const double *vis,
                      const double *ir,
                      size_t height,
                      size_t width,
                      const struct RfEmbedding *emb,
                      double *out_rgb,
                      double *out_prob);

/**
 * IoU of two `height * width` masks given as bytes (nonzero = foreground).
 *
 * # Safety
 * `pred` and `gt` must hold `height * width` bytes; `out` must be valid.
 */
enum RfStatus rf_iou(const uint8_t *pred,
                     const uint8_t *gt,
                     size_t height,
                     size_t width,
                     double *out);

/**
 * Aggregates `count` per-sample IoUs into mIoU and `P@0.5 .. P@0.9`
 * (`RF_PRECISION_COUNT` values written to `out_precision`).
 *
 * # Safety
 * `ious` must hold `count` doubles and `out_precision` five.
 */
enum RfStatus rf_metrics(const double *ious, size_t count, double *out_miou, double *out_precision);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RISFUSE_H */
