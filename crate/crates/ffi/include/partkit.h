#ifndef PARTKIT_H
#define PARTKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PkNorm {
  PK_NORM_LINF = 0,
  PK_NORM_L1 = 1,
  PK_NORM_L2 = 2,
} PkNorm;

/**
 * Result of every call. Zero is success.
 */
typedef enum PkStatus {
  PK_STATUS_OK = 0,
  PK_STATUS_NULL_POINTER = 1,
  PK_STATUS_INVALID_ARGUMENT = 2,
  PK_STATUS_CONFIG = 3,
  PK_STATUS_DATA = 4,
  PK_STATUS_IO = 5,
  PK_STATUS_SHAPE = 6,
  PK_STATUS_VOCAB_MISMATCH = 7,
  PK_STATUS_ALL_ZERO = 8,
  PK_STATUS_PANIC = 9,
} PkStatus;

/**
 * Opaque classifier handle.
 */
typedef struct PkModel PkModel;

/**
 * Opaque part vocabulary handle.
 */
typedef struct PkVocab PkVocab;

typedef struct PkConsistency {
  double accuracy_difference;
  double observed_consistency;
  double error_consistency;
  double model_accuracy;
  double human_accuracy;
} PkConsistency;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pk_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`) and returns its full length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t pk_last_error(char *buf, size_t cap);

/**
 * Projects `delta[0..n]` onto the `norm` ball of radius `epsilon`.
 *
 * # Safety
 * `delta` and `out` must each hold `n` doubles; they may alias.
 */
enum PkStatus pk_project(const double *delta,
                         size_t n,
                         enum PkNorm norm,
                         double epsilon,
                         double *out);

/**
 * IoU of two row-major `height x width` masks (nonzero bytes are set).
 *
 * # Safety
 * `a` and `b` must each hold `height * width` bytes; `out` one double.
 */
enum PkStatus pk_mask_iou(const uint8_t *a,
                          const uint8_t *b,
                          size_t height,
                          size_t width,
                          double *out);

/**
 * Loads a vocabulary from its JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PkStatus pk_vocab_load(const char *path, struct PkVocab **out);

/**
 * Builds a vocabulary from per-object part counts: object `i` owns the
 * next `counts[i]` part ids.
 *
 * # Safety
 * `counts` must hold `num_objects` values; `out` must be writable.
 */
enum PkStatus pk_vocab_from_counts(const size_t *counts, size_t num_objects, struct PkVocab **out);

/**
 * Total part categories of `vocab`, or 0 for a null handle.
 *
 * # Safety
 * `vocab` must be null or a live handle.
 */
size_t pk_vocab_num_parts(const struct PkVocab *vocab);

/**
 * # Safety
 * `vocab` must be null or a handle not yet freed.
 */
void pk_vocab_free(struct PkVocab *vocab);

/**
 * Zeroes the entries of `probs` (one per vocabulary part) that do not
 * belong to `object_id`, writing the result to `out`.
 *
 * # Safety
 * `probs` and `out` must each hold `n` doubles; `vocab` must be live.
 */
enum PkStatus pk_category_filter(const struct PkVocab *vocab,
                                 const double *probs,
                                 size_t n,
                                 size_t object_id,
                                 double *out);

/**
 * Error consistency between two binary correctness vectors (nonzero is
 * correct) over the same `n` trials.
 *
 * # Safety
 * `model` and `human` must hold `n` bytes; `out` must be writable.
 */
enum PkStatus pk_human_consistency(const uint8_t *model,
                                   const uint8_t *human,
                                   size_t n,
                                   struct PkConsistency *out);

/**
 * Loads a checkpoint written by the `train` or `strip` commands.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PkStatus pk_model_load(const char *path, struct PkModel **out);

/**
 * Side of the square input images, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pk_model_image_size(const struct PkModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pk_model_num_classes(const struct PkModel *model);

/**
 * Class logits for `batch` images laid out `[batch, 3, S, S]` in `[0, 1]`,
 * written row-major to `logits` (`batch * num_classes` doubles).
 *
 * # Safety
 * Buffers must hold the stated number of doubles; `model` must be live.
 */
enum PkStatus pk_model_forward(const struct PkModel *model,
                               const double *images,
                               size_t batch,
                               double *logits);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void pk_model_free(struct PkModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARTKIT_H */
