#ifndef SHIFTLAB_H
#define SHIFTLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SHIFTLAB_SPLIT_FORGET 0

#define SHIFTLAB_SPLIT_NEIGHBOUR 1

#define SHIFTLAB_SPLIT_GENERAL 2

/**
 * Result code of every fallible call.
 */
typedef enum ShiftlabStatus {
  SHIFTLAB_STATUS_OK = 0,
  SHIFTLAB_STATUS_INVALID_ARGUMENT = 1,
  SHIFTLAB_STATUS_NULL_POINTER = 2,
  SHIFTLAB_STATUS_UNKNOWN_WORD = 3,
  SHIFTLAB_STATUS_SEQUENCE_TOO_LONG = 4,
  SHIFTLAB_STATUS_IO = 5,
  SHIFTLAB_STATUS_CHECKPOINT = 6,
  SHIFTLAB_STATUS_CORPUS_FORMAT = 7,
  /**
   * Degenerate rows, non-finite values or shape mismatches.
   */
  SHIFTLAB_STATUS_NUMERIC = 8,
  SHIFTLAB_STATUS_NOT_MEMORIZED = 9,
  SHIFTLAB_STATUS_PANIC = 10,
} ShiftlabStatus;

/**
 * Opaque corpus handle.
 */
typedef struct ShiftlabCorpus ShiftlabCorpus;

/**
 * Opaque handle to a loaded checkpoint: base weights plus adapters, if any.
 */
typedef struct ShiftlabModel ShiftlabModel;

/**
 * Metrics of one split.
 */
typedef struct ShiftlabSplitMetrics {
  size_t records;
  double exact_match;
  double rouge_l;
  double tr_at_k;
  double el_n;
  double el_forgotten;
} ShiftlabSplitMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the thread.
 */
const char *shiftlab_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *shiftlab_version(void);

/**
 * Generate a synthetic corpus. `*out` receives a new handle.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum ShiftlabStatus shiftlab_corpus_generate(uint64_t seed,
                                             size_t entities,
                                             size_t attributes,
                                             struct ShiftlabCorpus **out);

/**
 * Load a corpus file written by `shiftlab gen`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum ShiftlabStatus shiftlab_corpus_load(const char *path, struct ShiftlabCorpus **out);

/**
 * # Safety
 * `corpus` must be a live handle and `path` a NUL-terminated string.
 */
enum ShiftlabStatus shiftlab_corpus_save(const struct ShiftlabCorpus *corpus, const char *path);

/**
 * Vocabulary size of the corpus, 0 for a null handle.
 *
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t shiftlab_corpus_vocab_size(const struct ShiftlabCorpus *corpus);

/**
 * Number of QA records in `split` (one of the `SHIFTLAB_SPLIT_*`
 * constants), 0 for a null handle or unknown split.
 *
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t shiftlab_corpus_record_count(const struct ShiftlabCorpus *corpus, uint32_t split);

/**
 * # Safety
 * `corpus` must be null or a handle not yet freed.
 */
void shiftlab_corpus_free(struct ShiftlabCorpus *corpus);

/**
 * Load a checkpoint written by `shiftlab pretrain` or `shiftlab unlearn`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum ShiftlabStatus shiftlab_model_load(const char *path, struct ShiftlabModel **out);

/**
 * Nonzero if the checkpoint carries trained adapters.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t shiftlab_model_has_adapters(const struct ShiftlabModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void shiftlab_model_free(struct ShiftlabModel *model);

/**
 * Teacher-forced exact-match rate of the model on one split.
 *
 * # Safety
 * Handles must be live and `out` valid for writes.
 */
enum ShiftlabStatus shiftlab_model_exact_match(const struct ShiftlabModel *model,
                                               const struct ShiftlabCorpus *corpus,
                                               uint32_t split,
                                               double *out);

/**
 * Full generation-based metrics of one split, with top-`k` token recall
 * and `el_n`-gram extraction windows.
 *
 * # Safety
 * Handles must be live and `out` valid for writes.
 */
enum ShiftlabStatus shiftlab_model_evaluate(const struct ShiftlabModel *model,
                                            const struct ShiftlabCorpus *corpus,
                                            uint32_t split,
                                            size_t k,
                                            size_t el_n,
                                            struct ShiftlabSplitMetrics *out);

/**
 * Suppress the flagged columns of one attention row by `lambda` and
 * renormalize. `mask[j]` nonzero flags column `j`. Writes `n` values to
 * `out`, which may alias `row`.
 *
 * # Safety
 * `row` and `out` must hold `n` doubles, `mask` `n` bytes.
 */
enum ShiftlabStatus shiftlab_suppress_row(const double *row,
                                          const uint8_t *mask,
                                          size_t n,
                                          double lambda,
                                          double *out);

/**
 * Mean row-wise KL(P || Q) over `rows` rows of `cols` probabilities each,
 * row-major, with the library's epsilon smoothing.
 *
 * # Safety
 * `p` and `q` must each hold `rows * cols` doubles; `out` valid for writes.
 */
enum ShiftlabStatus shiftlab_kl(const double *p,
                                const double *q,
                                size_t rows,
                                size_t cols,
                                double *out);

/**
 * ROUGE-L F-measure of a candidate token sequence against a reference.
 *
 * # Safety
 * `candidate` must hold `n_candidate` ids, `reference` `n_reference` ids.
 */
enum ShiftlabStatus shiftlab_rouge_l(const uint32_t *candidate,
                                     size_t n_candidate,
                                     const uint32_t *reference,
                                     size_t n_reference,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHIFTLAB_H */
