/* C interface for the fgnn session recommender. */

#ifndef FGNN_H
#define FGNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Head combination mode.
 */
typedef enum FgnnCombine {
  FGNN_COMBINE_MEAN = 0,
  FGNN_COMBINE_CONCAT = 1,
} FgnnCombine;

/**
 * Readout variant selector.
 */
typedef enum FgnnReadout {
  FGNN_READOUT_SET2SET = 0,
  FGNN_READOUT_MEAN = 1,
  FGNN_READOUT_SUM = 2,
  FGNN_READOUT_MAX = 3,
  FGNN_READOUT_LAST_ATTENTION = 4,
} FgnnReadout;

/**
 * Learning-rate schedule shape.
 */
typedef enum FgnnSchedule {
  FGNN_SCHEDULE_STEP = 0,
  FGNN_SCHEDULE_LINEAR = 1,
} FgnnSchedule;

/**
 * Status codes returned by every fallible call.
 */
typedef enum FgnnStatus {
  FGNN_STATUS_OK = 0,
  /**
   * Any error without a more specific category.
   */
  FGNN_STATUS_ERROR = 1,
  /**
   * Invalid parameters or configuration.
   */
  FGNN_STATUS_USAGE = 2,
  /**
   * Missing or malformed data/files.
   */
  FGNN_STATUS_DATA = 3,
  /**
   * A numerical self-check failed.
   */
  FGNN_STATUS_NUMERIC = 4,
  /**
   * A required pointer argument was null.
   */
  FGNN_STATUS_NULL_ARGUMENT = 5,
  /**
   * A string argument was not valid UTF-8.
   */
  FGNN_STATUS_INVALID_UTF8 = 6,
  /**
   * The library caught a panic at the boundary.
   */
  FGNN_STATUS_PANIC = 7,
} FgnnStatus;

/**
 * Opaque dataset handle.
 */
typedef struct FgnnDataset FgnnDataset;

/**
 * Opaque model handle.
 */
typedef struct FgnnModel FgnnModel;

/**
 * Corpus statistics for a loaded or generated dataset.
 */
typedef struct FgnnDatasetStats {
  uint64_t clicks;
  uint64_t train_sessions;
  uint64_t test_sessions;
  uint64_t items;
  uint64_t train_examples;
  uint64_t test_examples;
  double avg_length;
} FgnnDatasetStats;

/**
 * Training options; fill with `fgnn_train_options_default` first.
 */
typedef struct FgnnTrainOptions {
  uint32_t epochs;
  uint32_t batch_size;
  uint64_t seed;
  double lr;
  double l2;
  double decay_factor;
  uint32_t decay_every_epochs;
  enum FgnnSchedule schedule;
  uint32_t embed_dim;
  uint32_t layers;
  uint32_t heads;
  uint32_t readout_steps;
  enum FgnnReadout readout;
  enum FgnnCombine combine;
} FgnnTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread, or null if
 * none occurred. The pointer stays valid until the next failing call
 * on the same thread.
 */
const char *fgnn_last_error_message(void);

/**
 * Generate a synthetic Markov-chain corpus, filter it with the default
 * support/length rules and split off the most recent `test_fraction`.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum FgnnStatus fgnn_dataset_synth(uint32_t items,
                                   uint32_t sessions,
                                   uint32_t min_len,
                                   uint32_t max_len,
                                   double concentration,
                                   uint64_t seed,
                                   double test_fraction,
                                   struct FgnnDataset **out);

/**
 * Load a preprocessed dataset directory (`manifest.json` plus example
 * and session files).
 *
 * # Safety
 * `dir` must be a valid C string or null; `out` must be writable.
 */
enum FgnnStatus fgnn_dataset_load(const char *dir, struct FgnnDataset **out);

/**
 * Write a dataset to a directory in the on-disk layout `fgnn
 * preprocess` produces.
 *
 * # Safety
 * `dataset` must be a live handle; `dir` a valid C string.
 */
enum FgnnStatus fgnn_dataset_save(const struct FgnnDataset *dataset, const char *dir);

/**
 * Fill `stats` with the dataset's corpus statistics.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum FgnnStatus fgnn_dataset_stats(const struct FgnnDataset *dataset,
                                   struct FgnnDatasetStats *stats);

/**
 * Number of items in the dataset vocabulary, 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
uint32_t fgnn_dataset_vocab_size(const struct FgnnDataset *dataset);

/**
 * Copy the opaque key of item `index` into `buffer` (NUL-terminated,
 * truncated to `buffer_len`).
 *
 * # Safety
 * `buffer` must point to `buffer_len` writable bytes.
 */
enum FgnnStatus fgnn_dataset_item_key(const struct FgnnDataset *dataset,
                                      uint32_t index,
                                      char *buffer,
                                      uintptr_t buffer_len);

/**
 * Release a dataset handle.
 *
 * # Safety
 * `dataset` must be null or an unfreed pointer from this library.
 */
void fgnn_dataset_free(struct FgnnDataset *dataset);

/**
 * Reference defaults (the published hyperparameters).
 *
 * # Safety
 * `options` must be writable.
 */
enum FgnnStatus fgnn_train_options_default(struct FgnnTrainOptions *options);

/**
 * Train a model on the dataset's train split.
 *
 * # Safety
 * `dataset` must be live, `options` null or valid, `out` writable.
 */
enum FgnnStatus fgnn_train(const struct FgnnDataset *dataset,
                           const struct FgnnTrainOptions *options,
                           struct FgnnModel **out);

/**
 * Write a checkpoint file for the model.
 *
 * # Safety
 * `model` must be live; `path` a valid C string.
 */
enum FgnnStatus fgnn_model_save(const struct FgnnModel *model, const char *path);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a valid C string; `out` writable.
 */
enum FgnnStatus fgnn_model_load(const char *path, struct FgnnModel **out);

/**
 * Vocabulary size the model scores over, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t fgnn_model_vocab_size(const struct FgnnModel *model);

/**
 * Rank the vocabulary for a session prefix; writes the top `k` item
 * indices (and, when `out_probabilities` is non-null, their
 * probabilities) best first.
 *
 * # Safety
 * `items` must point to `item_count` values; the out arrays must hold
 * `k` entries.
 */
enum FgnnStatus fgnn_predict_topk(const struct FgnnModel *model,
                                  const uint32_t *items,
                                  uintptr_t item_count,
                                  uint32_t k,
                                  uint32_t *out_items,
                                  double *out_probabilities);

/**
 * Recall@K and MRR@K of the model over the dataset's test split.
 *
 * # Safety
 * All pointers must be valid.
 */
enum FgnnStatus fgnn_evaluate(const struct FgnnModel *model,
                              const struct FgnnDataset *dataset,
                              uint32_t k,
                              double *out_recall,
                              double *out_mrr);

/**
 * Run the finite-difference gradient check on a toy model; returns
 * `Numeric` (4) and leaves the worst entry in the error message when
 * the check fails.
 *
 * # Safety
 * `out_max_rel_err` may be null.
 */
enum FgnnStatus fgnn_gradcheck(uint64_t seed, double *out_max_rel_err);

/**
 * Release a model handle.
 *
 * # Safety
 * `model` must be null or an unfreed pointer from this library.
 */
void fgnn_model_free(struct FgnnModel *model);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FGNN_H */
