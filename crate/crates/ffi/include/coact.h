/* C interface to the coact concurrent-activity recognition library. */

#ifndef COACT_H
#define COACT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Mirrors the CLI exit codes.
 */
typedef enum CoactStatus {
  /**
   * Success.
   */
  COACT_STATUS_OK = 0,
  /**
   * Invalid arguments, configuration or input files.
   */
  COACT_STATUS_USAGE = 1,
  /**
   * A verification (gradient check) did not pass.
   */
  COACT_STATUS_VERIFY = 2,
  /**
   * A numerical failure (non-finite values).
   */
  COACT_STATUS_NUMERIC = 3,
} CoactStatus;

/**
 * A dataset of feature maps with multi-hot labels.
 */
typedef struct CoactDataset CoactDataset;

/**
 * A trained (or initialized) model bundle: configuration, parameters and
 * association masks.
 */
typedef struct CoactModel CoactModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread; empty after a
 * successful call. The pointer stays valid until the next call on the same
 * thread.
 */
const char *coact_last_error(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 */
void coact_string_free(char *s);

/**
 * Generates a synthetic dataset from a generator-spec JSON document.
 */
enum CoactStatus coact_dataset_synth(const char *spec_json,
                                     uint64_t seed,
                                     struct CoactDataset **out);

/**
 * Loads a dataset directory (TNSR samples plus labels.csv).
 */
enum CoactStatus coact_dataset_load(const char *dir, struct CoactDataset **out);

/**
 * Writes a dataset into a directory, creating it if needed.
 */
enum CoactStatus coact_dataset_save(const struct CoactDataset *dataset, const char *dir);

/**
 * Number of samples; 0 for NULL.
 */
size_t coact_dataset_len(const struct CoactDataset *dataset);

void coact_dataset_free(struct CoactDataset *dataset);

/**
 * Trains a model on a dataset. `config_json` is the same document the CLI
 * takes: a `model` section plus optional `augment`.
 */
enum CoactStatus coact_train(const char *config_json,
                             const struct CoactDataset *dataset,
                             struct CoactModel **out);

/**
 * Loads a model bundle written by `coact_model_save` or the CLI.
 */
enum CoactStatus coact_model_load(const char *path, struct CoactModel **out);

enum CoactStatus coact_model_save(const struct CoactModel *model, const char *path);

void coact_model_free(struct CoactModel *model);

/**
 * Number of activities the model scores; 0 for NULL.
 */
size_t coact_model_activities(const struct CoactModel *model);

/**
 * Row-major element count of one input feature map; 0 for NULL.
 */
size_t coact_model_input_len(const struct CoactModel *model);

/**
 * Scores one feature map (row-major `[T, W, H, C']`, `features_len`
 * elements) and writes per-activity sigmoid scores into `scores_out`.
 */
enum CoactStatus coact_predict(const struct CoactModel *model,
                               const double *features,
                               size_t features_len,
                               double *scores_out,
                               size_t scores_len);

/**
 * Evaluates a model on a dataset; writes the metrics JSON document to
 * `metrics_json_out`.
 */
enum CoactStatus coact_evaluate(const struct CoactModel *model,
                                const struct CoactDataset *dataset,
                                double threshold,
                                char **metrics_json_out);

/**
 * Analytic multiply-accumulate counts for a config document; writes a JSON
 * report.
 */
enum CoactStatus coact_macc(const char *config_json, char **report_json_out);

/**
 * Runs the gradient check (reverse-mode versus central differences) on the
 * config's model at tolerance 1e-4. Returns `Verify` when any group fails;
 * the JSON report is written either way.
 */
enum CoactStatus coact_gradcheck(const char *config_json, uint64_t seed, char **report_json_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COACT_H */
