#ifndef OPTPROP_H
#define OPTPROP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. The numeric values match the exit codes of
 * the command-line tool for the first four variants.
 */
typedef enum OptpropStatus {
  OPTPROP_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, out-of-range index or invalid parameter.
   */
  OPTPROP_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Unreadable, malformed or inconsistent input data.
   */
  OPTPROP_STATUS_DATA = 2,
  OPTPROP_STATUS_NUMERIC = 3,
  /**
   * A Rust panic was caught at the boundary.
   */
  OPTPROP_STATUS_INTERNAL = 4,
} OptpropStatus;

typedef enum OptpropMethod {
  OPTPROP_METHOD_FIXED = 0,
  OPTPROP_METHOD_DENSE = 1,
  OPTPROP_METHOD_LOW_RANK = 2,
} OptpropMethod;

/**
 * A graph with features, labels and splits.
 */
typedef struct OptpropDataset OptpropDataset;

/**
 * A learned propagation matrix together with the `Q` it was learned from.
 */
typedef struct OptpropLearned OptpropLearned;

/**
 * A dense PPR matrix `Q` with its teleport probability.
 */
typedef struct OptpropMatrix OptpropMatrix;

/**
 * Trained classifier weights.
 */
typedef struct OptpropModel OptpropModel;

/**
 * Block-model generator settings.
 */
typedef struct OptpropSbmConfig {
  size_t n;
  size_t k;
  double p_in;
  double p_out;
  size_t feature_dim;
  double feature_noise;
  uint64_t seed;
  size_t train_per_class;
  double val_fraction;
} OptpropSbmConfig;

/**
 * Lower-level settings; obtain defaults from
 * [`optprop_lower_params_default`].
 */
typedef struct OptpropLowerParams {
  double epsilon;
  double c;
  double b;
  double beta;
  double gamma;
  double eta;
  size_t max_iters;
  size_t batch_p;
  size_t batch_n;
  size_t anchors_per_step;
  double grad_tol;
  double loss_rel_tol;
  size_t loss_window;
  size_t max_backtracks;
  bool reward_smoothness;
  bool paper_literal_grad;
} OptpropLowerParams;

typedef struct OptpropClassifierParams {
  size_t hidden;
  double dropout;
  double lambda;
  double alpha;
  size_t epochs;
  double learning_rate;
  size_t patience;
} OptpropClassifierParams;

typedef struct OptpropMetrics {
  double test_accuracy;
  double val_accuracy;
  size_t epochs_run;
  uint64_t seed;
} OptpropMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *optprop_last_error(void);

struct OptpropSbmConfig optprop_sbm_config_default(void);

struct OptpropLowerParams optprop_lower_params_default(void);

struct OptpropClassifierParams optprop_classifier_params_default(void);

/**
 * Loads a dataset directory (edges, features, labels, splits).
 */
enum OptpropStatus optprop_dataset_load(const char *dir, struct OptpropDataset **out);

enum OptpropStatus optprop_dataset_generate_sbm(const struct OptpropSbmConfig *config,
                                                struct OptpropDataset **out);

size_t optprop_dataset_num_nodes(const struct OptpropDataset *dataset);

size_t optprop_dataset_num_classes(const struct OptpropDataset *dataset);

void optprop_dataset_free(struct OptpropDataset *dataset);

/**
 * Computes `Q = (I - (1-α)Ã)^{-1}` for the dataset's graph.
 */
enum OptpropStatus optprop_ppr(const struct OptpropDataset *dataset,
                               double alpha,
                               struct OptpropMatrix **out);

size_t optprop_matrix_dim(const struct OptpropMatrix *matrix);

enum OptpropStatus optprop_matrix_get(const struct OptpropMatrix *matrix,
                                      size_t i,
                                      size_t j,
                                      double *value);

void optprop_matrix_free(struct OptpropMatrix *matrix);

/**
 * Learns a propagation matrix from `q` on the dataset's visible nodes.
 */
enum OptpropStatus optprop_learn(const struct OptpropDataset *dataset,
                                 const struct OptpropMatrix *q,
                                 enum OptpropMethod method,
                                 const struct OptpropLowerParams *params,
                                 uint64_t seed,
                                 struct OptpropLearned **out);

/**
 * Loads a learned matrix file; rank-one files are applied on top of `q`.
 */
enum OptpropStatus optprop_learned_load(const char *path,
                                        const struct OptpropMatrix *q,
                                        struct OptpropLearned **out);

enum OptpropStatus optprop_learned_save(const struct OptpropLearned *learned, const char *path);

/**
 * Entry `(i, j)` of the learned matrix.
 */
enum OptpropStatus optprop_learned_get(const struct OptpropLearned *learned,
                                       size_t i,
                                       size_t j,
                                       double *value);

/**
 * 1 when the learned matrix is stored as `Q + p qᵀ`, 0 otherwise.
 */
int32_t optprop_learned_is_rank_one(const struct OptpropLearned *learned);

void optprop_learned_free(struct OptpropLearned *learned);

/**
 * Trains the classifier through `learned` and evaluates it on the test
 * split. `model_out` may be null.
 */
enum OptpropStatus optprop_train(const struct OptpropDataset *dataset,
                                 const struct OptpropLearned *learned,
                                 const struct OptpropClassifierParams *params,
                                 uint64_t seed,
                                 struct OptpropMetrics *metrics,
                                 struct OptpropModel **model_out);

/**
 * Writes the predicted class of every node into `labels` (length `len`,
 * at least the node count).
 */
enum OptpropStatus optprop_model_predict(const struct OptpropModel *model,
                                         const struct OptpropDataset *dataset,
                                         const struct OptpropLearned *learned,
                                         double alpha,
                                         size_t *labels,
                                         size_t len);

enum OptpropStatus optprop_model_save(const struct OptpropModel *model, const char *path);

enum OptpropStatus optprop_model_load(const char *path, struct OptpropModel **out);

void optprop_model_free(struct OptpropModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPTPROP_H */
