#ifndef PATIENT_GNN_H
#define PATIENT_GNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PgnnStatus {
  PGNN_STATUS_OK = 0,
  PGNN_STATUS_NULL_POINTER = 1,
  PGNN_STATUS_INVALID_UTF8 = 2,
  PGNN_STATUS_BUFFER_TOO_SMALL = 3,
  PGNN_STATUS_IO = 10,
  PGNN_STATUS_PARSE = 11,
  PGNN_STATUS_INVALID_ARGUMENT = 12,
  PGNN_STATUS_SHAPE = 13,
  PGNN_STATUS_NUMERIC_INSTABILITY = 14,
  PGNN_STATUS_DIVERGED = 15,
  PGNN_STATUS_EMPTY_MASK = 16,
  PGNN_STATUS_METRIC = 17,
  PGNN_STATUS_UNKNOWN_NODE = 18,
  PGNN_STATUS_CHECKPOINT = 19,
  PGNN_STATUS_JSON = 20,
  PGNN_STATUS_PANIC = 99,
} PgnnStatus;

typedef enum PgnnSplit {
  PGNN_SPLIT_TRAIN = 0,
  PGNN_SPLIT_VAL = 1,
  PGNN_SPLIT_TEST = 2,
} PgnnSplit;

/**
 * Similarity graph with masks.
 */
typedef struct PgnnGraph PgnnGraph;

/**
 * Trained GNN.
 */
typedef struct PgnnModel PgnnModel;

/**
 * Probabilities for every node plus the last attention layer, if any.
 */
typedef struct PgnnPrediction PgnnPrediction;

typedef struct PgnnAttentionEntry {
  size_t source;
  size_t target;
  size_t head;
  double weight;
} PgnnAttentionEntry;

typedef struct PgnnMetrics {
  double f1;
  double accuracy;
  double balanced_accuracy;
  double precision;
  double recall;
  double auroc;
  double auprc;
  double threshold;
  size_t tp;
  size_t fp;
  size_t tn;
  size_t fn_;
} PgnnMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *pgnn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pgnn_version(void);

/**
 * Reads a graph file written by the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PgnnStatus pgnn_graph_load(const char *path, struct PgnnGraph **out);

/**
 * # Safety
 * `graph` must come from [`pgnn_graph_load`] and not be used afterwards. Null is ignored.
 */
void pgnn_graph_free(struct PgnnGraph *graph);

/**
 * Node count, or 0 for a null handle.
 *
 * # Safety
 * `graph` must be null or a live handle.
 */
size_t pgnn_graph_num_nodes(const struct PgnnGraph *graph);

/**
 * Undirected edge count, or 0 for a null handle.
 *
 * # Safety
 * `graph` must be null or a live handle.
 */
size_t pgnn_graph_num_edges(const struct PgnnGraph *graph);

/**
 * Copies the 0/1 labels into `out`, which must hold at least `len` bytes.
 *
 * # Safety
 * `graph` must be a live handle and `out` valid for `len` writes.
 */
enum PgnnStatus pgnn_graph_labels(const struct PgnnGraph *graph, uint8_t *out, size_t len);

/**
 * Loads a checkpoint written by `train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PgnnStatus pgnn_model_load(const char *path, struct PgnnModel **out);

/**
 * # Safety
 * `model` must come from [`pgnn_model_load`] and not be used afterwards. Null is ignored.
 */
void pgnn_model_free(struct PgnnModel *model);

/**
 * Decision threshold stored in the checkpoint, or NaN for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
double pgnn_model_threshold(const struct PgnnModel *model);

/**
 * Runs the model over the whole graph in evaluation mode.
 *
 * # Safety
 * `model` and `graph` must be live handles and `out` a valid pointer.
 */
enum PgnnStatus pgnn_predict(const struct PgnnModel *model,
                             const struct PgnnGraph *graph,
                             struct PgnnPrediction **out);

/**
 * # Safety
 * `pred` must come from [`pgnn_predict`] and not be used afterwards. Null is ignored.
 */
void pgnn_prediction_free(struct PgnnPrediction *pred);

/**
 * Number of probabilities (one per node).
 *
 * # Safety
 * `pred` must be null or a live handle.
 */
size_t pgnn_prediction_len(const struct PgnnPrediction *pred);

/**
 * Borrowed pointer to the probabilities; valid while `pred` lives.
 *
 * # Safety
 * `pred` must be null or a live handle.
 */
const double *pgnn_prediction_probabilities(const struct PgnnPrediction *pred);

/**
 * Number of attention entries; 0 for SAGE models.
 *
 * # Safety
 * `pred` must be null or a live handle.
 */
size_t pgnn_prediction_attention_len(const struct PgnnPrediction *pred);

/**
 * Borrowed pointer to the attention entries; valid while `pred` lives.
 *
 * # Safety
 * `pred` must be null or a live handle.
 */
const struct PgnnAttentionEntry *pgnn_prediction_attention(const struct PgnnPrediction *pred);

/**
 * Scores a prediction on one mask of `graph` at `threshold`.
 *
 * # Safety
 * `pred` and `graph` must be live handles and `out` a valid pointer.
 */
enum PgnnStatus pgnn_evaluate(const struct PgnnPrediction *pred,
                              const struct PgnnGraph *graph,
                              enum PgnnSplit split,
                              double threshold,
                              struct PgnnMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATIENT_GNN_H */
