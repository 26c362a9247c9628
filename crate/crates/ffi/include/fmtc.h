#ifndef FMTC_H
#define FMTC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `FMTC_STATUS_OK` is zero.
 */
typedef enum FmtcStatus {
  FMTC_STATUS_OK = 0,
  FMTC_STATUS_NULL_POINTER = 1,
  FMTC_STATUS_INVALID_ARGUMENT = 2,
  FMTC_STATUS_DIMENSION_MISMATCH = 3,
  FMTC_STATUS_NUMERIC = 4,
  FMTC_STATUS_IO = 5,
  FMTC_STATUS_BUFFER_TOO_SMALL = 6,
  FMTC_STATUS_INTERNAL = 7,
  FMTC_STATUS_PANIC = 8,
} FmtcStatus;

/**
 * Which score [`fmtc_score`] computes.
 */
typedef enum FmtcMetric {
  FMTC_METRIC_ACCURACY = 0,
  FMTC_METRIC_NMI = 1,
  FMTC_METRIC_RAND_INDEX = 2,
} FmtcMetric;

/**
 * Opaque fitted model.
 */
typedef struct FmtcModel FmtcModel;

/**
 * Solver settings. Fill with [`fmtc_params_default`] and override fields.
 */
typedef struct FmtcParams {
  double alpha;
  double beta;
  double rho;
  double p;
  size_t clusters;
  size_t knn_k;
  /**
   * Kernel bandwidth; zero or negative selects the median heuristic.
   */
  double sigma;
  double eta;
  size_t inner_iters;
  size_t max_rounds;
  double tol_primal;
  double tol_obj;
  uint64_t seed;
  bool parallel;
} FmtcParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null after a
 * success. Valid until the next `fmtc_*` call on the same thread.
 */
const char *fmtc_last_error_message(void);

/**
 * Writes the library defaults into `out`.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum FmtcStatus fmtc_params_default(struct FmtcParams *out);

/**
 * Fits a model. `data[t]` points at `rows[t] * cols` row-major doubles for
 * client `t`. On success `*out` receives a handle to release with
 * [`fmtc_model_free`].
 *
 * # Safety
 * `data` and `rows` must each hold `num_clients` entries, every `data[t]`
 * must be readable for `rows[t] * cols` doubles, `params` must be null or
 * valid, and `out` must be valid for writes.
 */
enum FmtcStatus fmtc_fit(const double *const *data,
                         const size_t *rows,
                         size_t num_clients,
                         size_t cols,
                         const struct FmtcParams *params,
                         struct FmtcModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`fmtc_fit`] not yet freed.
 */
void fmtc_model_free(struct FmtcModel *model);

/**
 * Number of clients, rounds run and whether the stopping rule fired.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid for writes.
 */
enum FmtcStatus fmtc_model_info(const struct FmtcModel *model,
                                size_t *num_clients,
                                size_t *rounds,
                                bool *converged);

/**
 * Shape of client `client`'s projection `W` (features × clusters).
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid for writes.
 */
enum FmtcStatus fmtc_model_w_shape(const struct FmtcModel *model,
                                   size_t client,
                                   size_t *rows,
                                   size_t *cols);

/**
 * Copies `W` row-major into `buf`, which holds `len` doubles.
 *
 * # Safety
 * `model` must be a live handle and `buf` writable for `len` doubles.
 */
enum FmtcStatus fmtc_model_w(const struct FmtcModel *model, size_t client, double *buf, size_t len);

/**
 * Shape of client `client`'s embedding `F` (samples × clusters).
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid for writes.
 */
enum FmtcStatus fmtc_model_f_shape(const struct FmtcModel *model,
                                   size_t client,
                                   size_t *rows,
                                   size_t *cols);

/**
 * Copies `F` row-major into `buf`, which holds `len` doubles.
 *
 * # Safety
 * `model` must be a live handle and `buf` writable for `len` doubles.
 */
enum FmtcStatus fmtc_model_f(const struct FmtcModel *model, size_t client, double *buf, size_t len);

/**
 * Cluster labels of the training samples of `client`; `len` must be at
 * least the client's sample count.
 *
 * # Safety
 * `model` must be a live handle and `labels` writable for `len` entries.
 */
enum FmtcStatus fmtc_model_labels(const struct FmtcModel *model,
                                  size_t client,
                                  size_t *labels,
                                  size_t len);

/**
 * Labels `rows` unseen samples (row-major, `cols` features) with client
 * `client`'s frozen projection and centroids.
 *
 * # Safety
 * `model` must be a live handle, `x` readable for `rows * cols` doubles and
 * `labels` writable for `rows` entries.
 */
enum FmtcStatus fmtc_model_predict(const struct FmtcModel *model,
                                   size_t client,
                                   const double *x,
                                   size_t rows,
                                   size_t cols,
                                   size_t *labels);

/**
 * Compares two labelings of `n` samples.
 *
 * # Safety
 * `pred` and `truth` must be readable for `n` entries; `out` writable.
 */
enum FmtcStatus fmtc_score(enum FmtcMetric metric,
                           const size_t *pred,
                           const size_t *truth,
                           size_t n,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FMTC_H */
