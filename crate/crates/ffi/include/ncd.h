#ifndef NCD_H
#define NCD_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NcdStatus {
  NCD_STATUS_OK = 0,
  NCD_STATUS_NULL_POINTER = 1,
  NCD_STATUS_INVALID_ARGUMENT = 2,
  NCD_STATUS_IO = 3,
  NCD_STATUS_FORMAT = 4,
  NCD_STATUS_VALIDATION = 5,
  // Output buffer too small; the required length has been written.
  NCD_STATUS_BUFFER_TOO_SMALL = 6,
  NCD_STATUS_INTERNAL = 7,
  NCD_STATUS_PANIC = 8,
} NcdStatus;

// Loaded embedding bundle.
typedef struct NcdBundle NcdBundle;

// Fitted semi-supervised k-means model.
typedef struct NcdClusterModel NcdClusterModel;

// Clustering accuracy over all, known-class and novel-class samples.
// Absent subsets are reported as NaN.
typedef struct NcdReport {
  double acc_all;
  double acc_old;
  double acc_new;
  size_t n_all;
  size_t n_old;
  size_t n_new;
} NcdReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *ncd_last_error_message(void);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum NcdStatus ncd_bundle_load(const char *path, struct NcdBundle **out);

// # Safety
// `bundle` must come from [`ncd_bundle_load`] and not be used afterwards. NULL is ignored.
void ncd_bundle_free(struct NcdBundle *bundle);

// Row dimension, or 0 for NULL.
//
// # Safety
// `bundle` must be NULL or a live handle.
size_t ncd_bundle_dim(const struct NcdBundle *bundle);

// Row count, or 0 for NULL.
//
// # Safety
// `bundle` must be NULL or a live handle.
size_t ncd_bundle_count(const struct NcdBundle *bundle);

// Copies row `row` into `out` (capacity `cap`); the row length goes to `len_out`.
//
// # Safety
// Pointers must be valid for the given capacities.
enum NcdStatus ncd_bundle_row(const struct NcdBundle *bundle,
                              size_t row,
                              float *out,
                              size_t cap,
                              size_t *len_out);

// # Safety
// `a` and `b` must point at `len` doubles; `out` must be writable.
enum NcdStatus ncd_cosine_similarity(const double *a, const double *b, size_t len, double *out);

// Top-`k` corpus rows for `query` by cosine similarity, best first (ties by row).
// Writes up to `cap` row indices and scores; the hit count goes to `len_out`.
//
// # Safety
// `query` must hold `dim` floats; output buffers must hold `cap` elements.
enum NcdStatus ncd_retrieve_topk(const float *query,
                                 size_t dim,
                                 const struct NcdBundle *corpus,
                                 size_t k,
                                 size_t *rows_out,
                                 double *scores_out,
                                 size_t cap,
                                 size_t *len_out);

// Fits semi-supervised k-means with `clusters` centers. `tol` may be infinite.
//
// # Safety
// `fused` must be a live handle; `out` must be writable.
enum NcdStatus ncd_cluster_fit(const struct NcdBundle *fused,
                               size_t clusters,
                               uint64_t seed,
                               size_t max_iters,
                               double tol,
                               bool freeze_known_centers,
                               struct NcdClusterModel **out);

// # Safety
// `model` must come from [`ncd_cluster_fit`] and not be used afterwards. NULL is ignored.
void ncd_cluster_model_free(struct NcdClusterModel *model);

// Lloyd iterations performed, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t ncd_cluster_model_iterations(const struct NcdClusterModel *model);

// Cluster index per bundle row.
//
// # Safety
// `out` must hold `cap` elements.
enum NcdStatus ncd_cluster_model_assignments(const struct NcdClusterModel *model,
                                             size_t *out,
                                             size_t cap,
                                             size_t *len_out);

// Inertia recorded at each iteration.
//
// # Safety
// `out` must hold `cap` elements.
enum NcdStatus ncd_cluster_model_inertia(const struct NcdClusterModel *model,
                                         double *out,
                                         size_t cap,
                                         size_t *len_out);

// Best one-to-one matching accuracy between cluster ids and class ids.
//
// # Safety
// `pred` and `truth` must hold `n` elements.
enum NcdStatus ncd_cluster_accuracy(const size_t *pred,
                                    const uint32_t *truth,
                                    size_t n,
                                    double *out);

// Minimum-cost assignment on a row-major `rows x cols` matrix. `out` receives,
// for each row, its column or -1 when unmatched (more rows than columns).
//
// # Safety
// `cost` must hold `rows * cols` doubles and `out` `rows` elements.
enum NcdStatus ncd_hungarian_match(const double *cost, size_t rows, size_t cols, ptrdiff_t *out);

// Mixed contrastive loss. `z` and `zp` are row-major `rows x dim` unit rows;
// `labels[i] < 0` marks row `i` unlabelled.
//
// # Safety
// Buffers must hold `rows * dim` doubles and `rows` labels.
enum NcdStatus ncd_total_loss(const double *z,
                              const double *zp,
                              const int64_t *labels,
                              size_t rows,
                              size_t dim,
                              double tau,
                              double lambda,
                              double *out);

// Runs the full pipeline from a TOML config string into `out_dir`.
//
// # Safety
// Strings must be NUL-terminated; `report` must be writable.
enum NcdStatus ncd_run_pipeline(const char *config_toml,
                                const char *out_dir,
                                struct NcdReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCD_H */
