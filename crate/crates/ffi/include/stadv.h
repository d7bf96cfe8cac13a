/* C interface for the stadv spatiotemporal adversarial-robustness toolkit.
 *
 * Conventions:
 *  - Handles are opaque; free each one exactly once with its *_free function.
 *  - Fallible functions return StadvStatus; on non-OK the thread-local
 *    message from stadv_last_error() describes the failure. Output
 *    parameters are written only on STADV_STATUS_OK.
 *  - All strings are NUL-terminated UTF-8.
 */

#ifndef STADV_H
#define STADV_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum StadvStatus {
  STADV_STATUS_OK = 0,
  STADV_STATUS_NULL_ARGUMENT = 1,
  STADV_STATUS_INVALID_ARGUMENT = 2,
  STADV_STATUS_IO = 3,
  STADV_STATUS_RUNTIME = 4,
  STADV_STATUS_BOUND_VIOLATION = 5,
} StadvStatus;

/* Opaque handles. */
typedef struct StadvDataset StadvDataset;
typedef struct StadvModel StadvModel;

/* Attack request.
 * method:   0 stpgd, 1 stmim
 * selector: 0 tdns, 1 random, 2 degree, 3 betweenness, 4 pagerank
 * setting:  0 grey, 1 white, 2 black
 * max_windows: cap on evaluated test windows, 0 = all
 * batch: saliency-fusion batch size, 0 = default (64)
 * domain_clip: nonzero also projects adversarial inputs into [0,1]
 */
typedef struct StadvAttackParams {
  double epsilon;
  double alpha;
  uint32_t iters;
  uint32_t eta;
  uint32_t method;
  uint32_t selector;
  uint32_t setting;
  double momentum;
  uint64_t seed;
  uint32_t max_windows;
  uint32_t batch;
  uint32_t domain_clip;
} StadvAttackParams;

/* Attack-effect metrics in raw speed units. */
typedef struct StadvMetrics {
  double g_mae;
  double l_mae;
  double g_rmse;
  double l_rmse;
  double clean_g_mae;
  double degradation_pct;
} StadvMetrics;

/* Library version as a static string. */
const char *stadv_version(void);

/* Message for the most recent failure on this thread (borrowed; valid until
 * the next failing call on the same thread). */
const char *stadv_last_error(void);

/* Synthetic dataset: random geometric sensor graph + diurnal speed series. */
StadvStatus stadv_dataset_generate(uint32_t nodes, uint32_t steps,
                                   uint64_t seed, StadvDataset **out);

/* Load a dataset from a speed CSV (header row of node ids, one row per time
 * step) and graph CSV (from,to,weight rows, zero-based ids). */
StadvStatus stadv_dataset_load(const char *speed_csv_path,
                               const char *graph_csv_path,
                               StadvDataset **out);

uint32_t stadv_dataset_nodes(const StadvDataset *dataset);
uint32_t stadv_dataset_steps(const StadvDataset *dataset);
void stadv_dataset_free(StadvDataset *dataset);

/* Train a forecaster on the dataset's 70/10/20 chronological split with a
 * coarse + fine fixed-step schedule (fine_epochs = 0 disables the second
 * phase). */
StadvStatus stadv_model_train(const StadvDataset *dataset, uint32_t t_in,
                              uint32_t horizon, uint32_t epochs,
                              double learning_rate, uint32_t fine_epochs,
                              double fine_learning_rate, uint64_t seed,
                              StadvModel **out);

/* STADV1 checkpoint I/O. */
StadvStatus stadv_model_save(const StadvModel *model, const char *path);
StadvStatus stadv_model_load(const char *path, StadvModel **out);
void stadv_model_free(StadvModel *model);

/* Clean test G-MAE in raw speed units (max_windows = 0 evaluates the whole
 * test split). */
StadvStatus stadv_model_clean_gmae(const StadvModel *model,
                                   const StadvDataset *dataset,
                                   uint32_t max_windows, double *out);

/* Run one attack evaluation. The surrogate is required for the black-box
 * setting and ignored otherwise (may be NULL). */
StadvStatus stadv_attack_evaluate(const StadvModel *target,
                                  const StadvModel *surrogate,
                                  const StadvDataset *dataset,
                                  const StadvAttackParams *params,
                                  StadvMetrics *out);

/* Randomized verification of the worst-case embedding-gap bound (graphs up
 * to 10 nodes, stacks up to 3 layers, ReLU). Returns
 * STADV_STATUS_BOUND_VIOLATION if any trial exceeds the bound. */
StadvStatus stadv_verify_bound(uint64_t trials, uint64_t seed,
                               double *max_ratio_out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* STADV_H */
