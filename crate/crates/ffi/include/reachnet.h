#ifndef REACHNET_H
#define REACHNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RnStatus {
  RN_STATUS_OK = 0,
  RN_STATUS_NULL_POINTER = 1,
  RN_STATUS_INVALID_ARGUMENT = 2,
  RN_STATUS_UNKNOWN_MODEL = 3,
  RN_STATUS_IO = 4,
  RN_STATUS_SCHEMA = 5,
  RN_STATUS_NUMERICAL = 6,
  RN_STATUS_PANIC = 7,
} RnStatus;

/**
 * A trained network or ensemble.
 */
typedef struct RnClassifier RnClassifier;

/**
 * A benchmark hybrid system.
 */
typedef struct RnModel RnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rn_version(void);

/**
 * Message of the last failed call on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *rn_last_error(void);

/**
 * Creates a benchmark by name ("pendulum", "neuron", "quadcopter") with
 * default parameters and integrator settings.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RnStatus rn_model_new(const char *name, struct RnModel **out);

/**
 * # Safety
 * `model` must come from [`rn_model_new`] and not be used afterwards.
 * Null is ignored.
 */
void rn_model_free(struct RnModel *model);

/**
 * Number of state variables, default time bound and trace step.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
enum RnStatus rn_model_info(const struct RnModel *model, size_t *dim, double *t_bound, double *h);

/**
 * Simulates from `x` (in the model's initial mode) and reports whether the
 * unsafe set is reached within `t_bound`.
 *
 * # Safety
 * `model` must be a live handle, `x` must point to `n` doubles and
 * `reaches` must be valid.
 */
enum RnStatus rn_reach_label(const struct RnModel *model,
                             const double *x,
                             size_t n,
                             double t_bound,
                             double h,
                             bool *reaches);

/**
 * Loads a network file or an ensemble manifest.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RnStatus rn_classifier_load(const char *path, struct RnClassifier **out);

/**
 * # Safety
 * `clf` must come from [`rn_classifier_load`] and not be used afterwards.
 * Null is ignored.
 */
void rn_classifier_free(struct RnClassifier *clf);

/**
 * # Safety
 * `clf` must be a live handle and `dim` valid.
 */
enum RnStatus rn_classifier_input_dim(const struct RnClassifier *clf, size_t *dim);

/**
 * Network output in [0, 1]; for an ensemble, the fraction of positive votes.
 *
 * # Safety
 * `clf` must be a live handle, `x` must point to `n` doubles and `score`
 * must be valid.
 */
enum RnStatus rn_classifier_score(const struct RnClassifier *clf,
                                  const double *x,
                                  size_t n,
                                  double *score);

/**
 * # Safety
 * As for [`rn_classifier_score`].
 */
enum RnStatus rn_classifier_classify(const struct RnClassifier *clf,
                                     const double *x,
                                     size_t n,
                                     bool *positive);

/**
 * Sets the decision threshold of a single network.
 *
 * # Safety
 * `clf` must be a live handle not shared with another thread.
 */
enum RnStatus rn_classifier_set_threshold(struct RnClassifier *clf, double theta);

/**
 * Wilson score interval at confidence `1 - alpha`.
 *
 * # Safety
 * `lo` and `hi` must be valid.
 */
enum RnStatus rn_wilson_ci(double p_hat, size_t n, double alpha, double *lo, double *hi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REACHNET_H */
