#ifndef ACTIVETRACK_H
#define ACTIVETRACK_H

/* Regenerate with: cbindgen --config cbindgen.toml --output include/activetrack.h */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Likelihood model selector.
 */
typedef enum AtModelKind {
  AT_MODEL_KIND_REGRESSION = 0,
  AT_MODEL_KIND_LOGISTIC = 1,
  AT_MODEL_KIND_LOGISTIC_MF = 2,
} AtModelKind;

typedef enum AtPolicy {
  AT_POLICY_ACTIVE_ADAPTIVE = 0,
  AT_POLICY_PASSIVE_ADAPTIVE = 1,
  AT_POLICY_ACTIVE_RANDOM = 2,
  AT_POLICY_PASSIVE_RANDOM = 3,
} AtPolicy;

/**
 * Result codes.
 */
typedef enum AtStatus {
  AT_STATUS_OK = 0,
  AT_STATUS_NULL_POINTER = 1,
  AT_STATUS_INVALID_ARGUMENT = 2,
  AT_STATUS_SIZE_MISMATCH = 3,
  AT_STATUS_SINGULAR_INFORMATION = 4,
  AT_STATUS_DEGENERATE_DESIGN = 5,
  AT_STATUS_BUDGET_EXHAUSTED = 6,
  AT_STATUS_NUMERICAL_DIVERGENCE = 7,
  AT_STATUS_IO = 8,
  AT_STATUS_PARSE = 9,
  AT_STATUS_LABEL_CALLBACK_FAILED = 10,
  AT_STATUS_PANIC = 11,
} AtStatus;

/**
 * Opaque sequential-learning session.
 */
typedef struct AtSession AtSession;

/**
 * Session settings. Start from [`at_session_config_default`].
 */
typedef struct AtSessionConfig {
  enum AtModelKind model;
  size_t dim;
  /**
   * Regression label-noise variance; ignored by the logistic models.
   */
  double noise_var;
  enum AtPolicy policy;
  double eps;
  double alpha;
  double c1;
  double c2;
  /**
   * Diameter of the parameter ball centered at the origin.
   */
  double diameter;
  size_t window;
  /**
   * Label cap per step; 0 means ten times the pool size.
   */
  size_t k_cap;
  /**
   * Nonzero selects top-K sampling without replacement.
   */
  int32_t top_k;
  uint64_t seed;
} AtSessionConfig;

/**
 * Label oracle: writes the label of pool element `index` (features `x`,
 * length `dim`) at step `t` into `out` and returns 0, or nonzero on failure.
 */
typedef int32_t (*AtLabelFn)(void *user,
                             size_t t,
                             size_t index,
                             const double *x,
                             size_t dim,
                             double *out);

/**
 * Per-step summary. Unavailable quantities are NaN.
 */
typedef struct AtStepReport {
  size_t t;
  size_t k;
  double rho_hat;
  double m_hat;
  double lb_hat;
  double design_objective;
  double weighted_risk;
} AtStepReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len − 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` writes.
 */
size_t at_last_error_message(char *buf, size_t len);

/**
 * Evaluates `c1·tau_sq/k + c2·(delta/k)²`.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum AtStatus at_bound_b(double tau_sq, double delta, size_t k, double c1, double c2, double *out);

/**
 * Smallest budget meeting the target excess risk `eps`.
 *
 * # Safety
 * `out_k` must be valid for one write.
 */
enum AtStatus at_select_sample_size(size_t dim,
                                    double eps,
                                    double m_hat,
                                    double rho_hat,
                                    double c1,
                                    double c2,
                                    size_t cap,
                                    size_t *out_k);

/**
 * Optimizes the sampling design over a pool at reference point `theta`.
 *
 * # Safety
 * `features` must hold `n·dim` values, `theta` `dim` values and
 * `out_weights` room for `n`; `out_objective` may be null.
 */
enum AtStatus at_optimize_design(enum AtModelKind model,
                                 size_t dim,
                                 const double *features,
                                 size_t n,
                                 const double *theta,
                                 double *out_weights,
                                 double *out_objective);

/**
 * Default settings: active-adaptive regression with `eps = 1`.
 */
struct AtSessionConfig at_session_config_default(size_t dim);

/**
 * Creates a session; free it with [`at_session_free`].
 *
 * # Safety
 * `cfg` must point to a valid config and `out` be valid for one write.
 */
enum AtStatus at_session_new(const struct AtSessionConfig *cfg, struct AtSession **out);

/**
 * # Safety
 * `session` must be null or a pointer from [`at_session_new`] not yet freed.
 */
void at_session_free(struct AtSession *session);

/**
 * Runs one step on a pool of `n` items, querying labels through `label`.
 *
 * # Safety
 * `session` must come from [`at_session_new`]; `features` must hold
 * `n·dim` values; `report` may be null. `label` is called synchronously.
 */
enum AtStatus at_session_step(struct AtSession *session,
                              const double *features,
                              size_t n,
                              AtLabelFn label,
                              void *user,
                              struct AtStepReport *report);

/**
 * Copies the current estimate into `out` (room for `dim` values).
 * Returns `InvalidArgument` before the first step.
 *
 * # Safety
 * `session` must come from [`at_session_new`]; `out` valid for `len` writes.
 */
enum AtStatus at_session_theta(const struct AtSession *session, double *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTIVETRACK_H */
