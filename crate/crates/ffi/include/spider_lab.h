#ifndef SPIDER_LAB_H
#define SPIDER_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpiderStatus {
  SPIDER_STATUS_OK = 0,
  SPIDER_STATUS_NULL_POINTER = 1,
  SPIDER_STATUS_INVALID_ARGUMENT = 2,
  SPIDER_STATUS_UNSUPPORTED_N = 3,
  SPIDER_STATUS_DOMAIN_VIOLATION = 4,
  SPIDER_STATUS_DIMENSION_MISMATCH = 5,
  SPIDER_STATUS_EXCESSIVE_CENSORING = 6,
  SPIDER_STATUS_NON_CONVERGENCE = 7,
  SPIDER_STATUS_TRUNCATION_CONTAMINATED = 8,
  SPIDER_STATUS_DEGENERATE_GRID = 9,
  SPIDER_STATUS_RULE_PARSE = 10,
  SPIDER_STATUS_PANIC = 11,
} SpiderStatus;

// Solved dynamic-programming grid at unit cost.
typedef struct SpiderDpGrid SpiderDpGrid;

// Monte Carlo estimate from the origin.
typedef struct SpiderEstimate SpiderEstimate;

typedef struct SpiderEstimateSummary {
  uintptr_t n_paths;
  double mean_s;
  double se_s;
  double mean_tau;
  double se_tau;
  double penalized;
  double se_penalized;
  double ratio;
  double se_ratio;
  double censored_fraction;
} SpiderEstimateSummary;

typedef struct SpiderDpSummary {
  uintptr_t n;
  double h;
  double s_max;
  double theta_estimate;
  uint64_t iterations;
  double residual;
  double boundary_settlement;
  double face_hit_probability;
  uint64_t states;
} SpiderDpSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message (NUL terminated,
// truncated to `cap`) into `buf` and returns its full length in bytes
// without the terminator. Pass a null `buf` to query the length.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
uintptr_t spider_last_error(char *buf, uintptr_t cap);

// Origin value at unit cost for `n` in 0..=2.
enum SpiderStatus spider_theta(uintptr_t n, double *result);

// Spider constant `sqrt(n + 1)` for `n` in 0..=2.
enum SpiderStatus spider_c_n(uintptr_t n, double *result);

// Time cost that is optimal when the mean stopping time is `m`.
enum SpiderStatus spider_optimal_c(uintptr_t n, double m, double *result);

// Closed-form value at `(x, r, s[0..s_len])` with time cost `c`. For
// `n = 0`, `s_len` is 1 and `x` may be negative.
//
// # Safety
// `s` must point to `s_len` readable doubles.
enum SpiderStatus spider_v_hat(uintptr_t n,
                               double c,
                               double x,
                               uintptr_t r,
                               const double *s,
                               uintptr_t s_len,
                               double *result);

// Writes 1 to `result` if the point is in the stopping set, else 0.
//
// # Safety
// `s` must point to `s_len` readable doubles.
enum SpiderStatus spider_in_stopping_set(uintptr_t n,
                                         double c,
                                         double x,
                                         uintptr_t r,
                                         const double *s,
                                         uintptr_t s_len,
                                         int32_t *result);

// Runs `paths` lattice paths of step `h` under the rule `rule`
// (for example `"first-entry:C=1"`). `threads = 0` uses every core; the
// result does not depend on it. `max_steps = 0` picks a horizon of 1000.
//
// # Safety
// `rule` must be a NUL-terminated string; `handle` must be writable.
enum SpiderStatus spider_estimate_new(const char *rule,
                                      uintptr_t n,
                                      double c,
                                      double h,
                                      uintptr_t paths,
                                      uint64_t seed,
                                      uint64_t max_steps,
                                      uintptr_t threads,
                                      struct SpiderEstimate **handle);

// # Safety
// `handle` must come from [`spider_estimate_new`].
enum SpiderStatus spider_estimate_summary(const struct SpiderEstimate *handle,
                                          struct SpiderEstimateSummary *summary);

// # Safety
// `handle` must be null or come from [`spider_estimate_new`], and must not
// be used afterwards.
void spider_estimate_free(struct SpiderEstimate *handle);

// Solves on the `h`-lattice with records truncated at `s_max`. `n = 0`
// solves the line with stop depth `x_depth` (ignored otherwise). Set
// `keep_surface` non-zero to allow [`spider_dp_value_at`].
//
// # Safety
// `handle` must be writable.
enum SpiderStatus spider_dp_solve(uintptr_t n,
                                  double h,
                                  double s_max,
                                  double x_depth,
                                  double tol,
                                  uint64_t max_iters,
                                  uintptr_t threads,
                                  int32_t keep_surface,
                                  struct SpiderDpGrid **handle);

// # Safety
// `handle` must come from [`spider_dp_solve`].
enum SpiderStatus spider_dp_summary(const struct SpiderDpGrid *handle,
                                    struct SpiderDpSummary *summary);

// Grid value at a lattice point.
//
// # Safety
// `handle` must come from [`spider_dp_solve`]; `s` must point to `s_len`
// readable doubles.
enum SpiderStatus spider_dp_value_at(const struct SpiderDpGrid *handle,
                                     double x,
                                     uintptr_t r,
                                     const double *s,
                                     uintptr_t s_len,
                                     double *result);

// # Safety
// `handle` must be null or come from [`spider_dp_solve`], and must not be
// used afterwards.
void spider_dp_free(struct SpiderDpGrid *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPIDER_LAB_H */
