#ifndef SNS_H
#define SNS_H

#include <stddef.h>
#include <stdint.h>

typedef enum SnsStatus {
  SNS_STATUS_OK = 0,
  SNS_STATUS_NULL_POINTER = 1,
  SNS_STATUS_INVALID_INPUT = 2,
  SNS_STATUS_DIMENSION_MISMATCH = 3,
  SNS_STATUS_NON_FINITE = 4,
  SNS_STATUS_FACTORIZATION = 5,
  SNS_STATUS_IO = 6,
  SNS_STATUS_PARSE = 7,
  SNS_STATUS_PANIC = 8,
} SnsStatus;

/**
 * Learned history dynamics loaded from a checkpoint.
 */
typedef struct SnsDynamics SnsDynamics;

/**
 * Smooth network loaded from JSON.
 */
typedef struct SnsNet SnsNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t sns_last_error_message(char *buf, size_t len);

/**
 * Parses a network from a JSON string.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum SnsStatus sns_net_from_json(const char *json, struct SnsNet **out);

/**
 * Loads a network from a JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum SnsStatus sns_net_load(const char *path, struct SnsNet **out);

/**
 * # Safety
 * `net` must come from `sns_net_from_json`/`sns_net_load` and not be used afterwards.
 */
void sns_net_free(struct SnsNet *net);

/**
 * # Safety
 * `net` must be a live handle.
 */
size_t sns_net_input_dim(const struct SnsNet *net);

/**
 * # Safety
 * `net` must be a live handle.
 */
size_t sns_net_output_dim(const struct SnsNet *net);

/**
 * `out = f(x)` for one input.
 *
 * # Safety
 * `x` valid for `x_len` reads, `out` for `out_len` writes.
 */
enum SnsStatus sns_net_forward(const struct SnsNet *net,
                               const double *x,
                               size_t x_len,
                               double *out,
                               size_t out_len);

/**
 * Input Jacobian, row-major `[outputs × inputs]`.
 *
 * # Safety
 * `x` valid for `x_len` reads, `out` for `out_len` writes.
 */
enum SnsStatus sns_net_jacobian(const struct SnsNet *net,
                                const double *x,
                                size_t x_len,
                                double *out,
                                size_t out_len);

/**
 * Product bound `C`, propagated sum `S` and the Jacobian-Lipschitz bound `C·S`.
 *
 * # Safety
 * Output pointers must be valid for writes.
 */
enum SnsStatus sns_net_bound(const struct SnsNet *net, double *c, double *s, double *jac_bound);

/**
 * Smoothness penalty for order 1 or 2.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum SnsStatus sns_net_penalty(const struct SnsNet *net,
                               uint32_t order,
                               double budget,
                               double weight,
                               double *out);

/**
 * Relaxed log barrier value and first derivative.
 *
 * # Safety
 * Output pointers must be valid for writes.
 */
enum SnsStatus sns_relaxed_barrier(double g, double delta, double *value, double *derivative);

/**
 * One step of the particle with ground contact.
 *
 * # Safety
 * Output pointers must be valid for writes.
 */
enum SnsStatus sns_particle_step(double q,
                                 double v,
                                 double u,
                                 double g,
                                 double dt,
                                 double *q_out,
                                 double *v_out);

/**
 * Multivariate Cauchy negative log-likelihood of `x` under `(mu, sigma)`,
 * dropping constant terms.
 *
 * # Safety
 * The three arrays must be valid for `n` reads; `out` for a write.
 */
enum SnsStatus sns_cauchy_nll(const double *x,
                              const double *mu,
                              const double *sigma,
                              size_t n,
                              double *out);

/**
 * Loads learned dynamics from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum SnsStatus sns_dynamics_load(const char *path, struct SnsDynamics **out);

/**
 * # Safety
 * `d` must come from `sns_dynamics_load` and not be used afterwards.
 */
void sns_dynamics_free(struct SnsDynamics *d);

/**
 * Writes `(history, state_dim, action_dim)`.
 *
 * # Safety
 * Output pointers must be valid for writes.
 */
enum SnsStatus sns_dynamics_dims(const struct SnsDynamics *d,
                                 size_t *history,
                                 size_t *state_dim,
                                 size_t *action_dim);

/**
 * Next state from row-major windows `x` `[(H+1) × n]` and `u` `[(H+1) × m]`.
 *
 * # Safety
 * Arrays must be valid for the given lengths.
 */
enum SnsStatus sns_dynamics_step(const struct SnsDynamics *d,
                                 const double *x,
                                 size_t x_len,
                                 const double *u,
                                 size_t u_len,
                                 double *out,
                                 size_t out_len);

/**
 * Solves a shooting problem given as JSON with the Gauss–Newton planner and
 * returns the report as a JSON string to be released with `sns_string_free`.
 *
 * # Safety
 * `problem_json` must be NUL-terminated; `report_json` valid for writes.
 */
enum SnsStatus sns_mpc_solve_json(const struct SnsDynamics *d,
                                  const char *problem_json,
                                  char **report_json);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void sns_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SNS_H */
