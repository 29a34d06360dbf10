#ifndef SA_SMPC_H
#define SA_SMPC_H

/* Generated by cbindgen from sa-smpc-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum SaSmpcStatus {
  SaSmpcStatus_Ok = 0,
  /**
   * A required pointer argument was NULL.
   */
  SaSmpcStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  SaSmpcStatus_InvalidUtf8 = 2,
  /**
   * An argument violated a documented precondition.
   */
  SaSmpcStatus_InvalidArgument = 3,
  /**
   * Offline synthesis failed.
   */
  SaSmpcStatus_DesignFailure = 4,
  /**
   * The instance has no solution (empty terminal set, infeasible start).
   */
  SaSmpcStatus_Infeasible = 5,
  /**
   * A validation check failed.
   */
  SaSmpcStatus_ValidationFailure = 6,
  /**
   * Serialization or I/O failure.
   */
  SaSmpcStatus_IoFailure = 7,
  /**
   * Internal error (including caught panics).
   */
  SaSmpcStatus_InternalError = 8,
} SaSmpcStatus;

/**
 * Opaque contraction-certificate handle.
 */
typedef struct SaSmpcCertificate SaSmpcCertificate;

/**
 * Opaque online-controller handle (single trajectory, stateful).
 */
typedef struct SaSmpcController SaSmpcController;

/**
 * Opaque plant model handle.
 */
typedef struct SaSmpcModel SaSmpcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message text for the most recent failure on this thread. Returns the
 * required buffer capacity including the terminating NUL; `buf` may be NULL.
 */
size_t sa_smpc_last_error(char *buf, size_t cap);

/**
 * Builds the built-in CSTR benchmark model.
 */
enum SaSmpcStatus sa_smpc_model_cstr(struct SaSmpcModel **out);

/**
 * Parses a model from its JSON representation (keys "A", "B", "u_max", "W").
 */
enum SaSmpcStatus sa_smpc_model_from_json(const char *json, struct SaSmpcModel **out);

/**
 * State and input dimensions. Either out-pointer may be NULL.
 */
enum SaSmpcStatus sa_smpc_model_dims(const struct SaSmpcModel *model, size_t *n_out, size_t *m_out);

/**
 * Releases a model handle; NULL is a no-op.
 */
void sa_smpc_model_free(struct SaSmpcModel *model);

/**
 * Builds the reference certificate for the built-in CSTR model.
 */
enum SaSmpcStatus sa_smpc_certificate_reference(struct SaSmpcCertificate **out);

/**
 * Parses a certificate from JSON (the format written by the design tools).
 */
enum SaSmpcStatus sa_smpc_certificate_from_json(const char *json, struct SaSmpcCertificate **out);

/**
 * Serializes a certificate to JSON. Returns the status; `*len_out` receives
 * the required capacity including the NUL (call with `buf = NULL` to query).
 */
enum SaSmpcStatus sa_smpc_certificate_to_json(const struct SaSmpcCertificate *cert,
                                              char *buf,
                                              size_t cap,
                                              size_t *len_out);

/**
 * Synthesizes a certificate for `model` by rate bisection.
 */
enum SaSmpcStatus sa_smpc_certificate_design(const struct SaSmpcModel *model,
                                             double bisect_tol,
                                             double sdp_tol,
                                             struct SaSmpcCertificate **out);

/**
 * Contraction rates (lambda, lambda_L). Either out-pointer may be NULL.
 */
enum SaSmpcStatus sa_smpc_certificate_rates(const struct SaSmpcCertificate *cert,
                                            double *lambda_out,
                                            double *lambda_l_out);

/**
 * Releases a certificate handle; NULL is a no-op.
 */
void sa_smpc_certificate_free(struct SaSmpcCertificate *cert);

/**
 * Builds a constraint-tightened MPC controller.
 *
 * - `q_diag` (`n` entries) and `r_diag` (`m` entries): diagonal stage
 *   weights; `r_diag` is in actuator units.
 * - `v_ss`: steady-state nominal input bound, actuator units.
 * - `h` (`h_rows * n`, row-major) and `h_offsets` (`h_rows`): probabilistic
 *   state constraints `H x <= h` at level `1 - epsilon`.
 * - `use_refined`: nonzero selects the refined contraction rate when its
 *   applicability condition holds.
 */
enum SaSmpcStatus sa_smpc_controller_new(const struct SaSmpcModel *model,
                                         const struct SaSmpcCertificate *cert,
                                         const double *q_diag,
                                         const double *r_diag,
                                         double v_ss,
                                         size_t horizon,
                                         double epsilon,
                                         const double *h,
                                         const double *h_offsets,
                                         size_t h_rows,
                                         int32_t use_refined,
                                         struct SaSmpcController **out);

/**
 * Advances the controller one step: reads the measured state `x` (`n`
 * entries) and writes the input to apply, in actuator units, to `u_out`
 * (`m` entries). `fallback_out` (optional) receives 1 when the shifted
 * previous plan was applied instead of a fresh optimum.
 */
enum SaSmpcStatus sa_smpc_controller_step(struct SaSmpcController *ctrl,
                                          const double *x,
                                          double *u_out,
                                          int32_t *fallback_out);

/**
 * Resets the controller to its initial (k = 0) state.
 */
enum SaSmpcStatus sa_smpc_controller_reset(struct SaSmpcController *ctrl);

/**
 * Contraction rate used for the tightening of this controller.
 */
enum SaSmpcStatus sa_smpc_controller_hat_lambda(const struct SaSmpcController *ctrl, double *out);

/**
 * Releases a controller handle; NULL is a no-op.
 */
void sa_smpc_controller_free(struct SaSmpcController *ctrl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SA_SMPC_H */
