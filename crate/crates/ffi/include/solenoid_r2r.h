#ifndef SOLENOID_R2R_H
#define SOLENOID_R2R_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SrStatus {
  SR_STATUS_OK = 0,
  SR_STATUS_NULL_POINTER = 1,
  SR_STATUS_INVALID_ARGUMENT = 2,
  SR_STATUS_INFEASIBLE = 3,
  SR_STATUS_SIMULATION_FAILED = 4,
  SR_STATUS_PROTOCOL = 5,
  SR_STATUS_BUFFER_TOO_SMALL = 6,
  SR_STATUS_PANIC = 7,
} SrStatus;

typedef struct SrController SrController;

typedef struct SrOptimizer SrOptimizer;

/**
 * Physical device parameters, SI units.
 */
typedef struct SrPhysicalParams {
  double m;
  double k_s;
  double z_s;
  double c_f;
  double k_g;
  double r_g0;
  double r_c0;
  double lambda_sat;
  double r;
} SrPhysicalParams;

/**
 * Identifiable parameters θ₁..θ₇ (index 0 holds θ₁).
 */
typedef struct SrIdentParams {
  double theta[7];
} SrIdentParams;

/**
 * Metrics of one simulated operation. Flags are 1 when the value is defined.
 */
typedef struct SrOperationMetrics {
  int32_t has_impact;
  double v_c;
  int32_t has_impact_time;
  double t_c;
  double nrmse_z;
  /**
   * Integrated squared current prediction error.
   */
  double j_im;
} SrOperationMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to fit). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sr_last_error_message(char *buf, size_t len);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum SrStatus sr_nominal_params(struct SrPhysicalParams *out);

/**
 * # Safety
 * `params` and `out` must be valid pointers.
 */
enum SrStatus sr_rho_to_theta(const struct SrPhysicalParams *params, struct SrIdentParams *out);

/**
 * Feedforward controller for the default reference and timing, mapped with
 * the nominal device.
 *
 * # Safety
 * `theta` and `out` must be valid pointers.
 */
enum SrStatus sr_controller_new(const struct SrIdentParams *theta, struct SrController **out);

/**
 * # Safety
 * `handle` must come from [`sr_controller_new`] and not be used afterwards.
 */
void sr_controller_free(struct SrController *handle);

/**
 * Feedforward voltage at simulation time `t`.
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
enum SrStatus sr_controller_voltage(const struct SrController *handle, double t, double *out);

/**
 * Predicted coil current at simulation time `t`.
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
enum SrStatus sr_controller_predict_current(const struct SrController *handle,
                                            double t,
                                            double *out);

/**
 * Simulates one operation of `device` under the controller built from `theta`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SrStatus sr_simulate_operation(const struct SrPhysicalParams *device,
                                    const struct SrIdentParams *theta,
                                    struct SrOperationMetrics *out);

/**
 * Online Nelder–Mead over `dim` normalized coordinates, started from the
 * all-ones point with relative spread `delta` and the classic coefficients.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SrStatus sr_optimizer_new(size_t dim, double delta, struct SrOptimizer **out);

/**
 * # Safety
 * `handle` must come from [`sr_optimizer_new`] and not be used afterwards.
 */
void sr_optimizer_free(struct SrOptimizer *handle);

/**
 * Writes the next candidate into `out` (at least `dim` values).
 *
 * # Safety
 * `handle` must be valid and `out` must point to `len` writable doubles.
 */
enum SrStatus sr_optimizer_propose(struct SrOptimizer *handle, double *out, size_t len);

/**
 * Reports the cost of the pending candidate.
 *
 * # Safety
 * `handle` must be valid.
 */
enum SrStatus sr_optimizer_update(struct SrOptimizer *handle, double cost);

/**
 * Best vertex so far and its cost.
 *
 * # Safety
 * `handle` must be valid, `out` must point to `len` writable doubles and
 * `cost` must be a valid pointer.
 */
enum SrStatus sr_optimizer_best(const struct SrOptimizer *handle,
                                double *out,
                                size_t len,
                                double *cost);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOLENOID_R2R_H */
