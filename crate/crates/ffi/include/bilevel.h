#ifndef BILEVEL_H
#define BILEVEL_H

#include <stddef.h>
#include <stdint.h>

typedef enum BlStatus {
  BL_STATUS_OK = 0,
  BL_STATUS_NULL_POINTER = 1,
  BL_STATUS_INVALID_UTF8 = 2,
  // Bad JSON, bad parameters or unsupported stencil.
  BL_STATUS_CONFIG = 3,
  // Vector length does not match the problem dimensions.
  BL_STATUS_DIM_MISMATCH = 4,
  // Divergence, indefinite curvature or another numerical failure.
  BL_STATUS_NUMERICAL = 5,
  BL_STATUS_PANIC = 6,
} BlStatus;

// Opaque problem handle.
typedef struct BlProblem BlProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Build a problem from a JSON spec such as `{"name": "quad", "seed": 0}`.
// Task distributions (`meta_ridge`) are not available through this interface.
//
// # Safety
// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
enum BlStatus bl_problem_new(const char *spec_json, struct BlProblem **out);

// # Safety
// `problem` must come from `bl_problem_new` and not be used afterwards. Null is a no-op.
void bl_problem_free(struct BlProblem *problem);

// # Safety
// `problem` must be a live handle; `n_phi` and `n_theta` valid pointers.
enum BlStatus bl_problem_dims(const struct BlProblem *problem, size_t *n_phi, size_t *n_theta);

// The problem's default starting θ.
//
// # Safety
// `problem` must be a live handle; `theta_out` must hold `n_theta` doubles.
enum BlStatus bl_problem_initial_theta(const struct BlProblem *problem,
                                       double *theta_out,
                                       size_t n_theta);

// Minimize the inner loss from φ = 0. `solver_json` may be null for defaults.
// `iters_out` may be null.
//
// # Safety
// `problem` must be a live handle; arrays must hold the stated lengths.
enum BlStatus bl_solve_inner(const struct BlProblem *problem,
                             const double *theta,
                             size_t n_theta,
                             const char *solver_json,
                             double *phi_out,
                             size_t n_phi,
                             size_t *iters_out);

// Hypergradient at (φ̂, θ). `estimator_json` is an estimator spec such as
// `{"method": "ep", "points": 3, "beta": 0.01}`; null selects conjugate
// gradients. `solver_json` configures EP phases and may be null.
//
// # Safety
// `problem` must be a live handle; arrays must hold the stated lengths.
enum BlStatus bl_estimate(const struct BlProblem *problem,
                          const double *phi,
                          size_t n_phi,
                          const double *theta,
                          size_t n_theta,
                          const char *estimator_json,
                          const char *solver_json,
                          double *grad_out,
                          size_t n_grad);

// Stencil coefficients α for `points` nodes; `symmetric` non-zero selects
// the central stencil on nodes (−1, 0, 1).
//
// # Safety
// `out` must hold `len` doubles.
enum BlStatus bl_stencil_coefficients(size_t points, int symmetric, double *out, size_t len);

// Copy the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length excluding the NUL.
//
// # Safety
// `buf` must hold `len` bytes, or be null with `len` 0.
size_t bl_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *bl_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BILEVEL_H */
