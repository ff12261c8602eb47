/* C interface for the nonlocal-gradient optimal control toolkit. */

#ifndef NONLOCAL_CONTROL_H
#define NONLOCAL_CONTROL_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Kernel family selector.
typedef enum NlcKernelMode {
  // Kernel defined directly at the given horizon.
  NLC_KERNEL_MODE_FIXED_HORIZON = 0,
  // Unit-horizon kernel rescaled to the given horizon.
  NLC_KERNEL_MODE_RESCALED_FROM_UNIT = 1,
} NlcKernelMode;

// Kernel cutoff profile selector.
typedef enum NlcProfile {
  NLC_PROFILE_QUINTIC = 0,
  NLC_PROFILE_SEPTIC = 1,
} NlcProfile;

// Status code returned by every API function.
typedef enum NlcStatus {
  // Success.
  NLC_STATUS_OK = 0,
  // A pointer argument was null or an argument was structurally invalid.
  NLC_STATUS_INVALID_ARGUMENT = 1,
  // Parameters violate a mathematical or configuration precondition.
  NLC_STATUS_DOMAIN = 2,
  // An iterative solver failed to converge.
  NLC_STATUS_SOLVER = 3,
  // File input/output failed.
  NLC_STATUS_IO = 4,
  // A panic was caught at the boundary (library bug).
  NLC_STATUS_INTERNAL = 5,
} NlcStatus;

// Opaque handle to a collar-padded uniform grid.
typedef struct NlcGrid NlcGrid;

// Opaque handle to an assembled nonlocal gradient operator.
typedef struct NlcOperator NlcOperator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread.
//
// The pointer stays valid until the next failing call on the same thread.
// Never null; the message is empty when no failure has occurred.
const char *nlc_last_error(void);

// Library version as a static C string (semantic versioning).
const char *nlc_version(void);

// Build a grid over the box `[box_min, box_max]` (length `dim` each),
// spacing `h`, horizon `delta`. The horizon and the box extents must be
// integral multiples of `h`.
//
// # Safety
// `box_min` and `box_max` must point to `dim` doubles; `out` must be a
// valid location for a handle pointer.
enum NlcStatus nlc_grid_new(size_t dim,
                            const double *box_min,
                            const double *box_max,
                            double h,
                            double delta,
                            struct NlcGrid **out);

// Number of nodes in the grid (including the collar padding).
//
// # Safety
// `grid` must be a live handle from [`nlc_grid_new`]; `out` must be valid.
enum NlcStatus nlc_grid_num_nodes(const struct NlcGrid *grid, size_t *out);

// Write the position of node `node` into `out` (`dim` doubles).
//
// # Safety
// `grid` must be a live handle; `out` must point to `dim` doubles.
enum NlcStatus nlc_grid_node_position(const struct NlcGrid *grid, size_t node, double *out);

// Release a grid handle. Passing null is a no-op.
//
// # Safety
// `grid` must be null or a handle not freed before.
void nlc_grid_free(struct NlcGrid *grid);

// Assemble the nonlocal gradient operator for the truncated fractional
// kernel on the given grid.
//
// `s` is the fractional order in (0, 1); `a0`/`b0` the cutoff plateau
// amplitude and relative width; pass `mass_target` as NaN to keep the
// natural kernel mass, or a positive value to rescale the total mass.
//
// # Safety
// `grid` must be a live handle; `out` must be valid.
enum NlcStatus nlc_operator_new(const struct NlcGrid *grid,
                                double s,
                                double a0,
                                double b0,
                                enum NlcProfile profile,
                                enum NlcKernelMode mode,
                                double mass_target,
                                struct NlcOperator **out);

// Total kernel mass represented by the operator's stencil.
//
// # Safety
// `op` must be a live handle; `out` must be valid.
enum NlcStatus nlc_operator_mass(const struct NlcOperator *op, double *out);

// Release an operator handle. Passing null is a no-op.
//
// # Safety
// `op` must be null or a handle not freed before.
void nlc_operator_free(struct NlcOperator *op);

// Solve the state problem `div(|Du|^{p-2} Du) + g = 0` (weak form) with
// homogeneous collar conditions.
//
// `load` and `state_out` are node-major arrays of `num_nodes * dim`
// doubles on the operator's grid.
//
// # Safety
// `op` must be a live handle; `load` and `state_out` must point to
// `num_nodes * dim` doubles.
enum NlcStatus nlc_solve_state(const struct NlcOperator *op,
                               double p,
                               const double *load,
                               double tol,
                               size_t max_iter,
                               double *state_out,
                               size_t *iterations_out,
                               double *residual_out);

// Solve the box-constrained tracking control problem
// `min (1/p)||S(g) - target||^p + weight ||g||^{p'}` over
// `lower <= g <= upper`, starting from `g = 0`.
//
// `target`, `control_out` and `state_out` are node-major arrays of
// `num_nodes * dim` doubles.
//
// # Safety
// `op` must be a live handle; array arguments must point to
// `num_nodes * dim` doubles.
enum NlcStatus nlc_solve_control(const struct NlcOperator *op,
                                 double p,
                                 const double *target,
                                 double weight,
                                 double lower,
                                 double upper,
                                 double tol,
                                 size_t max_iter,
                                 double *control_out,
                                 double *state_out,
                                 double *cost_out);

// Estimate the best constant in `||u||_p <= C ||Du||_p` over fields
// vanishing on the collar.
//
// # Safety
// `op` must be a live handle; `out` must be valid.
enum NlcStatus nlc_poincare_constant(const struct NlcOperator *op,
                                     double p,
                                     double tol,
                                     uint64_t seed,
                                     double *out);

// Run a full experiment from a TOML config file, writing artifacts
// (results.csv, summary.json, manifest.json) into `out_dir`. Mirrors the
// `nlctl` command line.
//
// `kind` is one of `check`, `solve-state`, `solve-control`, `sweep-s`,
// `sweep-delta`, `poincare`, `operator-probe`.
//
// # Safety
// `kind`, `config_path` and `out_dir` must be valid NUL-terminated
// strings.
enum NlcStatus nlc_run_experiment(const char *kind,
                                  const char *config_path,
                                  const char *out_dir,
                                  uint64_t seed,
                                  size_t threads);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NONLOCAL_CONTROL_H */
