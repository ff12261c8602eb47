//! C ABI for the nonlocal-gradient control toolkit.
//!
//! All functions return an [`NlcStatus`] code; outputs are written through
//! pointers. Objects cross the boundary as opaque handles that must be
//! released with the matching `_free` function. On any failure the
//! per-thread error message is updated and can be fetched with
//! [`nlc_last_error`]. No function panics across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use nonlocal_control::config::{load_config, validate, Kind};
use nonlocal_control::control::{solve_control, Bound, ControlProblem};
use nonlocal_control::energy::EnergyParams;
use nonlocal_control::grid::{build_grid, Field, Grid};
use nonlocal_control::kernel::{normalize_mass, CutoffSpec, KernelMode, KernelSpec, Profile};
use nonlocal_control::localization::estimate_poincare;
use nonlocal_control::operators::{GradOp, NonlocalGradientOp};
use nonlocal_control::state::solve_state_auto;
use nonlocal_control::Error;

/// Status code returned by every API function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlcStatus {
    /// Success.
    Ok = 0,
    /// A pointer argument was null or an argument was structurally invalid.
    InvalidArgument = 1,
    /// Parameters violate a mathematical or configuration precondition.
    Domain = 2,
    /// An iterative solver failed to converge.
    Solver = 3,
    /// File input/output failed.
    Io = 4,
    /// A panic was caught at the boundary (library bug).
    Internal = 5,
}

/// Kernel cutoff profile selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlcProfile {
    Quintic = 0,
    Septic = 1,
}

/// Kernel family selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlcKernelMode {
    /// Kernel defined directly at the given horizon.
    FixedHorizon = 0,
    /// Unit-horizon kernel rescaled to the given horizon.
    RescaledFromUnit = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> NlcStatus {
    match err {
        Error::Domain(_) | Error::SingularInput(_) | Error::Grid(_) | Error::Config(_) => {
            NlcStatus::Domain
        }
        Error::Solver(_) => NlcStatus::Solver,
        Error::Io(_) => NlcStatus::Io,
        _ => NlcStatus::Domain,
    }
}

fn fail(err: &Error) -> NlcStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn invalid(msg: &str) -> NlcStatus {
    set_error(msg);
    NlcStatus::InvalidArgument
}

/// Run a closure, converting panics into `NlcStatus::Internal`.
fn guarded(body: impl FnOnce() -> NlcStatus) -> NlcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic crossed the language boundary");
            NlcStatus::Internal
        }
    }
}

/// Message describing the most recent failure on this thread.
///
/// The pointer stays valid until the next failing call on the same thread.
/// Never null; the message is empty when no failure has occurred.
#[no_mangle]
pub extern "C" fn nlc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static C string (semantic versioning).
#[no_mangle]
pub extern "C" fn nlc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// grid handle
// ---------------------------------------------------------------------------

/// Opaque handle to a collar-padded uniform grid.
pub struct NlcGrid {
    grid: Grid,
}

/// Build a grid over the box `[box_min, box_max]` (length `dim` each),
/// spacing `h`, horizon `delta`. The horizon and the box extents must be
/// integral multiples of `h`.
///
/// # Safety
/// `box_min` and `box_max` must point to `dim` doubles; `out` must be a
/// valid location for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn nlc_grid_new(
    dim: usize,
    box_min: *const f64,
    box_max: *const f64,
    h: f64,
    delta: f64,
    out: *mut *mut NlcGrid,
) -> NlcStatus {
    guarded(|| {
        if out.is_null() || box_min.is_null() || box_max.is_null() {
            return invalid("null pointer argument");
        }
        if dim == 0 || dim > 2 {
            return invalid("dim must be 1 or 2");
        }
        let lo = slice::from_raw_parts(box_min, dim);
        let hi = slice::from_raw_parts(box_max, dim);
        match build_grid(lo, hi, h, delta) {
            Ok(grid) => {
                *out = Box::into_raw(Box::new(NlcGrid { grid }));
                NlcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of nodes in the grid (including the collar padding).
///
/// # Safety
/// `grid` must be a live handle from [`nlc_grid_new`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nlc_grid_num_nodes(grid: *const NlcGrid, out: *mut usize) -> NlcStatus {
    guarded(|| {
        if grid.is_null() || out.is_null() {
            return invalid("null pointer argument");
        }
        *out = (*grid).grid.num_nodes();
        NlcStatus::Ok
    })
}

/// Write the position of node `node` into `out` (`dim` doubles).
///
/// # Safety
/// `grid` must be a live handle; `out` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn nlc_grid_node_position(
    grid: *const NlcGrid,
    node: usize,
    out: *mut f64,
) -> NlcStatus {
    guarded(|| {
        if grid.is_null() || out.is_null() {
            return invalid("null pointer argument");
        }
        let g = &(*grid).grid;
        if node >= g.num_nodes() {
            return invalid("node index out of range");
        }
        let pos = g.position(node);
        for i in 0..g.dim {
            *out.add(i) = pos[i];
        }
        NlcStatus::Ok
    })
}

/// Release a grid handle. Passing null is a no-op.
///
/// # Safety
/// `grid` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn nlc_grid_free(grid: *mut NlcGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

// ---------------------------------------------------------------------------
// operator handle
// ---------------------------------------------------------------------------

/// Opaque handle to an assembled nonlocal gradient operator.
pub struct NlcOperator {
    op: NonlocalGradientOp,
}

/// Assemble the nonlocal gradient operator for the truncated fractional
/// kernel on the given grid.
///
/// `s` is the fractional order in (0, 1); `a0`/`b0` the cutoff plateau
/// amplitude and relative width; pass `mass_target` as NaN to keep the
/// natural kernel mass, or a positive value to rescale the total mass.
///
/// # Safety
/// `grid` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nlc_operator_new(
    grid: *const NlcGrid,
    s: f64,
    a0: f64,
    b0: f64,
    profile: NlcProfile,
    mode: NlcKernelMode,
    mass_target: f64,
    out: *mut *mut NlcOperator,
) -> NlcStatus {
    guarded(|| {
        if grid.is_null() || out.is_null() {
            return invalid("null pointer argument");
        }
        let g = &(*grid).grid;
        let mut spec = KernelSpec {
            dim: g.dim,
            s,
            delta: g.delta,
            cutoff: CutoffSpec {
                a0,
                b0,
                profile: match profile {
                    NlcProfile::Quintic => Profile::Quintic,
                    NlcProfile::Septic => Profile::Septic,
                },
            },
            mode: match mode {
                NlcKernelMode::FixedHorizon => KernelMode::FixedHorizon,
                NlcKernelMode::RescaledFromUnit => KernelMode::RescaledFromUnit,
            },
            mass_target: None,
        };
        if mass_target.is_finite() {
            spec = match normalize_mass(&spec, mass_target) {
                Ok(sp) => sp,
                Err(e) => return fail(&e),
            };
        }
        match NonlocalGradientOp::assemble(g, &spec) {
            Ok(op) => {
                *out = Box::into_raw(Box::new(NlcOperator { op }));
                NlcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Total kernel mass represented by the operator's stencil.
///
/// # Safety
/// `op` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nlc_operator_mass(op: *const NlcOperator, out: *mut f64) -> NlcStatus {
    guarded(|| {
        if op.is_null() || out.is_null() {
            return invalid("null pointer argument");
        }
        *out = (*op).op.mass;
        NlcStatus::Ok
    })
}

/// Release an operator handle. Passing null is a no-op.
///
/// # Safety
/// `op` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn nlc_operator_free(op: *mut NlcOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

// ---------------------------------------------------------------------------
// solves
// ---------------------------------------------------------------------------

unsafe fn field_from_raw(grid: &Grid, data: *const f64) -> Field {
    let n = grid.num_nodes() * grid.dim;
    let mut f = Field::zeros(grid);
    f.data.copy_from_slice(slice::from_raw_parts(data, n));
    f
}

unsafe fn field_to_raw(f: &Field, out: *mut f64) {
    ptr::copy_nonoverlapping(f.data.as_ptr(), out, f.data.len());
}

/// Solve the state problem `div(|Du|^{p-2} Du) + g = 0` (weak form) with
/// homogeneous collar conditions.
///
/// `load` and `state_out` are node-major arrays of `num_nodes * dim`
/// doubles on the operator's grid.
///
/// # Safety
/// `op` must be a live handle; `load` and `state_out` must point to
/// `num_nodes * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn nlc_solve_state(
    op: *const NlcOperator,
    p: f64,
    load: *const f64,
    tol: f64,
    max_iter: usize,
    state_out: *mut f64,
    iterations_out: *mut usize,
    residual_out: *mut f64,
) -> NlcStatus {
    guarded(|| {
        if op.is_null() || load.is_null() || state_out.is_null() {
            return invalid("null pointer argument");
        }
        let op = &(*op).op;
        if !(p > 1.0) || !p.is_finite() {
            return invalid("p must be finite and greater than 1");
        }
        let params = EnergyParams::p_laplacian(p);
        let g = field_from_raw(op.grid(), load);
        match solve_state_auto(op, &params, &g, tol, max_iter) {
            Ok((u, report)) => {
                if !report.converged {
                    set_error("state solver did not reach the requested tolerance");
                    return NlcStatus::Solver;
                }
                field_to_raw(&u, state_out);
                if !iterations_out.is_null() {
                    *iterations_out = report.iterations;
                }
                if !residual_out.is_null() {
                    *residual_out = report.residual;
                }
                NlcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Solve the box-constrained tracking control problem
/// `min (1/p)||S(g) - target||^p + weight ||g||^{p'}` over
/// `lower <= g <= upper`, starting from `g = 0`.
///
/// `target`, `control_out` and `state_out` are node-major arrays of
/// `num_nodes * dim` doubles.
///
/// # Safety
/// `op` must be a live handle; array arguments must point to
/// `num_nodes * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn nlc_solve_control(
    op: *const NlcOperator,
    p: f64,
    target: *const f64,
    weight: f64,
    lower: f64,
    upper: f64,
    tol: f64,
    max_iter: usize,
    control_out: *mut f64,
    state_out: *mut f64,
    cost_out: *mut f64,
) -> NlcStatus {
    guarded(|| {
        if op.is_null() || target.is_null() || control_out.is_null() || state_out.is_null() {
            return invalid("null pointer argument");
        }
        let op = &(*op).op;
        if !(p > 1.0) || !p.is_finite() {
            return invalid("p must be finite and greater than 1");
        }
        let params = EnergyParams::p_laplacian(p);
        let problem = ControlProblem {
            op,
            params,
            target: field_from_raw(op.grid(), target),
            control_weight: weight,
            lower: Bound::Uniform(lower),
            upper: Bound::Uniform(upper),
            state_tol: (tol * 1e-3).max(1e-13),
            state_max_iter: 100_000,
        };
        let start = Field::zeros(op.grid());
        match solve_control(&problem, &start, tol, max_iter) {
            Ok((g, u, report)) => {
                if !report.converged {
                    set_error("control solver did not reach the requested tolerance");
                    return NlcStatus::Solver;
                }
                field_to_raw(&g, control_out);
                field_to_raw(&u, state_out);
                if !cost_out.is_null() {
                    *cost_out = report.cost;
                }
                NlcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Estimate the best constant in `||u||_p <= C ||Du||_p` over fields
/// vanishing on the collar.
///
/// # Safety
/// `op` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nlc_poincare_constant(
    op: *const NlcOperator,
    p: f64,
    tol: f64,
    seed: u64,
    out: *mut f64,
) -> NlcStatus {
    guarded(|| {
        if op.is_null() || out.is_null() {
            return invalid("null pointer argument");
        }
        match estimate_poincare(&(*op).op, p, tol, seed) {
            Ok(c) => {
                *out = c;
                NlcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

// ---------------------------------------------------------------------------
// config-driven experiments
// ---------------------------------------------------------------------------

/// Run a full experiment from a TOML config file, writing artifacts
/// (results.csv, summary.json, manifest.json) into `out_dir`. Mirrors the
/// `nlctl` command line.
///
/// `kind` is one of `check`, `solve-state`, `solve-control`, `sweep-s`,
/// `sweep-delta`, `poincare`, `operator-probe`.
///
/// # Safety
/// `kind`, `config_path` and `out_dir` must be valid NUL-terminated
/// strings.
#[no_mangle]
pub unsafe extern "C" fn nlc_run_experiment(
    kind: *const c_char,
    config_path: *const c_char,
    out_dir: *const c_char,
    seed: u64,
    threads: usize,
) -> NlcStatus {
    guarded(|| {
        if kind.is_null() || config_path.is_null() || out_dir.is_null() {
            return invalid("null pointer argument");
        }
        let kind = match CStr::from_ptr(kind).to_str() {
            Ok(s) => s,
            Err(_) => return invalid("kind is not valid UTF-8"),
        };
        let kind: Kind = match kind.parse() {
            Ok(k) => k,
            Err(e) => return fail(&e),
        };
        let config_path = match CStr::from_ptr(config_path).to_str() {
            Ok(s) => s,
            Err(_) => return invalid("config path is not valid UTF-8"),
        };
        let out_dir = match CStr::from_ptr(out_dir).to_str() {
            Ok(s) => s,
            Err(_) => return invalid("output path is not valid UTF-8"),
        };
        let cfg = match load_config(Path::new(config_path)) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let violations = validate(&cfg, kind);
        if !violations.is_empty() {
            let listing = violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            set_error(&format!("config violations: {listing}"));
            return NlcStatus::Domain;
        }
        match nonlocal_control::runner::run(kind, &cfg, Path::new(out_dir), seed, threads.max(1))
        {
            Ok(_) => NlcStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}
