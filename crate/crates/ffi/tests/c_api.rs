//! Exercises the C ABI through the exported symbols, the way a foreign
//! binding would: handles, error codes, array outputs, the experiment
//! entry point, and the generated header.

use std::ffi::{CStr, CString};
use std::ptr;

use nonlocal_control_ffi::*;

fn grid_1d(h: f64, delta: f64) -> *mut NlcGrid {
    let lo = [0.0];
    let hi = [1.0];
    let mut grid: *mut NlcGrid = ptr::null_mut();
    let code = unsafe { nlc_grid_new(1, lo.as_ptr(), hi.as_ptr(), h, delta, &mut grid) };
    assert_eq!(code, NlcStatus::Ok);
    assert!(!grid.is_null());
    grid
}

fn operator_for(grid: *const NlcGrid, s: f64, mass_target: f64) -> *mut NlcOperator {
    let mut op: *mut NlcOperator = ptr::null_mut();
    let code = unsafe {
        nlc_operator_new(
            grid,
            s,
            1.0,
            0.5,
            NlcProfile::Quintic,
            NlcKernelMode::FixedHorizon,
            mass_target,
            &mut op,
        )
    };
    assert_eq!(code, NlcStatus::Ok);
    op
}

#[test]
fn version_and_error_strings_are_c_strings() {
    let v = unsafe { CStr::from_ptr(nlc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    // before any failure the message is empty
    let e = unsafe { CStr::from_ptr(nlc_last_error()) };
    assert!(e.to_str().is_ok());
}

#[test]
fn invalid_arguments_are_reported_not_crashed() {
    let mut grid: *mut NlcGrid = ptr::null_mut();
    let lo = [0.0];
    let hi = [1.0];
    // null pointer
    let code = unsafe { nlc_grid_new(1, ptr::null(), hi.as_ptr(), 0.1, 0.2, &mut grid) };
    assert_eq!(code, NlcStatus::InvalidArgument);
    // bad dimension
    let code = unsafe { nlc_grid_new(3, lo.as_ptr(), hi.as_ptr(), 0.1, 0.2, &mut grid) };
    assert_eq!(code, NlcStatus::InvalidArgument);
    // horizon not an integral multiple of the spacing
    let code = unsafe { nlc_grid_new(1, lo.as_ptr(), hi.as_ptr(), 0.125, 0.3, &mut grid) };
    assert_eq!(code, NlcStatus::Domain);
    let msg = unsafe { CStr::from_ptr(nlc_last_error()) };
    assert!(!msg.to_bytes().is_empty());
}

#[test]
fn grid_round_trip() {
    let grid = grid_1d(0.0625, 0.25);
    let mut n = 0usize;
    assert_eq!(unsafe { nlc_grid_num_nodes(grid, &mut n) }, NlcStatus::Ok);
    // box nodes plus a collar of delta/h on both sides
    assert_eq!(n, 17 + 2 * 4);
    let mut x = [f64::NAN];
    assert_eq!(
        unsafe { nlc_grid_node_position(grid, 0, x.as_mut_ptr()) },
        NlcStatus::Ok
    );
    assert!((x[0] + 0.25).abs() < 1e-15);
    assert_eq!(
        unsafe { nlc_grid_node_position(grid, n, x.as_mut_ptr()) },
        NlcStatus::InvalidArgument
    );
    unsafe { nlc_grid_free(grid) };
    unsafe { nlc_grid_free(ptr::null_mut()) }; // null is a no-op
}

#[test]
fn operator_mass_normalization() {
    let grid = grid_1d(1.0 / 32.0, 0.25);
    let op = operator_for(grid, 0.5, 1.0);
    let mut mass = 0.0;
    assert_eq!(unsafe { nlc_operator_mass(op, &mut mass) }, NlcStatus::Ok);
    assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
    unsafe { nlc_operator_free(op) };
    unsafe { nlc_grid_free(grid) };
}

#[test]
fn state_solve_through_the_boundary() {
    let grid = grid_1d(1.0 / 32.0, 0.25);
    let op = operator_for(grid, 0.5, f64::NAN);
    let mut n = 0usize;
    unsafe { nlc_grid_num_nodes(grid, &mut n) };

    let mut load = vec![0.0; n];
    for i in 0..n {
        let mut x = [0.0];
        unsafe { nlc_grid_node_position(grid, i, x.as_mut_ptr()) };
        load[i] = (std::f64::consts::PI * x[0]).sin();
    }
    let mut state = vec![f64::NAN; n];
    let mut iters = 0usize;
    let mut residual = f64::NAN;
    let code = unsafe {
        nlc_solve_state(
            op,
            2.0,
            load.as_ptr(),
            1e-12,
            50_000,
            state.as_mut_ptr(),
            &mut iters,
            &mut residual,
        )
    };
    assert_eq!(code, NlcStatus::Ok);
    assert!(iters > 0);
    assert!(residual <= 1e-12);
    assert!(state.iter().all(|v| v.is_finite()));
    let max = state.iter().cloned().fold(f64::MIN, f64::max);
    assert!(max > 0.0, "state should respond to a positive load");

    // p out of range surfaces as an argument error
    let code = unsafe {
        nlc_solve_state(
            op,
            0.5,
            load.as_ptr(),
            1e-12,
            100,
            state.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(code, NlcStatus::InvalidArgument);

    unsafe { nlc_operator_free(op) };
    unsafe { nlc_grid_free(grid) };
}

#[test]
fn control_solve_through_the_boundary() {
    let grid = grid_1d(1.0 / 16.0, 0.25);
    let op = operator_for(grid, 0.5, f64::NAN);
    let mut n = 0usize;
    unsafe { nlc_grid_num_nodes(grid, &mut n) };

    let mut target = vec![0.0; n];
    for i in 0..n {
        let mut x = [0.0];
        unsafe { nlc_grid_node_position(grid, i, x.as_mut_ptr()) };
        target[i] = 0.1 * (std::f64::consts::PI * x[0]).sin();
    }
    let mut control = vec![f64::NAN; n];
    let mut state = vec![f64::NAN; n];
    let mut cost = f64::NAN;
    let code = unsafe {
        nlc_solve_control(
            op,
            2.0,
            target.as_ptr(),
            1e-3,
            -10.0,
            10.0,
            1e-6,
            5000,
            control.as_mut_ptr(),
            state.as_mut_ptr(),
            &mut cost,
        )
    };
    assert_eq!(code, NlcStatus::Ok);
    assert!(cost.is_finite() && cost >= 0.0);
    assert!(control.iter().all(|v| v.is_finite() && *v >= -10.0 && *v <= 10.0));

    unsafe { nlc_operator_free(op) };
    unsafe { nlc_grid_free(grid) };
}

#[test]
fn poincare_constant_through_the_boundary() {
    let grid = grid_1d(1.0 / 64.0, 0.25);
    let op = operator_for(grid, 0.5, f64::NAN);
    let mut c = f64::NAN;
    let code = unsafe { nlc_poincare_constant(op, 2.0, 1e-10, 7, &mut c) };
    assert_eq!(code, NlcStatus::Ok);
    // frozen dense-eigensolve regression value for this instance
    assert!((c - 3.41764873141606351).abs() < 1e-6 * c, "constant {c}");
    unsafe { nlc_operator_free(op) };
    unsafe { nlc_grid_free(grid) };
}

#[test]
fn experiment_runner_through_the_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("check.toml");
    std::fs::write(
        &cfg_path,
        r#"
        [grid]
        box_min = [0.0]
        box_max = [1.0]
        h = 0.03125
        delta = 0.25

        [kernel]
        s = 0.5
        "#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let kind = CString::new("check").unwrap();
    let cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let out_c = CString::new(out.to_str().unwrap()).unwrap();
    let code =
        unsafe { nlc_run_experiment(kind.as_ptr(), cfg.as_ptr(), out_c.as_ptr(), 42, 1) };
    assert_eq!(code, NlcStatus::Ok);
    assert!(out.join("results.csv").exists());
    assert!(out.join("summary.json").exists());
    assert!(out.join("manifest.json").exists());

    // unknown kind is a domain error with a message
    let bad = CString::new("frobnicate").unwrap();
    let code = unsafe { nlc_run_experiment(bad.as_ptr(), cfg.as_ptr(), out_c.as_ptr(), 42, 1) };
    assert_eq!(code, NlcStatus::Domain);
}

#[test]
fn generated_header_covers_the_api() {
    let header = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/nonlocal_control.h"
    ))
    .expect("generated header missing");
    for symbol in [
        "nlc_last_error",
        "nlc_version",
        "nlc_grid_new",
        "nlc_grid_num_nodes",
        "nlc_grid_node_position",
        "nlc_grid_free",
        "nlc_operator_new",
        "nlc_operator_mass",
        "nlc_operator_free",
        "nlc_solve_state",
        "nlc_solve_control",
        "nlc_poincare_constant",
        "nlc_run_experiment",
        "NlcStatus",
        "NlcProfile",
        "NlcKernelMode",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}
