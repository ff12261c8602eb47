//! Batch runner: executes one experiment kind from a validated config and
//! writes the artifact set (`results.csv`, `summary.json`, `manifest.json`,
//! optional `fields/*.bin`).

use std::io::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Kind};
use crate::control::{solve_control, ControlProblem};
use crate::energy::Density;
use crate::grid::{apply_collar_zero, lp_norm, Field, Grid, Region};
use crate::kernel::{kernel_mass, normalize_mass};
use crate::localization::{
    decreasing_trend, gradient_disagreement, log_log_slope, operator_localization_probe,
    poincare_ladder, sweep, SweepProblem, SweepVariable,
};
use crate::operators::{GradOp, NonlocalGradientOp};
use crate::state::{multistart_state, solve_state_auto};
use crate::{Error, Result};

/// Format a float with 17 significant digits, enough to round-trip f64.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Serialize a field: one line of JSON metadata, then the raw values as
/// little-endian f64 in node-major, component-minor order.
pub fn write_field(path: &Path, grid: &Grid, field: &Field) -> Result<()> {
    let header = json!({
        "dim": grid.dim,
        "shape": grid.shape[..grid.dim].to_vec(),
        "components": field.dim,
        "count": field.data.len(),
        "box_min": grid.box_min[..grid.dim].to_vec(),
        "box_max": grid.box_max[..grid.dim].to_vec(),
        "h": grid.h,
        "delta": grid.delta,
    });
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    let mut bytes = Vec::with_capacity(field.data.len() * 8);
    for v in &field.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Read back a serialized field; returns the header and the values.
pub fn read_field(path: &Path) -> Result<(Value, Vec<f64>)> {
    let raw = std::fs::read(path)?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Other("field file has no header line".into()))?;
    let header: Value = serde_json::from_slice(&raw[..newline])
        .map_err(|e| Error::Other(format!("field header: {e}")))?;
    let payload = &raw[newline + 1..];
    if payload.len() % 8 != 0 {
        return Err(Error::Other("field payload is not a multiple of 8 bytes".into()));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

fn fields_dir(out_dir: &Path) -> Result<std::path::PathBuf> {
    let dir = out_dir.join("fields");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn sweep_problem<'a>(
    cfg: &ExperimentConfig,
    variable: SweepVariable,
    target: &'a dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<SweepProblem<'a>> {
    Ok(SweepProblem {
        variable,
        values: cfg.sweep.values.clone(),
        box_min: cfg.grid.box_min.clone(),
        box_max: cfg.grid.box_max.clone(),
        h: cfg.grid.h,
        fixed_s: cfg.kernel.s,
        fixed_delta: cfg.grid.delta,
        cutoff: cfg.cutoff()?,
        params: cfg.energy_params()?,
        target,
        control_weight: cfg.control.weight,
        lower: match cfg.bounds().0 {
            crate::control::Bound::Uniform(v) => v,
            _ => {
                return Err(Error::Config(
                    "control.lower: sweeps support uniform bounds only".into(),
                ))
            }
        },
        upper: match cfg.bounds().1 {
            crate::control::Bound::Uniform(v) => v,
            _ => {
                return Err(Error::Config(
                    "control.upper: sweeps support uniform bounds only".into(),
                ))
            }
        },
        r_list: cfg.control.r_list.clone(),
        state_tol: cfg.solver.state_tol,
        state_max_iter: cfg.solver.state_max_iter,
        control_tol: cfg.solver.control_tol,
        control_max_iter: cfg.solver.control_max_iter,
    })
}

fn ladder_variable(cfg: &ExperimentConfig, kind: Kind) -> SweepVariable {
    match kind {
        Kind::SweepS => SweepVariable::S,
        Kind::SweepDelta => SweepVariable::Delta,
        _ => {
            if cfg.sweep.variable == "delta" {
                SweepVariable::Delta
            } else {
                SweepVariable::S
            }
        }
    }
}

fn run_solve_state(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<Value> {
    let grid = cfg.build_grid()?;
    let spec = cfg.kernel_spec()?;
    let op = NonlocalGradientOp::assemble(&grid, &spec)?;
    let params = cfg.energy_params()?;
    let load_fn = cfg.field_fn(&cfg.state.load);
    let load = Field::from_fn(&grid, |x| load_fn(x));
    let nonconvex = matches!(params.density, Density::DoubleWell { .. });
    let (u, report) = if nonconvex || cfg.solver.multistart > 1 {
        multistart_state(
            &op,
            &params,
            &load,
            cfg.solver.state_tol,
            cfg.solver.state_max_iter,
            cfg.solver.multistart.max(2),
            seed,
        )?
    } else {
        solve_state_auto(&op, &params, &load, cfg.solver.state_tol, cfg.solver.state_max_iter)?
    };

    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .map(|(i, e, r)| vec![i.to_string(), fmt17(*e), fmt17(*r)])
        .collect();
    write_csv(&out_dir.join("results.csv"), &["iter", "energy", "residual"], &rows)?;
    if cfg.output.write_fields {
        let dir = fields_dir(out_dir)?;
        write_field(&dir.join("state.bin"), &grid, &u)?;
        write_field(&dir.join("load.bin"), &grid, &load)?;
    }
    if !report.converged {
        return Err(Error::solver(format!(
            "state solve stopped at residual {:.3e} after {} iterations",
            report.residual, report.iterations
        )));
    }
    Ok(json!({
        "solver": report.solver,
        "iterations": report.iterations,
        "residual": report.residual,
        "energy": report.energy,
        "converged": report.converged,
        "state_l2": lp_norm(&grid, &u, 2.0, Region::Omega),
    }))
}

fn run_solve_control(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Value> {
    let grid = cfg.build_grid()?;
    let spec = cfg.kernel_spec()?;
    let op = NonlocalGradientOp::assemble(&grid, &spec)?;
    let target_fn = cfg.field_fn(&cfg.control.target);
    let target = Field::from_fn(&grid, |x| target_fn(x));
    let (lower, upper) = cfg.bounds();
    let problem = ControlProblem {
        op: &op,
        params: cfg.energy_params()?,
        target: target.clone(),
        control_weight: cfg.control.weight,
        lower,
        upper,
        state_tol: cfg.solver.state_tol,
        state_max_iter: cfg.solver.state_max_iter,
    };
    let start = Field::zeros(&grid);
    let (g, u, report) =
        solve_control(&problem, &start, cfg.solver.control_tol, cfg.solver.control_max_iter)?;

    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .map(|(i, c, s, t)| vec![i.to_string(), fmt17(*c), fmt17(*s), fmt17(*t)])
        .collect();
    write_csv(
        &out_dir.join("results.csv"),
        &["iter", "cost", "stationarity", "step"],
        &rows,
    )?;
    if cfg.output.write_fields {
        let dir = fields_dir(out_dir)?;
        write_field(&dir.join("control.bin"), &grid, &g)?;
        write_field(&dir.join("state.bin"), &grid, &u)?;
        write_field(&dir.join("target.bin"), &grid, &target)?;
    }
    if !report.converged {
        return Err(Error::solver(format!(
            "control solve stopped at stationarity {:.3e} after {} iterations",
            report.stationarity, report.iterations
        )));
    }
    Ok(json!({
        "iterations": report.iterations,
        "cost": report.cost,
        "stationarity": report.stationarity,
        "converged": report.converged,
        "control_l2": lp_norm(&grid, &g, 2.0, Region::Omega),
    }))
}

fn trend_json(name: &str, values: &[f64]) -> Value {
    let first = values.first().copied().unwrap_or(0.0);
    let last = values.last().copied().unwrap_or(0.0);
    json!({
        "metric": name,
        "first": first,
        "last": last,
        "halved": last <= 0.5 * first,
        "near_monotone": decreasing_trend(values, 0.05),
    })
}

fn run_sweep(cfg: &ExperimentConfig, kind: Kind, out_dir: &Path) -> Result<Value> {
    let target = cfg.field_fn(&cfg.control.target);
    let problem = sweep_problem(cfg, ladder_variable(cfg, kind), &*target)?;
    let records = sweep(&problem)?;

    let mut header: Vec<String> = [
        "value", "s", "delta", "h", "state_gap", "grad_gap", "control_gap",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for r in &cfg.control.r_list {
        header.push(format!("control_gap_r{r}"));
    }
    header.push("cost_gap".into());
    header.push("energy_gap".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut row = vec![
                fmt17(r.value),
                fmt17(r.s),
                fmt17(r.delta),
                fmt17(r.h),
                fmt17(r.state_gap),
                fmt17(r.grad_gap),
                fmt17(r.control_gap),
            ];
            for v in &r.control_gap_r {
                row.push(fmt17(*v));
            }
            row.push(fmt17(r.cost_gap));
            row.push(fmt17(r.energy_gap));
            row
        })
        .collect();
    write_csv(&out_dir.join("results.csv"), &header_refs, &rows)?;

    // plot-ready two-column files per metric
    for (name, pick) in [
        ("state_gap", 0usize),
        ("grad_gap", 1),
        ("control_gap", 2),
        ("cost_gap", 3),
        ("energy_gap", 4),
    ] {
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                let v = match pick {
                    0 => r.state_gap,
                    1 => r.grad_gap,
                    2 => r.control_gap,
                    3 => r.cost_gap,
                    _ => r.energy_gap,
                };
                vec![fmt17(r.value), fmt17(v)]
            })
            .collect();
        write_csv(&out_dir.join(format!("{name}.csv")), &["value", name], &rows)?;
    }

    let state: Vec<f64> = records.iter().map(|r| r.state_gap).collect();
    let grad: Vec<f64> = records.iter().map(|r| r.grad_gap).collect();
    let control: Vec<f64> = records.iter().map(|r| r.control_gap).collect();
    let cost: Vec<f64> = records.iter().map(|r| r.cost_gap).collect();
    let energy: Vec<f64> = records.iter().map(|r| r.energy_gap).collect();
    let mut trends = vec![
        trend_json("state_gap", &state),
        trend_json("grad_gap", &grad),
        trend_json("control_gap", &control),
        trend_json("cost_gap", &cost),
        trend_json("energy_gap", &energy),
    ];
    for (i, r) in cfg.control.r_list.iter().enumerate() {
        let vals: Vec<f64> = records.iter().map(|rec| rec.control_gap_r[i]).collect();
        trends.push(trend_json(&format!("control_gap_r{r}"), &vals));
    }
    Ok(json!({
        "rungs": records.len(),
        "trends": trends,
    }))
}

fn run_poincare(cfg: &ExperimentConfig, kind: Kind, out_dir: &Path, seed: u64) -> Result<Value> {
    let target = cfg.field_fn(&crate::config::FieldSpec::Zero);
    let problem = sweep_problem(cfg, ladder_variable(cfg, kind), &*target)?;
    let ladder = poincare_ladder(&problem, seed)?;
    let rows: Vec<Vec<String>> = ladder
        .iter()
        .map(|(v, c)| vec![fmt17(*v), fmt17(*c)])
        .collect();
    write_csv(&out_dir.join("results.csv"), &["value", "constant"], &rows)?;
    let max = ladder.iter().map(|x| x.1).fold(f64::MIN, f64::max);
    let min = ladder.iter().map(|x| x.1).fold(f64::MAX, f64::min);
    Ok(json!({
        "constants": ladder.iter().map(|x| x.1).collect::<Vec<_>>(),
        "max_over_min": max / min,
        "bounded_by_5": max / min <= 5.0,
    }))
}

fn run_operator_probe(cfg: &ExperimentConfig, kind: Kind, out_dir: &Path) -> Result<Value> {
    let target = cfg.field_fn(&cfg.control.target);
    let problem = sweep_problem(cfg, ladder_variable(cfg, kind), &*target)?;
    let field = cfg.field_fn(&cfg.probe.field);
    let records = operator_localization_probe(&problem, &*field, cfg.energy.p)?;
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![fmt17(r.value), fmt17(r.s), fmt17(r.delta), fmt17(r.error)])
        .collect();
    write_csv(&out_dir.join("results.csv"), &["value", "s", "delta", "error"], &rows)?;
    let errors: Vec<f64> = records.iter().map(|r| r.error).collect();
    let strictly_decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    let slope = if problem.variable == SweepVariable::Delta && errors.len() >= 2 {
        let deltas: Vec<f64> = records.iter().map(|r| r.delta).collect();
        Some(log_log_slope(&deltas, &errors))
    } else {
        None
    };
    Ok(json!({
        "errors": errors,
        "strictly_decreasing": strictly_decreasing,
        "loglog_slope": slope,
    }))
}

fn run_check(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<Value> {
    let grid = cfg.build_grid()?;
    let spec = cfg.kernel_spec()?;
    let op = NonlocalGradientOp::assemble(&grid, &spec)?;
    let params = cfg.energy_params()?;
    let dim = grid.dim;
    let mut results: Vec<(String, bool, String)> = Vec::new();

    // deterministic pseudo-random fields for the probes
    let mut state = seed.wrapping_add(0x9e3779b97f4a7c15);
    let mut rng = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };

    // integration by parts
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let u = Field::from_fn(&grid, |_| (0..dim).map(|_| rng()).collect());
        let mut phi = crate::grid::MatrixField::zeros(dim, op.num_sites());
        for v in phi.data.iter_mut() {
            *v = rng();
        }
        let du = op.gradient(&u);
        let mut dt = Field::zeros(&grid);
        op.apply_transpose(&phi, &mut dt);
        let lhs: f64 = du.data.iter().zip(&phi.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.data.iter().zip(&dt.data).map(|(a, b)| a * b).sum();
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    results.push((
        "integration_by_parts".into(),
        worst < 1e-12,
        format!("max relative defect {worst:.3e}"),
    ));

    // constant annihilation
    let gc = op.gradient(&Field::constant(&grid, &vec![1.0; dim]));
    let cmax = gc.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    results.push((
        "constant_annihilation".into(),
        cmax < 1e-12,
        format!("max gradient entry {cmax:.3e}"),
    ));

    // affine reproduction with a mass-normalized copy of the kernel
    let nspec = normalize_mass(&spec, dim as f64)?;
    let nop = NonlocalGradientOp::assemble(&grid, &nspec)?;
    let u_aff = Field::from_fn(&grid, |x| (0..dim).map(|c| x[c % x.len()] * 2.0 + 0.5).collect());
    let ga = nop.gradient(&u_aff);
    let mut amax: f64 = 0.0;
    for s in 0..ga.num_sites() {
        let m = ga.get(s);
        for c in 0..dim {
            for a in 0..dim {
                let expect = if a == c { 2.0 } else { 0.0 };
                amax = amax.max((m[c * dim + a] - expect).abs());
            }
        }
    }
    results.push((
        "affine_reproduction".into(),
        amax < 1e-6,
        format!("max entry error {amax:.3e}"),
    ));

    // kernel mass: positive, and invariant under amplitude linearity
    let mass = kernel_mass(&spec)?;
    let mut doubled = spec.clone();
    doubled.cutoff.a0 *= 2.0;
    let mass2 = kernel_mass(&doubled)?;
    let lin = (mass2 - 2.0 * mass).abs() / mass;
    results.push((
        "kernel_mass_linearity".into(),
        mass > 0.0 && lin < 1e-10,
        format!("mass {mass:.6e}, linearity defect {lin:.3e}"),
    ));

    // solver energy descent on the configured problem
    let load_fn = cfg.field_fn(&cfg.state.load);
    let load = Field::from_fn(&grid, |x| load_fn(x));
    let (u, rep) = multistart_state(
        &op,
        &params,
        &load,
        cfg.solver.state_tol.max(1e-9),
        cfg.solver.state_max_iter,
        cfg.solver.multistart,
        seed,
    )?;
    let descent = rep.history.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
    results.push((
        "energy_descent".into(),
        descent,
        format!("{} iterations, residual {:.3e}", rep.iterations, rep.residual),
    ));
    let truncated = apply_collar_zero(&grid, &u);
    let pinned = truncated.data == u.data;
    results.push((
        "collar_pinned".into(),
        pinned,
        "solution vanishes outside the free set".into(),
    ));

    // gradient localization sanity on a smooth field (free-set comparison)
    let smooth = Field::from_fn(&grid, |x| {
        (0..dim)
            .map(|_| (std::f64::consts::PI * x[0]).sin())
            .collect()
    });
    let gap = gradient_disagreement(&nop, &smooth, &smooth, 2.0, Region::Free);
    results.push((
        "gradient_probe_finite".into(),
        gap.is_finite(),
        format!("free-set gap {gap:.6e}"),
    ));

    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|(n, ok, d)| vec![n.clone(), (*ok as u8).to_string(), d.clone()])
        .collect();
    write_csv(&out_dir.join("results.csv"), &["check", "passed", "detail"], &rows)?;
    let all = results.iter().all(|r| r.1);
    let summary = json!({
        "checks": results.iter().map(|(n, ok, d)| json!({
            "name": n, "passed": ok, "detail": d,
        })).collect::<Vec<_>>(),
        "all_passed": all,
    });
    if !all {
        let failed: Vec<&str> = results
            .iter()
            .filter(|r| !r.1)
            .map(|r| r.0.as_str())
            .collect();
        return Err(Error::solver(format!("checks failed: {}", failed.join(", "))));
    }
    Ok(summary)
}

/// Execute one experiment. Writes artifacts into `out_dir` and returns the
/// summary document (also written to `summary.json`). The manifest echoes
/// the full config so a run can be reproduced from its output directory.
pub fn run(
    kind: Kind,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
    threads: usize,
) -> Result<Value> {
    std::fs::create_dir_all(out_dir)?;
    let started = SystemTime::now();
    let result = match kind {
        Kind::SolveState => run_solve_state(cfg, out_dir, seed),
        Kind::SolveControl => run_solve_control(cfg, out_dir),
        Kind::SweepS | Kind::SweepDelta => run_sweep(cfg, kind, out_dir),
        Kind::Poincare => run_poincare(cfg, kind, out_dir, seed),
        Kind::OperatorProbe => run_operator_probe(cfg, kind, out_dir),
        Kind::Check => run_check(cfg, out_dir, seed),
    };
    let elapsed = started.elapsed().unwrap_or_default().as_secs_f64();

    // manifest is written for failures too, to aid reproduction
    let manifest = json!({
        "kind": kind.as_str(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "threads": threads,
        "started_unix": started
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_secs(),
        "elapsed_seconds": elapsed,
        "config": serde_json::to_value(cfg).map_err(|e| Error::Other(e.to_string()))?,
    });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Other(e.to_string()))?,
    )?;

    let summary = result?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Other(e.to_string()))?,
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    fn base_config() -> ExperimentConfig {
        toml::from_str(
            r#"
            [grid]
            box_min = [0.0]
            box_max = [1.0]
            h = 0.0625
            delta = 0.25

            [kernel]
            s = 0.5

            [state]
            load = { type = "sine", amplitude = 1.0 }
        "#,
        )
        .unwrap()
    }

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = build_grid(&[0.0, 0.0], &[1.0, 0.5], 0.125, 0.25).unwrap();
        let f = Field::from_fn(&grid, |x| vec![x[0] + 2.0 * x[1], x[0] * x[1]]);
        let path = dir.path().join("f.bin");
        write_field(&path, &grid, &f).unwrap();
        let (header, values) = read_field(&path).unwrap();
        assert_eq!(header["dim"], 2);
        assert_eq!(header["components"], 2);
        assert_eq!(values, f.data);
    }

    #[test]
    fn solve_state_run_produces_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config();
        cfg.output.write_fields = true;
        let summary = run(Kind::SolveState, &cfg, dir.path(), 0, 1).unwrap();
        assert_eq!(summary["converged"], true);
        assert!(dir.path().join("results.csv").exists());
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("fields/state.bin").exists());
        // manifest echoes enough to reproduce
        let manifest: Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["config"]["grid"]["h"], 0.0625);
        assert_eq!(manifest["kind"], "solve-state");
    }

    #[test]
    fn check_run_passes_on_sane_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config();
        let summary = run(Kind::Check, &cfg, dir.path(), 7, 1).unwrap();
        assert_eq!(summary["all_passed"], true);
    }

    #[test]
    fn identical_runs_identical_csv() {
        let cfg = base_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run(Kind::SolveState, &cfg, d1.path(), 3, 1).unwrap();
        run(Kind::SolveState, &cfg, d2.path(), 3, 1).unwrap();
        let a = std::fs::read_to_string(d1.path().join("results.csv")).unwrap();
        let b = std::fs::read_to_string(d2.path().join("results.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seventeen_digit_format_round_trips() {
        for v in [1.0 / 3.0, f64::MIN_POSITIVE, 12345.678901234567, -0.1] {
            let s = fmt17(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v, back, "{s}");
        }
    }
}
