//! Localization diagnostics: Poincare-constant estimation, cross-grid
//! field transfer, gradient disagreement against the local reference, and
//! trend statistics for the ladder experiments (fractional order toward 1,
//! horizon toward 0).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::grid::{lp_norm, Field, Grid, Region};
use crate::operators::{GradOp, LocalCentralOp, NonlocalGradientOp};
use crate::state::DofMap;
use crate::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Apply `D^T D` on the free dofs (no quadrature weights; they cancel in
/// the Rayleigh quotient).
fn gram_apply(op: &dyn GradOp, dofs: &DofMap, x: &[f64]) -> Vec<f64> {
    let grid = op.grid();
    let u = dofs.scatter(x, grid);
    let grad = op.gradient(&u);
    let mut out = Field::zeros(grid);
    op.apply_transpose(&grad, &mut out);
    dofs.gather(&out)
}

fn cg(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let bnorm = norm(b).max(f64::MIN_POSITIVE);
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        if rr.sqrt() / bnorm <= tol {
            return Ok(x);
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::solver("gram operator not positive definite"));
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr.sqrt() / bnorm <= tol * 10.0 {
        Ok(x)
    } else {
        Err(Error::solver("inner CG for the gram system stalled"))
    }
}

/// Best constant in `||u||_{L^p} <= C ||Du||_{L^p}` over fields supported
/// on the free dofs.
///
/// For `p = 2` this is `1/sqrt(lambda_min(D^T D))`, computed by inverse
/// power iteration with CG inner solves. For other `p` a projected ascent
/// on the norm quotient from several random starts gives a sharp lower
/// bound, which is reported.
pub fn estimate_poincare(op: &dyn GradOp, p: f64, tol: f64, seed: u64) -> Result<f64> {
    let grid = op.grid();
    let dofs = DofMap::new(op);
    if dofs.is_empty() {
        return Err(Error::solver("no free degrees of freedom"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if (p - 2.0).abs() < 1e-14 {
        let mut x: Vec<f64> = (0..dofs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nx = norm(&x);
        for v in x.iter_mut() {
            *v /= nx;
        }
        let mut lambda_old = f64::INFINITY;
        for _ in 0..200 {
            let y = cg(|v| gram_apply(op, &dofs, v), &x, (tol * 1e-2).max(1e-14), 50_000)?;
            let ny = norm(&y);
            for i in 0..x.len() {
                x[i] = y[i] / ny;
            }
            let kx = gram_apply(op, &dofs, &x);
            let lambda = dot(&x, &kx);
            if (lambda - lambda_old).abs() <= tol * lambda.abs() {
                return Ok(1.0 / lambda.sqrt());
            }
            lambda_old = lambda;
        }
        Err(Error::solver("inverse power iteration did not settle"))
    } else {
        // ascent of log ||u||_p - log ||Du||_p with renormalization
        let mut best: f64 = 0.0;
        for _ in 0..10 {
            let x: Vec<f64> = (0..dofs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut u = dofs.scatter(&x, grid);
            let q = quotient_and_best(op, &dofs, &mut u, p, 300, tol)?;
            best = best.max(q);
        }
        Ok(best)
    }
}

fn quotient(op: &dyn GradOp, u: &Field, p: f64) -> f64 {
    let grid = op.grid();
    let nu = lp_norm(grid, u, p, Region::All);
    let grad = op.gradient(u);
    let ng = crate::grid::lp_norm_matrix(&grad, p, op.site_weight(), None);
    if ng == 0.0 {
        0.0
    } else {
        nu / ng
    }
}

fn quotient_and_best(
    op: &dyn GradOp,
    dofs: &DofMap,
    u: &mut Field,
    p: f64,
    iters: usize,
    tol: f64,
) -> Result<f64> {
    let grid = op.grid();
    let w = grid.node_weight();
    let mut best = quotient(op, u, p);
    let mut step = 0.5;
    for _ in 0..iters {
        let nu = lp_norm(grid, u, p, Region::All).max(1e-300);
        let grad = op.gradient(u);
        let ng = crate::grid::lp_norm_matrix(&grad, p, op.site_weight(), None).max(1e-300);
        // gradient of log ||u||_p
        let dim = u.dim;
        let mut g_num = Field::zeros(grid);
        for node in 0..grid.num_nodes() {
            for c in 0..dim {
                let v = u.data[node * dim + c];
                g_num.data[node * dim + c] =
                    w * v.abs().powf(p - 2.0).min(1e12) * v / nu.powf(p);
            }
        }
        // gradient of log ||Du||_p
        let mut phi = crate::grid::MatrixField::zeros(dim, grad.num_sites());
        for s in 0..grad.num_sites() {
            let a = grad.get(s);
            let n2: f64 = a.iter().map(|v| v * v).sum();
            let scale = if n2 > 0.0 { n2.sqrt().powf(p - 2.0) } else { 0.0 };
            for i in 0..dim * dim {
                phi.get_mut(s)[i] = scale * a[i];
            }
        }
        let mut g_den = Field::zeros(grid);
        op.apply_transpose(&phi, &mut g_den);
        g_den.scale(w / ng.powf(p));

        let mut ascent = dofs.gather(&g_num);
        let den = dofs.gather(&g_den);
        for i in 0..ascent.len() {
            ascent[i] -= den[i];
        }
        let mut x = dofs.gather(u);
        let gn = norm(&ascent).max(1e-300);
        for i in 0..x.len() {
            x[i] += step * ascent[i] / gn;
        }
        let trial = dofs.scatter(&x, grid);
        let q = quotient(op, &trial, p);
        if q > best {
            best = q;
            *u = trial;
        } else {
            step *= 0.5;
            if step < tol {
                break;
            }
        }
    }
    Ok(best)
}

/// Resample a field onto another grid with the same spacing by matching
/// node positions on the shared lattice. Destination nodes with no source
/// counterpart are zero. The grids may have different boxes or collars as
/// long as their lattices align (boxes and horizons are multiples of `h`).
pub fn transfer_by_position(from: &Grid, f: &Field, to: &Grid) -> Field {
    assert!((from.h - to.h).abs() < 1e-14, "grids must share the spacing");
    assert_eq!(from.dim, to.dim);
    let dim = from.dim;
    let mut out = Field::zeros(to);
    for tnode in 0..to.num_nodes() {
        let p = to.position(tnode);
        let mut fc = [0usize; 2];
        let mut ok = true;
        for a in 0..dim {
            let origin = from.box_min[a] - from.delta;
            let idx = ((p[a] - origin) / from.h).round();
            if idx < -0.5 || idx as usize >= from.shape[a] {
                ok = false;
                break;
            }
            fc[a] = idx as usize;
        }
        if !ok {
            continue;
        }
        let fnode = from.index(fc[0], fc[1]);
        for comp in 0..dim {
            out.data[tnode * dim + comp] = f.data[fnode * dim + comp];
        }
    }
    out
}

/// `||a - b||_{L^p}` over a region of the grid.
pub fn field_gap(grid: &Grid, a: &Field, b: &Field, p: f64, region: Region) -> f64 {
    let mut diff = a.clone();
    diff.axpy(-1.0, b);
    lp_norm(grid, &diff, p, region)
}

/// `L^p` disagreement between the nonlocal gradient of `u` and the
/// centered-difference gradient of `v`, over sites whose node lies in
/// `region`.
pub fn gradient_disagreement(
    op: &NonlocalGradientOp,
    u: &Field,
    v: &Field,
    p: f64,
    region: Region,
) -> f64 {
    let grid = op.grid();
    let local = LocalCentralOp::new(grid);
    let gn = op.gradient(u);
    let gl = local.gradient(v);
    // match sites by node
    let mut local_site_of_node = vec![usize::MAX; grid.num_nodes()];
    for (s, &node) in local.sites().iter().enumerate() {
        local_site_of_node[node] = s;
    }
    let w = op.site_weight();
    let dim = grid.dim;
    let m = dim * dim;
    let mut sum = 0.0;
    let mut maxv: f64 = 0.0;
    for (s, &node) in op.sites().iter().enumerate() {
        if !grid.in_region(node, region) {
            continue;
        }
        let ls = local_site_of_node[node];
        if ls == usize::MAX {
            continue;
        }
        let a = gn.get(s);
        let b = gl.get(ls);
        let mut d2 = 0.0;
        for i in 0..m {
            let d = a[i] - b[i];
            d2 += d * d;
        }
        if p.is_infinite() {
            maxv = maxv.max(d2.sqrt());
        } else {
            sum += d2.sqrt().powf(p) * w;
        }
    }
    if p.is_infinite() {
        maxv
    } else {
        sum.powf(1.0 / p)
    }
}

/// One rung of a localization ladder.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord {
    /// Ladder value (equals `s` or `delta` depending on the sweep kind).
    pub value: f64,
    pub s: f64,
    pub delta: f64,
    pub h: f64,
    /// State gap against the local reference in `L^p`.
    pub state_gap: f64,
    /// Nonlocal-gradient vs local-gradient gap in `L^p` on the free set.
    pub grad_gap: f64,
    /// Control gap in the conjugate norm `L^{p'}`.
    pub control_gap: f64,
    /// Control gaps in the configured extra norms, same order as `r_list`.
    pub control_gap_r: Vec<f64>,
    pub cost_gap: f64,
    pub energy_gap: f64,
}

/// Sweep kind: fractional order toward 1 or horizon toward 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepVariable {
    S,
    Delta,
}

/// Everything needed to run a localization ladder: the nonlocal control
/// problem template, the ladder values, and solver budgets. The target is
/// a closure of position so it can be sampled on every grid in play.
pub struct SweepProblem<'a> {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub box_min: Vec<f64>,
    pub box_max: Vec<f64>,
    pub h: f64,
    /// `s` for delta-sweeps, `delta` for s-sweeps.
    pub fixed_s: f64,
    pub fixed_delta: f64,
    pub cutoff: crate::kernel::CutoffSpec,
    pub params: crate::energy::EnergyParams,
    pub target: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub control_weight: f64,
    pub lower: f64,
    pub upper: f64,
    pub r_list: Vec<f64>,
    pub state_tol: f64,
    pub state_max_iter: usize,
    pub control_tol: f64,
    pub control_max_iter: usize,
}

impl<'a> SweepProblem<'a> {
    pub fn dim(&self) -> usize {
        self.box_min.len()
    }

    /// `(s, delta)` pair of one ladder rung.
    pub fn rung_parameters(&self, value: f64) -> (f64, f64) {
        match self.variable {
            SweepVariable::S => (value, self.fixed_delta),
            SweepVariable::Delta => (self.fixed_s, value),
        }
    }

    /// Grid and kernel of one ladder rung. s-sweeps keep the horizon (and
    /// hence the grid) fixed with the plateau amplitude a0 as configured;
    /// delta-sweeps use the rescaled-from-unit family normalized to total
    /// mass `n`.
    pub fn rung(&self, value: f64) -> Result<(Grid, crate::kernel::KernelSpec)> {
        use crate::kernel::{normalize_mass, KernelMode, KernelSpec};
        let (s, delta) = self.rung_parameters(value);
        let grid = crate::grid::build_grid(&self.box_min, &self.box_max, self.h, delta)?;
        let mut spec = KernelSpec {
            dim: self.dim(),
            s,
            delta,
            cutoff: self.cutoff,
            mode: KernelMode::FixedHorizon,
            mass_target: None,
        };
        if self.variable == SweepVariable::Delta {
            spec.mode = KernelMode::RescaledFromUnit;
            spec = normalize_mass(&spec, self.dim() as f64)?;
        }
        Ok((grid, spec))
    }

    /// Box of the local reference domain: the horizon-shrunk box for
    /// s-sweeps, the original box for delta-sweeps.
    pub fn local_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self.variable {
            SweepVariable::S => (
                self.box_min.iter().map(|v| v + self.fixed_delta).collect(),
                self.box_max.iter().map(|v| v - self.fixed_delta).collect(),
            ),
            SweepVariable::Delta => (self.box_min.clone(), self.box_max.clone()),
        }
    }

    pub fn local_grid(&self) -> Result<Grid> {
        let (lo, hi) = self.local_box();
        crate::grid::build_grid(&lo, &hi, self.h, self.h)
    }

    fn conjugate_exponent(&self) -> f64 {
        self.params.p / (self.params.p - 1.0)
    }
}

fn sample_target(problem: &SweepProblem, grid: &Grid) -> Field {
    Field::from_fn(grid, |x| (problem.target)(x))
}

fn control_solve_on(
    problem: &SweepProblem,
    op: &dyn GradOp,
) -> Result<(Field, Field, f64, f64)> {
    use crate::control::{solve_control, Bound, ControlProblem};
    let grid = op.grid();
    let cp = ControlProblem {
        op,
        params: problem.params.clone(),
        target: sample_target(problem, grid),
        control_weight: problem.control_weight,
        lower: Bound::Uniform(problem.lower),
        upper: Bound::Uniform(problem.upper),
        state_tol: problem.state_tol,
        state_max_iter: problem.state_max_iter,
    };
    let start = Field::zeros(grid);
    let (g, u, rep) =
        solve_control(&cp, &start, problem.control_tol, problem.control_max_iter)?;
    let energy = crate::energy::eval_energy(op, &problem.params, &u, Some(&g)).total;
    Ok((g, u, rep.cost, energy))
}

/// Run a localization ladder of control problems against the fixed local
/// reference. Each rung solves the nonlocal problem and compares state,
/// gradient, control, cost and energy to the local solution on the local
/// domain's nodes; the gradient comparison is restricted to the free set
/// (the horizon-shrunk domain).
pub fn sweep(problem: &SweepProblem) -> Result<Vec<SweepRecord>> {
    use crate::operators::LocalCellOp;
    let p = problem.params.p;
    let pc = problem.conjugate_exponent();

    let grid_loc = problem.local_grid()?;
    let op_loc = LocalCellOp::new(&grid_loc);
    let (g_loc, u_loc, cost_loc, energy_loc) = control_solve_on(problem, &op_loc)?;

    let mut out = Vec::new();
    for &value in &problem.values {
        let (grid_nl, spec) = problem.rung(value)?;
        let op_nl = NonlocalGradientOp::assemble(&grid_nl, &spec)?;
        let (g_nl, u_nl, cost_nl, energy_nl) = control_solve_on(problem, &op_nl)?;

        let u_nl_on_loc = transfer_by_position(&grid_nl, &u_nl, &grid_loc);
        let g_nl_on_loc = transfer_by_position(&grid_nl, &g_nl, &grid_loc);
        let u_loc_on_nl = transfer_by_position(&grid_loc, &u_loc, &grid_nl);

        let state_gap = field_gap(&grid_loc, &u_nl_on_loc, &u_loc, p, Region::Omega);
        let grad_gap = gradient_disagreement(&op_nl, &u_nl, &u_loc_on_nl, p, Region::Free);
        let control_gap = field_gap(&grid_loc, &g_nl_on_loc, &g_loc, pc, Region::Omega);
        let control_gap_r = problem
            .r_list
            .iter()
            .map(|&r| field_gap(&grid_loc, &g_nl_on_loc, &g_loc, r, Region::Omega))
            .collect();
        let (s, delta) = problem.rung_parameters(value);
        out.push(SweepRecord {
            value,
            s,
            delta,
            h: problem.h,
            state_gap,
            grad_gap,
            control_gap,
            control_gap_r,
            cost_gap: (cost_nl - cost_loc).abs(),
            energy_gap: (energy_nl - energy_loc).abs(),
        });
    }
    Ok(out)
}

/// One rung of the energy-gap ladder for a fixed load.
#[derive(Debug, Clone, Serialize)]
pub struct GammaRecord {
    pub value: f64,
    pub s: f64,
    pub delta: f64,
    pub nonlocal_min: f64,
    pub local_min: f64,
    pub gap: f64,
    /// Nonlocal energy of the (collar-truncated) local minimizer; an upper
    /// bound for `nonlocal_min` at every rung.
    pub nonlocal_at_local: f64,
}

/// Minimum-energy ladder for a fixed load `g`: per rung, the nonlocal
/// minimum, the local minimum, their gap, and the nonlocal energy of the
/// truncated local minimizer.
pub fn gamma_proxy(
    problem: &SweepProblem,
    load: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<GammaRecord>> {
    use crate::operators::LocalCellOp;
    use crate::state::solve_state_auto;

    let grid_loc = problem.local_grid()?;
    let op_loc = LocalCellOp::new(&grid_loc);
    let load_loc = Field::from_fn(&grid_loc, |x| load(x));
    let (u_loc, _) = solve_state_auto(
        &op_loc,
        &problem.params,
        &load_loc,
        problem.state_tol,
        problem.state_max_iter,
    )?;
    let local_min =
        crate::energy::eval_energy(&op_loc, &problem.params, &u_loc, Some(&load_loc)).total;

    let mut out = Vec::new();
    for &value in &problem.values {
        let (grid_nl, spec) = problem.rung(value)?;
        let op_nl = NonlocalGradientOp::assemble(&grid_nl, &spec)?;
        let load_nl = Field::from_fn(&grid_nl, |x| load(x));
        let (u_nl, _) = solve_state_auto(
            &op_nl,
            &problem.params,
            &load_nl,
            problem.state_tol,
            problem.state_max_iter,
        )?;
        let nonlocal_min =
            crate::energy::eval_energy(&op_nl, &problem.params, &u_nl, Some(&load_nl)).total;
        // admissible competitor: local minimizer moved over and truncated
        // to the free set
        let u_comp = crate::grid::apply_collar_zero(
            &grid_nl,
            &transfer_by_position(&grid_loc, &u_loc, &grid_nl),
        );
        let nonlocal_at_local =
            crate::energy::eval_energy(&op_nl, &problem.params, &u_comp, Some(&load_nl)).total;
        let (s, delta) = problem.rung_parameters(value);
        out.push(GammaRecord {
            value,
            s,
            delta,
            nonlocal_min,
            local_min,
            gap: (nonlocal_min - local_min).abs(),
            nonlocal_at_local,
        });
    }
    Ok(out)
}

/// One rung of the operator probe ladder.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRecord {
    pub value: f64,
    pub s: f64,
    pub delta: f64,
    pub error: f64,
}

/// Gradient error of the assembled operator on a fixed smooth field,
/// isolating operator localization from solver effects: per rung,
/// the `L^p` gap between the nonlocal gradient of `u_test` and its
/// centered-difference gradient on the free set.
pub fn operator_localization_probe(
    problem: &SweepProblem,
    u_test: &dyn Fn(&[f64]) -> Vec<f64>,
    p: f64,
) -> Result<Vec<ProbeRecord>> {
    let mut out = Vec::new();
    for &value in &problem.values {
        let (grid, spec) = problem.rung(value)?;
        let op = NonlocalGradientOp::assemble(&grid, &spec)?;
        let u = Field::from_fn(&grid, |x| u_test(x));
        let error = gradient_disagreement(&op, &u, &u, p, Region::Free);
        let (s, delta) = problem.rung_parameters(value);
        out.push(ProbeRecord {
            value,
            s,
            delta,
            error,
        });
    }
    Ok(out)
}

/// Poincare-constant estimates along a ladder: `(value, constant)` pairs.
pub fn poincare_ladder(problem: &SweepProblem, seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for &value in &problem.values {
        let (grid, spec) = problem.rung(value)?;
        let op = NonlocalGradientOp::assemble(&grid, &spec)?;
        let c = estimate_poincare(&op, problem.params.p, 1e-8, seed)?;
        out.push((value, c));
    }
    Ok(out)
}

/// Ordinary least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.max(1e-300).ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x.len() {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
    }
    num / den
}

/// True when every step of the error ladder shrinks by at least the factor
/// `0.5 + slack` (e.g. `slack = 0.05` demands near-halving per rung).
pub fn halving_trend(errors: &[f64], slack: f64) -> bool {
    errors
        .windows(2)
        .all(|w| w[1] <= (0.5 + slack) * w[0] + 1e-300)
}

/// True when the ladder is monotonically decreasing up to a relative slack.
pub fn decreasing_trend(errors: &[f64], slack: f64) -> bool {
    errors.windows(2).all(|w| w[1] <= (1.0 + slack) * w[0])
}
