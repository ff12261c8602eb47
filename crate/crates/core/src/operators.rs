//! Discrete gradient operators: the assembled nonlocal gradient and two
//! classical finite-difference references.
//!
//! All three implement [`GradOp`]: they map a node field `u` to a matrix
//! field of gradients on a list of evaluation sites, and provide the exact
//! algebraic transpose so discrete integration by parts holds to machine
//! precision.

use std::collections::HashMap;

use crate::grid::{Field, Grid, MatrixField, NodeClass, Region};
use crate::kernel::{kernel_eval, kernel_mass, KernelSpec};
use crate::quad::{adaptive_simpson, adaptive_simpson_2d, composite_simpson};
use crate::Result;

/// A linear gradient map together with its transpose and the bookkeeping
/// needed to run energies and solvers on top of it.
pub trait GradOp {
    fn grid(&self) -> &Grid;
    /// Node index underlying each evaluation site.
    fn sites(&self) -> &[usize];
    /// Quadrature weight per site (uniform `h^n` for all operators here).
    fn site_weight(&self) -> f64;
    /// Nodes carrying degrees of freedom for homogeneous complement data.
    fn dof_nodes(&self) -> &[usize];
    fn apply(&self, u: &Field, out: &mut MatrixField);
    /// Exact algebraic transpose of [`GradOp::apply`] (no quadrature
    /// weights): `sum_sites (Du)_i : Phi_i == sum_nodes u_j . (D^T Phi)_j`.
    fn apply_transpose(&self, phi: &MatrixField, out: &mut Field);

    fn gradient(&self, u: &Field) -> MatrixField {
        let mut out = MatrixField::zeros(self.grid().dim, self.sites().len());
        self.apply(u, &mut out);
        out
    }

    fn num_sites(&self) -> usize {
        self.sites().len()
    }
}

/// One stencil entry of the nonlocal operator: an integer lattice offset,
/// its unit direction `-offset/|offset|`, and the calibrated kernel weight.
#[derive(Debug, Clone, Serialize)]
pub struct StencilEntry {
    pub offset: [i64; 2],
    pub direction: [f64; 2],
    pub weight: f64,
}

use serde::Serialize;

/// Assembled nonlocal gradient for a kernel on a grid.
///
/// The discrete action at node `i` is
/// `(Du)(i) = sum_o w(o) (u(i) - u(i+o)) (x) e(o)` with `e(o) = -o/|o|`,
/// where the sum runs over lattice offsets inside the horizon ball. Weights
/// come from per-cell kernel quadrature and are then rescaled so affine
/// functions are reproduced with the exact continuum factor `mass / n`.
pub struct NonlocalGradientOp {
    grid: Grid,
    pub kernel: KernelSpec,
    pub stencil: Vec<StencilEntry>,
    /// Trace-average of the direction second moment before calibration.
    pub raw_moment: f64,
    /// Factor applied to all weights: `(mass/n) / raw_moment`.
    pub calibration: f64,
    /// Kernel mass used as the calibration target.
    pub mass: f64,
    sites: Vec<usize>,
    dofs: Vec<usize>,
    /// Precomputed node-index jumps for each stencil entry.
    jumps: Vec<isize>,
}

/// Quadrature weight for the cell of side `h` centered at lattice offset
/// `o` (in units of `h`), integrating `rho(z)/|z|`.
fn cell_weight(spec: &KernelSpec, h: f64, o: &[i64]) -> Result<f64> {
    let dim = spec.dim;
    let r2: f64 = o.iter().map(|&c| (c as f64) * (c as f64)).sum();
    let r = r2.sqrt() * h;
    let integrand_r = |z: f64| -> f64 {
        kernel_eval(spec, &[z]).map_or(0.0, |v| v / z.abs().max(1e-300))
    };
    let midpoint = if r > 0.0 {
        kernel_eval(spec, &o.iter().map(|&c| c as f64 * h).collect::<Vec<_>>())? / r
    } else {
        0.0
    };
    // Far cells: midpoint rule. Near cells (within two spacings of the
    // singularity): adaptive quadrature at 1e-8 relative accuracy.
    if r2 > 4.0 {
        return Ok(midpoint * h.powi(dim as i32));
    }
    let tol = (midpoint * h.powi(dim as i32) * 1e-8).abs().max(1e-16);
    match dim {
        1 => {
            let a = o[0] as f64 * h - 0.5 * h;
            let b = o[0] as f64 * h + 0.5 * h;
            let f = |z: f64| integrand_r(z);
            Ok(adaptive_simpson(&f, a, b, tol)
                .unwrap_or_else(|_| composite_simpson(&f, a, b, 1 << 14)))
        }
        2 => {
            let ax = o[0] as f64 * h - 0.5 * h;
            let bx = o[0] as f64 * h + 0.5 * h;
            let ay = o[1] as f64 * h - 0.5 * h;
            let by = o[1] as f64 * h + 0.5 * h;
            let f = |x: f64, y: f64| -> f64 {
                let rr = (x * x + y * y).sqrt();
                kernel_eval(spec, &[x, y]).map_or(0.0, |v| v / rr.max(1e-300))
            };
            adaptive_simpson_2d(&f, ax, bx, ay, by, tol)
        }
        _ => unreachable!(),
    }
}

impl NonlocalGradientOp {
    pub fn assemble(grid: &Grid, kernel: &KernelSpec) -> Result<NonlocalGradientOp> {
        kernel.validate()?;
        assert_eq!(grid.dim, kernel.dim, "grid and kernel dimension mismatch");
        let dim = grid.dim;
        let h = grid.h;
        let k = (kernel.delta / h).round() as i64;

        // Weights depend on the offset only through its canonical form
        // (sorted absolute components) because the kernel is radial.
        let mut cache: HashMap<[i64; 2], f64> = HashMap::new();
        let mut stencil = Vec::new();
        let reach = k + 1; // cells straddling the support edge included
        let offsets_1d: Vec<i64> = (-reach..=reach).collect();
        let mut raw_offsets: Vec<[i64; 2]> = Vec::new();
        if dim == 1 {
            for &ox in &offsets_1d {
                if ox != 0 {
                    raw_offsets.push([ox, 0]);
                }
            }
        } else {
            for &oy in &offsets_1d {
                for &ox in &offsets_1d {
                    if ox != 0 || oy != 0 {
                        raw_offsets.push([ox, oy]);
                    }
                }
            }
        }

        for o in raw_offsets {
            // skip cells fully outside the support ball
            let r = ((o[0] * o[0] + o[1] * o[1]) as f64).sqrt() * h;
            if r - h * (dim as f64).sqrt() / 2.0 >= kernel.delta {
                continue;
            }
            let mut canon = [o[0].abs(), o[1].abs()];
            canon.sort_unstable();
            let w = match cache.get(&canon) {
                Some(&w) => w,
                None => {
                    let w = cell_weight(kernel, h, &o[..dim])?;
                    cache.insert(canon, w);
                    w
                }
            };
            if w == 0.0 {
                continue;
            }
            let norm = ((o[0] * o[0] + o[1] * o[1]) as f64).sqrt();
            let direction = [-(o[0] as f64) / norm, -(o[1] as f64) / norm];
            stencil.push(StencilEntry {
                offset: o,
                direction,
                weight: w,
            });
        }

        // Calibrate: applied to u(x) = A x the raw operator gives
        // A * sum_o w(o) |o h| (e (x) e); scale so the trace average equals
        // mass/n, which makes affine reproduction exact when the offset set
        // is fully symmetric (it is).
        let mass = kernel.mass_target.map_or_else(|| kernel_mass(kernel), Ok)?;
        let mut trace = 0.0;
        for e in &stencil {
            let norm =
                ((e.offset[0] * e.offset[0] + e.offset[1] * e.offset[1]) as f64).sqrt() * h;
            trace += e.weight * norm; // tr(e (x) e) = 1
        }
        let raw_moment = trace / dim as f64;
        let calibration = (mass / dim as f64) / raw_moment;
        for e in &mut stencil {
            e.weight *= calibration;
        }

        // Sites: nodes whose horizon ball of offsets stays on the grid,
        // i.e. the closed domain box.
        let mut sites = Vec::new();
        for node in 0..grid.num_nodes() {
            let c = grid.coords_of(node);
            let mut ok = true;
            for a in 0..dim {
                let i = c[a] as i64;
                if i < k || i > grid.cells[a] as i64 + k {
                    ok = false;
                }
            }
            if ok {
                sites.push(node);
            }
        }
        let dofs = grid.region_nodes(Region::Free);
        let stride = grid.shape[0] as isize;
        let jumps = stencil
            .iter()
            .map(|e| e.offset[0] as isize + e.offset[1] as isize * stride)
            .collect();

        Ok(NonlocalGradientOp {
            grid: grid.clone(),
            kernel: kernel.clone(),
            stencil,
            raw_moment,
            calibration,
            mass,
            sites,
            dofs,
            jumps,
        })
    }
}

impl GradOp for NonlocalGradientOp {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn sites(&self) -> &[usize] {
        &self.sites
    }
    fn site_weight(&self) -> f64 {
        self.grid.node_weight()
    }
    fn dof_nodes(&self) -> &[usize] {
        &self.dofs
    }

    fn apply(&self, u: &Field, out: &mut MatrixField) {
        let dim = self.grid.dim;
        debug_assert_eq!(out.num_sites(), self.sites.len());
        out.data.fill(0.0);
        for (site, &node) in self.sites.iter().enumerate() {
            let ui = u.get(node);
            let m = out.get_mut(site);
            for (e, &jump) in self.stencil.iter().zip(&self.jumps) {
                let j = (node as isize + jump) as usize;
                let uj = u.get(j);
                for c in 0..dim {
                    let d = e.weight * (ui[c] - uj[c]);
                    for a in 0..dim {
                        m[c * dim + a] += d * e.direction[a];
                    }
                }
            }
        }
    }

    fn apply_transpose(&self, phi: &MatrixField, out: &mut Field) {
        let dim = self.grid.dim;
        debug_assert_eq!(phi.num_sites(), self.sites.len());
        out.data.fill(0.0);
        for (site, &node) in self.sites.iter().enumerate() {
            let m = phi.get(site);
            for (e, &jump) in self.stencil.iter().zip(&self.jumps) {
                let j = (node as isize + jump) as usize;
                for c in 0..dim {
                    let mut dot = 0.0;
                    for a in 0..dim {
                        dot += m[c * dim + a] * e.direction[a];
                    }
                    let v = e.weight * dot;
                    out.data[node * dim + c] += v;
                    out.data[j * dim + c] -= v;
                }
            }
        }
    }
}

/// Local reference gradient with per-cell forward differences.
///
/// Sites are the grid cells of the domain box; the gradient column for axis
/// `a` is `(u(i + e_a) - u(i)) / h` at the cell's lower corner `i`. The
/// induced quadratic energy is the standard lowest-order finite-difference
/// Dirichlet energy, free of spurious oscillatory null modes.
pub struct LocalCellOp {
    grid: Grid,
    sites: Vec<usize>,
    dofs: Vec<usize>,
}

impl LocalCellOp {
    pub fn new(grid: &Grid) -> LocalCellOp {
        let k = grid.layers;
        let mut sites = Vec::new();
        for node in 0..grid.num_nodes() {
            let c = grid.coords_of(node);
            let mut ok = true;
            for a in 0..grid.dim {
                if c[a] < k || c[a] >= grid.cells[a] + k {
                    ok = false;
                }
            }
            if ok {
                sites.push(node);
            }
        }
        // Dirichlet dofs: nodes strictly inside the box.
        let dofs = grid.region_nodes(Region::Omega);
        LocalCellOp {
            grid: grid.clone(),
            sites,
            dofs,
        }
    }
}

impl GradOp for LocalCellOp {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn sites(&self) -> &[usize] {
        &self.sites
    }
    fn site_weight(&self) -> f64 {
        self.grid.node_weight()
    }
    fn dof_nodes(&self) -> &[usize] {
        &self.dofs
    }

    fn apply(&self, u: &Field, out: &mut MatrixField) {
        let dim = self.grid.dim;
        let inv_h = 1.0 / self.grid.h;
        let stride = [1usize, self.grid.shape[0]];
        out.data.fill(0.0);
        for (site, &node) in self.sites.iter().enumerate() {
            let m = out.get_mut(site);
            for a in 0..dim {
                let j = node + stride[a];
                for c in 0..dim {
                    m[c * dim + a] = (u.data[j * dim + c] - u.data[node * dim + c]) * inv_h;
                }
            }
        }
    }

    fn apply_transpose(&self, phi: &MatrixField, out: &mut Field) {
        let dim = self.grid.dim;
        let inv_h = 1.0 / self.grid.h;
        let stride = [1usize, self.grid.shape[0]];
        out.data.fill(0.0);
        for (site, &node) in self.sites.iter().enumerate() {
            let m = phi.get(site);
            for a in 0..dim {
                let j = node + stride[a];
                for c in 0..dim {
                    let v = m[c * dim + a] * inv_h;
                    out.data[j * dim + c] += v;
                    out.data[node * dim + c] -= v;
                }
            }
        }
    }
}

/// Local reference gradient with centered differences at nodes of the
/// closed box, one-sided at the box boundary. Second-order accurate in the
/// interior; used for pointwise gradient comparisons, not for solving.
pub struct LocalCentralOp {
    grid: Grid,
    sites: Vec<usize>,
    dofs: Vec<usize>,
    /// Per site and axis: (left node, right node, inverse spacing).
    stencil: Vec<(usize, usize, f64)>,
}

impl LocalCentralOp {
    pub fn new(grid: &Grid) -> LocalCentralOp {
        let k = grid.layers;
        let dim = grid.dim;
        let stride = [1usize, grid.shape[0]];
        let mut sites = Vec::new();
        let mut stencil = Vec::new();
        for node in 0..grid.num_nodes() {
            let c = grid.coords_of(node);
            let ok = (0..dim).all(|a| c[a] >= k && c[a] <= grid.cells[a] + k);
            if !ok {
                continue;
            }
            sites.push(node);
            for a in 0..dim {
                let lo_edge = c[a] == k;
                let hi_edge = c[a] == grid.cells[a] + k;
                let (l, r, inv) = if lo_edge {
                    (node, node + stride[a], 1.0 / grid.h)
                } else if hi_edge {
                    (node - stride[a], node, 1.0 / grid.h)
                } else {
                    (node - stride[a], node + stride[a], 0.5 / grid.h)
                };
                stencil.push((l, r, inv));
            }
        }
        let dofs = grid.region_nodes(Region::Omega);
        LocalCentralOp {
            grid: grid.clone(),
            sites,
            dofs,
            stencil,
        }
    }
}

impl GradOp for LocalCentralOp {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn sites(&self) -> &[usize] {
        &self.sites
    }
    fn site_weight(&self) -> f64 {
        self.grid.node_weight()
    }
    fn dof_nodes(&self) -> &[usize] {
        &self.dofs
    }

    fn apply(&self, u: &Field, out: &mut MatrixField) {
        let dim = self.grid.dim;
        out.data.fill(0.0);
        for site in 0..self.sites.len() {
            let m = out.get_mut(site);
            for a in 0..dim {
                let (l, r, inv) = self.stencil[site * dim + a];
                for c in 0..dim {
                    m[c * dim + a] = (u.data[r * dim + c] - u.data[l * dim + c]) * inv;
                }
            }
        }
    }

    fn apply_transpose(&self, phi: &MatrixField, out: &mut Field) {
        let dim = self.grid.dim;
        out.data.fill(0.0);
        for site in 0..self.sites.len() {
            let m = phi.get(site);
            for a in 0..dim {
                let (l, r, inv) = self.stencil[site * dim + a];
                for c in 0..dim {
                    let v = m[c * dim + a] * inv;
                    out.data[r * dim + c] += v;
                    out.data[l * dim + c] -= v;
                }
            }
        }
    }
}

/// Restrict a site filter to sites whose node lies in `region`.
pub fn site_filter<'a>(
    op: &'a dyn GradOp,
    region: Region,
) -> impl Fn(usize) -> bool + 'a {
    move |site: usize| op.grid().in_region(op.sites()[site], region)
}

/// True if the node is a free degree of freedom.
pub fn is_free(grid: &Grid, node: usize) -> bool {
    matches!(grid.class(node), NodeClass::Free)
}
