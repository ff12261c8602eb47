//! Uniform Cartesian grids over the inflated domain, collar masks, vector
//! fields and discrete Lp norms.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-node classification relative to the collar geometry.
///
/// `ExteriorCollar` nodes lie in the inflated ring outside the closed
/// domain, `InteriorCollar` nodes are inside the domain but within the
/// horizon of its boundary, `Free` nodes carry the degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeClass {
    ExteriorCollar,
    InteriorCollar,
    Free,
}

/// Node-set selector used by norms and restrictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// All nodes of the inflated grid.
    All,
    /// Nodes strictly inside the domain (free + interior collar).
    Omega,
    /// Free nodes only (distance to the boundary strictly above the horizon).
    Free,
    /// Both collars.
    DoubleCollar,
    ExteriorCollar,
    InteriorCollar,
}

/// Uniform grid covering the inflated box, with exact integer collar layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    /// Lower corner of the (open) domain box.
    pub box_min: [f64; 2],
    /// Upper corner of the domain box.
    pub box_max: [f64; 2],
    pub h: f64,
    pub delta: f64,
    /// Collar thickness in layers, `delta / h`.
    pub layers: usize,
    /// Interior node counts of the box per axis (`(box_max-box_min)/h`).
    pub cells: [usize; 2],
    /// Node counts per axis over the inflated box.
    pub shape: [usize; 2],
    pub mask: Vec<NodeClass>,
}

impl Grid {
    pub fn num_nodes(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    /// Quadrature weight per node.
    pub fn node_weight(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix + self.shape[0] * iy
    }

    #[inline]
    pub fn coords_of(&self, node: usize) -> [usize; 2] {
        [node % self.shape[0], node / self.shape[0]]
    }

    /// Physical position of a node.
    pub fn position(&self, node: usize) -> [f64; 2] {
        let c = self.coords_of(node);
        let mut p = [0.0; 2];
        for a in 0..self.dim {
            p[a] = self.box_min[a] - self.delta + c[a] as f64 * self.h;
        }
        p
    }

    pub fn class(&self, node: usize) -> NodeClass {
        self.mask[node]
    }

    pub fn in_region(&self, node: usize, region: Region) -> bool {
        match region {
            Region::All => true,
            Region::Omega => !matches!(self.mask[node], NodeClass::ExteriorCollar),
            Region::Free => matches!(self.mask[node], NodeClass::Free),
            Region::DoubleCollar => !matches!(self.mask[node], NodeClass::Free),
            Region::ExteriorCollar => matches!(self.mask[node], NodeClass::ExteriorCollar),
            Region::InteriorCollar => matches!(self.mask[node], NodeClass::InteriorCollar),
        }
    }

    /// Nodes of a region, in index order.
    pub fn region_nodes(&self, region: Region) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| self.in_region(i, region))
            .collect()
    }

    pub fn count(&self, region: Region) -> usize {
        (0..self.num_nodes()).filter(|&i| self.in_region(i, region)).count()
    }
}

fn check_integral_ratio(value: f64, h: f64, what: &str) -> Result<usize> {
    let ratio = value / h;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > 1e-12 * ratio.abs().max(1.0) || rounded < 1.0 {
        return Err(Error::Grid(format!(
            "{what} = {value} must be a positive integral multiple of h = {h}"
        )));
    }
    Ok(rounded as usize)
}

/// Construct the grid for the box `(box_min, box_max)` with spacing `h` and
/// horizon `delta`.
///
/// Node classification uses exact index arithmetic: with `k = delta/h`
/// layers, a node is inside the domain iff it is strictly inside the box on
/// every axis, and free iff its boundary distance exceeds `delta` strictly
/// (nodes at distance exactly `delta` belong to the interior collar).
pub fn build_grid(box_min: &[f64], box_max: &[f64], h: f64, delta: f64) -> Result<Grid> {
    let dim = box_min.len();
    if dim != box_max.len() || !(dim == 1 || dim == 2) {
        return Err(Error::Grid(format!("dimension must be 1 or 2, got {dim}")));
    }
    if !(h > 0.0) {
        return Err(Error::Grid(format!("h must be positive, got {h}")));
    }
    if delta < h {
        return Err(Error::Grid(format!(
            "delta = {delta} must be at least h = {h} (horizon must contain neighbors)"
        )));
    }
    let layers = check_integral_ratio(delta, h, "delta")?;
    let mut cells = [1usize; 2];
    let mut shape = [1usize; 2];
    let mut bmin = [0.0; 2];
    let mut bmax = [0.0; 2];
    for a in 0..dim {
        if !(box_max[a] > box_min[a]) {
            return Err(Error::Grid(format!(
                "box must be nonempty on axis {a}: [{}, {}]",
                box_min[a], box_max[a]
            )));
        }
        cells[a] = check_integral_ratio(box_max[a] - box_min[a], h, "box extent")?;
        shape[a] = cells[a] + 2 * layers + 1;
        bmin[a] = box_min[a];
        bmax[a] = box_max[a];
    }

    let n_nodes = shape[0] * shape[1];
    let mut mask = Vec::with_capacity(n_nodes);
    let k = layers as isize;
    for iy in 0..shape[1] {
        for ix in 0..shape[0] {
            let idx = [ix as isize, iy as isize];
            let mut inside = true;
            let mut min_layers = isize::MAX;
            for a in 0..dim {
                let lo = idx[a] - k;
                let hi = cells[a] as isize + k - idx[a];
                if lo <= 0 || hi <= 0 {
                    inside = false;
                }
                min_layers = min_layers.min(lo.min(hi));
            }
            let class = if !inside {
                NodeClass::ExteriorCollar
            } else if min_layers > k {
                NodeClass::Free
            } else {
                NodeClass::InteriorCollar
            };
            mask.push(class);
        }
    }

    Ok(Grid {
        dim,
        box_min: bmin,
        box_max: bmax,
        h,
        delta,
        layers,
        cells,
        shape,
        mask,
    })
}

/// Vector field over the nodes of a grid, `dim` components per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &Grid) -> Self {
        Field {
            dim: grid.dim,
            data: vec![0.0; grid.num_nodes() * grid.dim],
        }
    }

    pub fn constant(grid: &Grid, value: &[f64]) -> Self {
        let mut f = Field::zeros(grid);
        for node in 0..grid.num_nodes() {
            f.set(node, value);
        }
        f
    }

    /// Build from a per-node closure of the node position.
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let mut out = Field::zeros(grid);
        for node in 0..grid.num_nodes() {
            let p = grid.position(node);
            let v = f(&p[..grid.dim]);
            out.set(node, &v);
        }
        out
    }

    #[inline]
    pub fn get(&self, node: usize) -> &[f64] {
        &self.data[node * self.dim..(node + 1) * self.dim]
    }

    #[inline]
    pub fn set(&mut self, node: usize, value: &[f64]) {
        self.data[node * self.dim..(node + 1) * self.dim].copy_from_slice(value);
    }

    pub fn num_nodes(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn axpy(&mut self, alpha: f64, other: &Field) {
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.data.iter_mut() {
            *a *= alpha;
        }
    }
}

/// Matrix field: one `dim x dim` matrix per site of an operator's site list.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl MatrixField {
    pub fn zeros(dim: usize, sites: usize) -> Self {
        MatrixField {
            dim,
            data: vec![0.0; sites * dim * dim],
        }
    }

    pub fn num_sites(&self) -> usize {
        self.data.len() / (self.dim * self.dim)
    }

    #[inline]
    pub fn get(&self, site: usize) -> &[f64] {
        let m = self.dim * self.dim;
        &self.data[site * m..(site + 1) * m]
    }

    #[inline]
    pub fn get_mut(&mut self, site: usize) -> &mut [f64] {
        let m = self.dim * self.dim;
        &mut self.data[site * m..(site + 1) * m]
    }
}

fn pointwise_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Discrete Lp norm of a field over a region, with Euclidean pointwise norm
/// and node weight `h^n`; `p = f64::INFINITY` gives the max norm.
pub fn lp_norm(grid: &Grid, field: &Field, p: f64, region: Region) -> f64 {
    assert!(p >= 1.0, "p must be at least 1");
    let w = grid.node_weight();
    if p.is_infinite() {
        let mut m: f64 = 0.0;
        for node in 0..grid.num_nodes() {
            if grid.in_region(node, region) {
                m = m.max(pointwise_norm(field.get(node)));
            }
        }
        return m;
    }
    let mut sum = 0.0;
    for node in 0..grid.num_nodes() {
        if grid.in_region(node, region) {
            sum += pointwise_norm(field.get(node)).powf(p) * w;
        }
    }
    sum.powf(1.0 / p)
}

/// Discrete Lp norm of a matrix field with Frobenius pointwise norm; the
/// caller supplies the per-site quadrature weight and an optional site
/// filter.
pub fn lp_norm_matrix(
    phi: &MatrixField,
    p: f64,
    site_weight: f64,
    filter: Option<&dyn Fn(usize) -> bool>,
) -> f64 {
    assert!(p >= 1.0);
    let keep = |s: usize| filter.map_or(true, |f| f(s));
    if p.is_infinite() {
        let mut m: f64 = 0.0;
        for s in 0..phi.num_sites() {
            if keep(s) {
                m = m.max(pointwise_norm(phi.get(s)));
            }
        }
        return m;
    }
    let mut sum = 0.0;
    for s in 0..phi.num_sites() {
        if keep(s) {
            sum += pointwise_norm(phi.get(s)).powf(p) * site_weight;
        }
    }
    sum.powf(1.0 / p)
}

/// Zero out both collars; free-node values are preserved bit-exactly.
pub fn apply_collar_zero(grid: &Grid, field: &Field) -> Field {
    let mut out = field.clone();
    for node in 0..grid.num_nodes() {
        if !grid.in_region(node, Region::Free) {
            for c in 0..out.dim {
                out.data[node * out.dim + c] = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_1d_example() {
        // Omega = (0,1), delta = 0.25, h = 0.125
        let g = build_grid(&[0.0], &[1.0], 0.125, 0.25).unwrap();
        assert_eq!(g.shape[0], 13);
        let first = g.position(0)[0];
        let last = g.position(12)[0];
        assert!((first + 0.25).abs() < 1e-14);
        assert!((last - 1.25).abs() < 1e-14);
        let free: Vec<f64> = g
            .region_nodes(Region::Free)
            .iter()
            .map(|&n| g.position(n)[0])
            .collect();
        assert_eq!(free.len(), 3);
        for (v, e) in free.iter().zip([0.375, 0.5, 0.625]) {
            assert!((v - e).abs() < 1e-14);
        }
    }

    #[test]
    fn grid_delta_equals_h() {
        let g = build_grid(&[0.0], &[1.0], 0.125, 0.125).unwrap();
        // free region is (h, 1-h) exclusive
        for &n in &g.region_nodes(Region::Free) {
            let x = g.position(n)[0];
            assert!(x > 0.125 && x < 0.875);
        }
        assert_eq!(g.count(Region::Free), 5);
    }

    #[test]
    fn grid_2d_example() {
        // unit square, delta = h = 0.25: free set is the single center node
        let g = build_grid(&[0.0, 0.0], &[1.0, 1.0], 0.25, 0.25).unwrap();
        let free = g.region_nodes(Region::Free);
        assert_eq!(free.len(), 1);
        let p = g.position(free[0]);
        assert!((p[0] - 0.5).abs() < 1e-14 && (p[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn grid_rejections() {
        assert!(build_grid(&[0.0], &[1.0], 0.25, 0.125).is_err()); // delta < h
        assert!(build_grid(&[0.0], &[1.0], 0.125, 0.3).is_err()); // non-integral delta/h
        assert!(build_grid(&[1.0], &[1.0], 0.125, 0.25).is_err()); // empty box
    }

    #[test]
    fn mask_partition() {
        let g = build_grid(&[0.0, 0.0], &[1.0, 0.5], 0.0625, 0.125).unwrap();
        let total = g.num_nodes();
        let parts = g.count(Region::Free) + g.count(Region::InteriorCollar)
            + g.count(Region::ExteriorCollar);
        assert_eq!(total, parts);
    }

    #[test]
    fn free_set_shrinks_with_delta() {
        let small = build_grid(&[0.0], &[1.0], 0.0625, 0.125).unwrap();
        let large = build_grid(&[0.0], &[1.0], 0.0625, 0.25).unwrap();
        let free_small: Vec<f64> = small
            .region_nodes(Region::Free)
            .iter()
            .map(|&n| small.position(n)[0])
            .collect();
        let free_large: Vec<f64> = large
            .region_nodes(Region::Free)
            .iter()
            .map(|&n| large.position(n)[0])
            .collect();
        assert!(free_large.len() < free_small.len());
        for x in &free_large {
            assert!(free_small.iter().any(|y| (x - y).abs() < 1e-14));
        }
    }

    #[test]
    fn lp_norm_basics() {
        let g = build_grid(&[0.0], &[1.0], 0.125, 0.25).unwrap();
        let zero = Field::zeros(&g);
        assert_eq!(lp_norm(&g, &zero, 2.0, Region::All), 0.0);

        // constant c on a region of measure m -> |c| * m^{1/p}
        let c = 3.0;
        let f = Field::constant(&g, &[c]);
        let measure = g.count(Region::Omega) as f64 * g.node_weight();
        for p in [1.0, 2.0, 4.0] {
            let n = lp_norm(&g, &f, p, Region::Omega);
            assert!((n - c * measure.powf(1.0 / p)).abs() < 1e-12);
        }
        assert!((lp_norm(&g, &f, f64::INFINITY, Region::Omega) - c).abs() < 1e-14);
    }

    #[test]
    fn lp_norm_inf_dominates_scaled_l2() {
        let g = build_grid(&[0.0], &[1.0], 0.0625, 0.125).unwrap();
        let mut state = 1234567u64;
        let mut rng = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..20 {
            let f = Field::from_fn(&g, |_| vec![rng()]);
            let measure = g.num_nodes() as f64 * g.node_weight();
            let linf = lp_norm(&g, &f, f64::INFINITY, Region::All);
            let l2 = lp_norm(&g, &f, 2.0, Region::All);
            assert!(linf + 1e-15 >= l2 / measure.sqrt());
        }
    }

    #[test]
    fn collar_zero_idempotent_and_preserving() {
        let g = build_grid(&[0.0], &[1.0], 0.125, 0.25).unwrap();
        let ones = Field::constant(&g, &[1.0]);
        let z = apply_collar_zero(&g, &ones);
        for node in 0..g.num_nodes() {
            let expect = if g.in_region(node, Region::Free) { 1.0 } else { 0.0 };
            assert_eq!(z.get(node)[0], expect);
        }
        assert_eq!(apply_collar_zero(&g, &z), z);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn lp_norm_homogeneous_and_triangle(
                seed in 0u64..1u64 << 32,
                alpha in -10.0f64..10.0,
                p in 1.0f64..6.0,
            ) {
                let g = build_grid(&[0.0], &[1.0], 0.125, 0.25).unwrap();
                let mut state = seed.wrapping_add(1);
                let mut rng = move || {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                    (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                };
                let f = Field::from_fn(&g, |_| vec![rng()]);
                let gfield = Field::from_fn(&g, |_| vec![rng()]);
                let nf = lp_norm(&g, &f, p, Region::All);
                let mut scaled = f.clone();
                scaled.scale(alpha);
                prop_assert!((lp_norm(&g, &scaled, p, Region::All) - alpha.abs() * nf).abs()
                    <= 1e-10 * (1.0 + nf));
                let mut sum = f.clone();
                sum.axpy(1.0, &gfield);
                let ns = lp_norm(&g, &sum, p, Region::All);
                prop_assert!(ns <= nf + lp_norm(&g, &gfield, p, Region::All) + 1e-12);
            }
        }
    }
}
