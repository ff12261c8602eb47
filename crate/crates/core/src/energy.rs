//! Integrands for the gradient energies: density `W`, pointwise flux
//! `Phi = dW/dA`, and the flux linearization used by adjoint solves.

use serde::{Deserialize, Serialize};

use crate::grid::{Field, MatrixField};
use crate::operators::GradOp;

/// Regularization floor inside `|A|_eps = sqrt(|A|^2 + eps^2)`; keeps the
/// flux and its derivative finite at `A = 0` for p < 4 without perturbing
/// results above round-off.
pub const NORM_EPS: f64 = 1e-10;

/// Fourth-order coefficient tensor `A |-> AA`, restricted to forms that are
/// diagonal in the matrix-entry basis (covers isotropic, anisotropic and
/// spatially varying scalar coefficients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coefficient {
    Identity,
    Scalar(f64),
    /// One factor per matrix entry, row-major `dim * dim`.
    EntryDiagonal(Vec<f64>),
    /// Scalar factor per evaluation site.
    PerSite(Vec<f64>),
}

impl Coefficient {
    /// `out = AA a` for the matrix `a` at `site`.
    pub fn apply(&self, site: usize, a: &[f64], out: &mut [f64]) {
        match self {
            Coefficient::Identity => out.copy_from_slice(a),
            Coefficient::Scalar(c) => {
                for (o, &v) in out.iter_mut().zip(a) {
                    *o = c * v;
                }
            }
            Coefficient::EntryDiagonal(d) => {
                for i in 0..a.len() {
                    out[i] = d[i] * a[i];
                }
            }
            Coefficient::PerSite(c) => {
                let f = c[site];
                for (o, &v) in out.iter_mut().zip(a) {
                    *o = f * v;
                }
            }
        }
    }

    /// Smallest eigenvalue of the form; positivity is the ellipticity check.
    pub fn min_factor(&self) -> f64 {
        match self {
            Coefficient::Identity => 1.0,
            Coefficient::Scalar(c) => *c,
            Coefficient::EntryDiagonal(d) => d.iter().cloned().fold(f64::INFINITY, f64::min),
            Coefficient::PerSite(c) => c.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Choice of energy density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Density {
    /// `W(A) = |A|^{p-2} (AA A : A) / p`; convex for p >= 1 and elliptic AA.
    PLaplacian,
    /// `W(A) = kappa ((AA A : A) - 1)^2 / 4`; nonconvex, used to exercise
    /// the multistart machinery.
    DoubleWell { kappa: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub p: f64,
    pub coefficient: Coefficient,
    pub density: Density,
}

impl EnergyParams {
    pub fn p_laplacian(p: f64) -> Self {
        EnergyParams {
            p,
            coefficient: Coefficient::Identity,
            density: Density::PLaplacian,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pointwise density value at one site.
pub fn density_value(params: &EnergyParams, site: usize, a: &[f64]) -> f64 {
    let mut aa = vec![0.0; a.len()];
    params.coefficient.apply(site, a, &mut aa);
    let q = dot(&aa, a);
    match params.density {
        Density::PLaplacian => {
            let n2 = dot(a, a);
            if n2 == 0.0 {
                return 0.0;
            }
            n2.sqrt().powf(params.p - 2.0) * q / params.p
        }
        Density::DoubleWell { kappa } => kappa * (q - 1.0) * (q - 1.0) / 4.0,
    }
}

/// Pointwise flux `Phi(A) = dW/dA` at one site.
pub fn flux(params: &EnergyParams, site: usize, a: &[f64], out: &mut [f64]) {
    let m = a.len();
    let mut aa = vec![0.0; m];
    params.coefficient.apply(site, a, &mut aa);
    let q = dot(&aa, a);
    match params.density {
        Density::PLaplacian => {
            let p = params.p;
            let n = (dot(a, a) + NORM_EPS * NORM_EPS).sqrt();
            let c1 = (p - 2.0) * n.powf(p - 4.0) * q / p;
            let c2 = 2.0 * n.powf(p - 2.0) / p;
            for i in 0..m {
                out[i] = c1 * a[i] + c2 * aa[i];
            }
        }
        Density::DoubleWell { kappa } => {
            let c = kappa * (q - 1.0);
            for i in 0..m {
                out[i] = c * aa[i];
            }
        }
    }
}

/// Directional derivative of the flux: `out = Phi'(A)[B]`.
pub fn flux_derivative(params: &EnergyParams, site: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let m = a.len();
    let mut aa = vec![0.0; m];
    let mut ab = vec![0.0; m];
    params.coefficient.apply(site, a, &mut aa);
    params.coefficient.apply(site, b, &mut ab);
    let q = dot(&aa, a);
    let qa_b = dot(&aa, b); // (AA A) : B  (= A : AA B by symmetry)
    match params.density {
        Density::PLaplacian => {
            let p = params.p;
            let n = (dot(a, a) + NORM_EPS * NORM_EPS).sqrt();
            let a_b = dot(a, b);
            let c_a = ((p - 2.0) * (p - 4.0) * n.powf(p - 6.0) * a_b * q
                + 2.0 * (p - 2.0) * n.powf(p - 4.0) * qa_b)
                / p;
            let c_aa = 2.0 * (p - 2.0) * n.powf(p - 4.0) * a_b / p;
            let c_b = (p - 2.0) * n.powf(p - 4.0) * q / p;
            let c_ab = 2.0 * n.powf(p - 2.0) / p;
            for i in 0..m {
                out[i] = c_a * a[i] + c_aa * aa[i] + c_b * b[i] + c_ab * ab[i];
            }
        }
        Density::DoubleWell { kappa } => {
            for i in 0..m {
                out[i] = kappa * (2.0 * qa_b * aa[i] + (q - 1.0) * ab[i]);
            }
        }
    }
}

/// Flux field `Phi(Du)` over all sites of an operator.
pub fn flux_field(params: &EnergyParams, grad: &MatrixField) -> MatrixField {
    let mut out = MatrixField::zeros(grad.dim, grad.num_sites());
    let m = grad.dim * grad.dim;
    for s in 0..grad.num_sites() {
        let mut buf = vec![0.0; m];
        flux(params, s, grad.get(s), &mut buf);
        out.get_mut(s).copy_from_slice(&buf);
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyValue {
    pub total: f64,
    pub density_part: f64,
    pub load_part: f64,
}

/// Total energy `sum_sites W(Du) h^n - sum_nodes g . u h^n`.
pub fn eval_energy(
    op: &dyn GradOp,
    params: &EnergyParams,
    u: &Field,
    load: Option<&Field>,
) -> EnergyValue {
    let grad = op.gradient(u);
    let w = op.site_weight();
    let mut density_part = 0.0;
    for s in 0..grad.num_sites() {
        density_part += density_value(params, s, grad.get(s));
    }
    density_part *= w;
    let load_part = load.map_or(0.0, |g| {
        w * u.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>()
    });
    EnergyValue {
        total: density_part - load_part,
        density_part,
        load_part,
    }
}

/// Gradient of the energy with respect to nodal values:
/// `h^n (D^T Phi(Du) - g)` on every node. Restricting to the operator's
/// degrees of freedom gives the first-order optimality residual.
pub fn first_variation(
    op: &dyn GradOp,
    params: &EnergyParams,
    u: &Field,
    load: Option<&Field>,
) -> Field {
    let grad = op.gradient(u);
    let phi = flux_field(params, &grad);
    let mut out = Field::zeros(op.grid());
    op.apply_transpose(&phi, &mut out);
    let w = op.site_weight();
    out.scale(w);
    if let Some(g) = load {
        out.axpy(-w, g);
    }
    out
}
