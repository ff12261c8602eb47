//! Adaptive quadrature helpers used by kernel-mass evaluation and
//! near-singular operator assembly.

use crate::{Error, Result};

/// Adaptive Simpson quadrature on `[a, b]`.
///
/// `tol` is an absolute tolerance on the whole interval; the recursion
/// splits it in the usual way. Returns the integral value.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    let mut achieved = 0.0;
    let v = recurse(f, a, b, fa, fm, fb, whole, tol, 50, &mut achieved);
    if achieved > tol.max(1e-300) * 4.0 {
        return Err(Error::Quadrature {
            achieved,
            requested: tol,
        });
    }
    Ok(v)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    achieved: &mut f64,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let err = left + right - whole;
    if depth == 0 || err.abs() <= 15.0 * tol {
        *achieved += err.abs() / 15.0;
        return left + right + err / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, achieved)
        + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, achieved)
}

/// Adaptive 2-D quadrature over the rectangle `[ax, bx] x [ay, by]`,
/// realized as a nested adaptive Simpson rule.
pub fn adaptive_simpson_2d<F: Fn(f64, f64) -> f64>(
    f: &F,
    ax: f64,
    bx: f64,
    ay: f64,
    by: f64,
    tol: f64,
) -> Result<f64> {
    let inner_tol = tol / (4.0 * (bx - ax).max(1e-300));
    let g = |x: f64| -> f64 {
        adaptive_simpson(&|y| f(x, y), ay, by, inner_tol).unwrap_or_else(|_| {
            // fall back to a fixed fine composite rule on pathological slices
            composite_simpson(&|y| f(x, y), ay, by, 4096)
        })
    };
    adaptive_simpson(&g, ax, bx, tol)
}

/// Fixed composite Simpson rule with `n` (even) subintervals.
pub fn composite_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + i as f64 * h);
    }
    sum * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_polynomial_exact() {
        let v = adaptive_simpson(&|x| 3.0 * x * x, 0.0, 2.0, 1e-13).unwrap();
        assert!((v - 8.0).abs() < 1e-12);
    }

    #[test]
    fn simpson_steep_kernel_like_integrand() {
        // r^{-1/2} away from its singularity, as it appears in cell-weight
        // quadrature: the integration interval never contains the origin
        let a = 1e-6;
        let v = adaptive_simpson(&|x: f64| x.powf(-0.5), a, 1.0, 1e-10).unwrap();
        let exact = 2.0 * (1.0 - a.sqrt());
        assert!((v - exact).abs() < 1e-8, "got {v}, want {exact}");
    }

    #[test]
    fn simpson_2d_separable() {
        let v = adaptive_simpson_2d(&|x, y| x * y, 0.0, 1.0, 0.0, 2.0, 1e-12).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
    }
}
