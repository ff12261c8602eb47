//! Truncated Riesz kernels: cutoff profiles, normalizing constants,
//! pointwise evaluation, radial mass and rescalings.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma as gamma_fn;

use crate::quad::adaptive_simpson;
use crate::{Error, Result};

/// Shape of the cutoff transition on `[b0*delta, delta]`.
///
/// Both variants are polynomial smoothsteps, decreasing from the plateau
/// value to zero with at least two vanishing one-sided derivatives at the
/// junctions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `6t^5 - 15t^4 + 10t^3` (C^2 junctions). The default.
    #[default]
    Quintic,
    /// `-20t^7 + 70t^6 - 84t^5 + 35t^4` (C^3 junctions).
    Septic,
}

impl Profile {
    /// Evaluate the rising smoothstep on `t in [0, 1]`.
    fn smoothstep(self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match self {
            Profile::Quintic => t * t * t * (10.0 + t * (-15.0 + 6.0 * t)),
            Profile::Septic => t * t * t * t * (35.0 + t * (-84.0 + t * (70.0 - 20.0 * t))),
        }
    }
}

/// Radial cutoff `w_delta`: plateau value `a0` on `[0, b0*delta]`, smooth
/// monotone transition to zero at `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub b0: f64,
    pub a0: f64,
    #[serde(default)]
    pub profile: Profile,
}

impl Default for CutoffSpec {
    fn default() -> Self {
        CutoffSpec {
            b0: 0.5,
            a0: 1.0,
            profile: Profile::Quintic,
        }
    }
}

impl CutoffSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.b0 > 0.0 && self.b0 < 1.0) {
            return Err(Error::domain(format!("b0 must lie in (0,1), got {}", self.b0)));
        }
        if !(self.a0 > 0.0) {
            return Err(Error::domain(format!("a0 must be positive, got {}", self.a0)));
        }
        Ok(())
    }
}

/// Evaluate the cutoff profile at radius `r` for horizon `delta`.
pub fn cutoff_eval(spec: &CutoffSpec, delta: f64, r: f64) -> f64 {
    debug_assert!(r >= 0.0);
    let plateau_end = spec.b0 * delta;
    if r <= plateau_end {
        spec.a0
    } else if r >= delta {
        0.0
    } else {
        let t = (r - plateau_end) / (delta - plateau_end);
        spec.a0 * (1.0 - spec.profile.smoothstep(t))
    }
}

/// How the kernel depends on the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    /// `rho(x) = c_{n,s} w_delta(x) / |x|^{n-1+s}` directly at horizon `delta`.
    #[default]
    FixedHorizon,
    /// `rho_delta(x) = delta^{-n} rho_1(x / delta)`, the re-escalated family.
    RescaledFromUnit,
}

/// Full kernel parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    /// Spatial dimension, 1 or 2.
    pub dim: usize,
    /// Fractional order in (0, 1).
    pub s: f64,
    /// Horizon of interaction.
    pub delta: f64,
    pub cutoff: CutoffSpec,
    #[serde(default)]
    pub mode: KernelMode,
    /// When set, the cutoff amplitude has been scaled so the total kernel
    /// mass equals this value.
    #[serde(default)]
    pub mass_target: Option<f64>,
}

impl KernelSpec {
    pub fn new(dim: usize, s: f64, delta: f64) -> Self {
        KernelSpec {
            dim,
            s,
            delta,
            cutoff: CutoffSpec::default(),
            mode: KernelMode::FixedHorizon,
            mass_target: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::domain(format!("dimension must be 1 or 2, got {}", self.dim)));
        }
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(Error::domain(format!("s must lie in (0,1), got {}", self.s)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::domain(format!("delta must be positive, got {}", self.delta)));
        }
        self.cutoff.validate()
    }
}

/// The Riesz-potential normalization `gamma(s) = pi^{n/2} 2^s G(s/2) / G((n-s)/2)`
/// where `G` is Euler's gamma function.
pub fn gamma_const(n: usize, s: f64) -> Result<f64> {
    if !(s > 0.0 && s < n as f64) {
        return Err(Error::domain(format!(
            "gamma_const requires 0 < s < n (n = {n}, s = {s})"
        )));
    }
    let n_f = n as f64;
    Ok(std::f64::consts::PI.powf(0.5 * n_f) * 2f64.powf(s) * gamma_fn(0.5 * s)
        / gamma_fn(0.5 * (n_f - s)))
}

/// The kernel prefactor `c_{n,s} = (n + s - 1) / gamma(1 - s)`.
pub fn riesz_normalizer(n: usize, s: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::domain(format!("riesz_normalizer requires s in (0,1), got {s}")));
    }
    let g = gamma_const(n, 1.0 - s)?;
    Ok((n as f64 + s - 1.0) / g)
}

/// Radial kernel value at radius `r > 0` (zero for `r >= delta`).
pub fn radial_eval(spec: &KernelSpec, r: f64) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::SingularInput(
            "kernel is unbounded at the origin".into(),
        ));
    }
    let n = spec.dim;
    let c = riesz_normalizer(n, spec.s)?;
    let exponent = n as f64 - 1.0 + spec.s;
    match spec.mode {
        KernelMode::FixedHorizon => {
            if r >= spec.delta {
                return Ok(0.0);
            }
            Ok(c * cutoff_eval(&spec.cutoff, spec.delta, r) / r.powf(exponent))
        }
        KernelMode::RescaledFromUnit => {
            let t = r / spec.delta;
            if t >= 1.0 {
                return Ok(0.0);
            }
            // delta^{-n} * rho_1(r/delta)
            let rho1 = c * cutoff_eval(&spec.cutoff, 1.0, t) / t.powf(exponent);
            Ok(rho1 / spec.delta.powi(n as i32))
        }
    }
}

/// Kernel value at an offset vector `x != 0`.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64]) -> Result<f64> {
    if x.len() != spec.dim {
        return Err(Error::domain(format!(
            "offset has {} components, kernel dimension is {}",
            x.len(),
            spec.dim
        )));
    }
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    radial_eval(spec, r)
}

/// Surface measure of the unit sphere in `R^n`.
pub fn unit_sphere_measure(n: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(0.5 * n as f64) / gamma_fn(0.5 * n as f64)
}

/// Total kernel mass over its support ball, by radial quadrature.
///
/// The plateau part of the integral is evaluated in closed form, the
/// transition part by adaptive quadrature at 1e-12 absolute tolerance, so
/// the relative error is far below the 1e-10 contract.
pub fn kernel_mass(spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    let n = spec.dim;
    let s = spec.s;
    let c = riesz_normalizer(n, s)?;
    let surface = unit_sphere_measure(n);
    // In rescaled mode the mass is horizon-invariant and equals the mass of
    // the unit-horizon kernel; in fixed mode integrate up to delta.
    let horizon = match spec.mode {
        KernelMode::FixedHorizon => spec.delta,
        KernelMode::RescaledFromUnit => 1.0,
    };
    let plateau_end = spec.cutoff.b0 * horizon;
    // r^{n-1} * rho(r) = c w(r) r^{-s}
    let plateau = spec.cutoff.a0 * plateau_end.powf(1.0 - s) / (1.0 - s);
    let cutoff = spec.cutoff;
    let transition = adaptive_simpson(
        &|r: f64| cutoff_eval(&cutoff, horizon, r) * r.powf(-s),
        plateau_end,
        horizon,
        1e-12,
    )?;
    Ok(surface * c * (plateau + transition))
}

/// Return a copy of the spec whose kernel mass equals `target`, realized by
/// scaling the cutoff amplitude (mass is linear in `a0`).
pub fn normalize_mass(spec: &KernelSpec, target: f64) -> Result<KernelSpec> {
    if !(target > 0.0) {
        return Err(Error::domain(format!("mass target must be positive, got {target}")));
    }
    let mass = kernel_mass(spec)?;
    let mut out = spec.clone();
    out.cutoff.a0 *= target / mass;
    out.mass_target = Some(target);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::composite_simpson;

    const TAU: f64 = 2.0 * std::f64::consts::PI;

    #[test]
    fn gamma_const_examples() {
        // n=1, s=0.5 -> sqrt(2 pi): pi^{1/2} 2^{1/2} G(1/4)/G(1/4)
        assert!((gamma_const(1, 0.5).unwrap() - TAU.sqrt()).abs() < 1e-12);
        // n=2, s=1 -> 2 pi (gamma terms cancel by symmetry)
        assert!((gamma_const(2, 1.0).unwrap() - TAU).abs() < 1e-12);
        // n=3, s=1 -> 2 pi^2
        let expected = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
        assert!((gamma_const(3, 1.0).unwrap() - expected).abs() < 1e-11);
    }

    #[test]
    fn gamma_const_domain_errors() {
        assert!(gamma_const(1, 0.0).is_err());
        assert!(gamma_const(1, 1.0).is_err());
        assert!(gamma_const(2, -0.5).is_err());
        assert!(gamma_const(2, 2.0).is_err());
    }

    #[test]
    fn riesz_normalizer_examples() {
        // n=1, s=0.5 -> 0.5 / sqrt(2 pi)
        let c = riesz_normalizer(1, 0.5).unwrap();
        assert!((c - 0.5 / TAU.sqrt()).abs() < 1e-13);
        assert!((c - 0.1994711).abs() < 1e-6);
        // n=2, s=0.5 -> 1.5 / (pi 2^{1/2} G(1/4)/G(3/4))
        let g = std::f64::consts::PI * 2f64.sqrt() * gamma_fn(0.25) / gamma_fn(0.75);
        assert!((riesz_normalizer(2, 0.5).unwrap() - 1.5 / g).abs() < 1e-13);
    }

    #[test]
    fn riesz_normalizer_vanishes_linearly_near_one() {
        // c_{n,s} ~ n (1 - s) / |S^{n-1}| as s -> 1; this linear decay is what
        // keeps the kernel mass finite (and tending to n) in the local limit
        for n in [1usize, 2] {
            let sphere = unit_sphere_measure(n);
            let mut prev_err = f64::INFINITY;
            for s in [0.9, 0.99, 0.999, 0.9999] {
                let c = riesz_normalizer(n, s).unwrap();
                let ratio = c * sphere / (n as f64 * (1.0 - s));
                let err = (ratio - 1.0).abs();
                assert!(err < prev_err, "ratio should approach 1 (n={n}, s={s}, ratio={ratio})");
                prev_err = err;
            }
            assert!(prev_err < 1e-3, "asymptotic ratio off by {prev_err} at s=0.9999 (n={n})");
        }
    }

    #[test]
    fn cutoff_plateau_support_and_monotone() {
        let spec = CutoffSpec::default();
        let delta = 0.8;
        assert_eq!(cutoff_eval(&spec, delta, 0.0), 1.0);
        assert_eq!(cutoff_eval(&spec, delta, spec.b0 * delta * 0.5), 1.0);
        assert_eq!(cutoff_eval(&spec, delta, delta), 0.0);
        assert_eq!(cutoff_eval(&spec, delta, delta * 1.5), 0.0);
        let mut prev = f64::INFINITY;
        for k in 0..=2000 {
            let r = 1.2 * delta * k as f64 / 2000.0;
            let v = cutoff_eval(&spec, delta, r);
            assert!(v <= prev + 1e-15);
            assert!((0.0..=spec.a0).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn cutoff_transition_is_c2_at_junctions() {
        // one-sided first and second differences vanish at both junctions
        for profile in [Profile::Quintic, Profile::Septic] {
            let spec = CutoffSpec { b0: 0.5, a0: 1.0, profile };
            let delta = 1.0;
            let e = 1e-5;
            for r0 in [spec.b0 * delta, delta] {
                let f = |r: f64| cutoff_eval(&spec, delta, r);
                let inside = |r: f64| if r0 < 0.9 { r0 + r } else { r0 - r };
                let d1 = (f(inside(2.0 * e)) - f(inside(e))) / e;
                let d2 = (f(inside(2.0 * e)) - 2.0 * f(inside(e)) + f(inside(0.0))) / (e * e);
                // d1 carries an O(e^2 f''') bias and d2 an O(e f''') bias; the
                // thresholds still separate these from a genuine C^1/C^2 break
                assert!(d1.abs() < 1e-6, "first derivative at junction {r0}: {d1}");
                assert!(d2.abs() < 5e-2, "second derivative at junction {r0}: {d2}");
            }
        }
    }

    #[test]
    fn kernel_eval_support_and_plateau_value() {
        let spec = KernelSpec::new(1, 0.5, 1.0);
        assert_eq!(kernel_eval(&spec, &[1.0]).unwrap(), 0.0);
        assert_eq!(kernel_eval(&spec, &[-2.3]).unwrap(), 0.0);
        // inside the plateau: c_{1,1/2} * r^{-1/2}
        let v = kernel_eval(&spec, &[0.1]).unwrap();
        let expected = 0.5 / TAU.sqrt() * 0.1f64.powf(-0.5);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.63079).abs() < 1e-4);
        assert!(kernel_eval(&spec, &[0.0]).is_err());
    }

    #[test]
    fn kernel_radial_symmetry() {
        let spec = KernelSpec::new(2, 0.7, 0.6);
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rng = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let r = 0.02 + 0.7 * rng();
            let theta = TAU * rng();
            let x = [r * theta.cos(), r * theta.sin()];
            let phi = TAU * rng();
            let y = [r * phi.cos(), r * phi.sin()];
            let vx = kernel_eval(&spec, &x).unwrap();
            let vy = kernel_eval(&spec, &y).unwrap();
            assert!((vx - vy).abs() <= 1e-12 * vx.abs().max(1.0));
            // sign flips
            let vz = kernel_eval(&spec, &[-x[0], x[1]]).unwrap();
            assert!((vx - vz).abs() <= 1e-13 * vx.abs().max(1.0));
        }
    }

    #[test]
    fn rescaling_identity_pointwise() {
        let delta = 0.35;
        let mut rescaled = KernelSpec::new(1, 0.4, delta);
        rescaled.mode = KernelMode::RescaledFromUnit;
        let unit = KernelSpec::new(1, 0.4, 1.0);
        for k in 1..200 {
            let x = delta * 1.1 * k as f64 / 200.0;
            let lhs = kernel_eval(&rescaled, &[x]).unwrap();
            let rhs = kernel_eval(&unit, &[x / delta]).unwrap() / delta;
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
        }
        // and in 2D
        let mut rescaled2 = KernelSpec::new(2, 0.6, delta);
        rescaled2.mode = KernelMode::RescaledFromUnit;
        let unit2 = KernelSpec::new(2, 0.6, 1.0);
        for k in 1..100 {
            let r = delta * k as f64 / 100.0;
            let x = [r * 0.6, r * 0.8];
            let lhs = kernel_eval(&rescaled2, &x).unwrap();
            let rhs = kernel_eval(&unit2, &[x[0] / delta, x[1] / delta]).unwrap() / (delta * delta);
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
        }
    }

    #[test]
    fn mass_linearity_and_normalization() {
        let spec = KernelSpec::new(2, 0.5, 0.25);
        let m = kernel_mass(&spec).unwrap();
        let mut doubled = spec.clone();
        doubled.cutoff.a0 *= 2.0;
        let m2 = kernel_mass(&doubled).unwrap();
        assert!((m2 - 2.0 * m).abs() < 1e-10 * m);

        let normalized = normalize_mass(&spec, 2.0).unwrap();
        let mn = kernel_mass(&normalized).unwrap();
        assert!((mn - 2.0).abs() < 1e-9);
        assert_eq!(normalized.mass_target, Some(2.0));
        assert_eq!(normalized.dim, spec.dim);
        assert_eq!(normalized.mode, spec.mode);
    }

    #[test]
    fn mass_regression_and_brute_force() {
        // n=1, s=0.5, delta=1, b0=0.5, a0=1, quintic profile.
        let spec = KernelSpec::new(1, 0.5, 1.0);
        let m = kernel_mass(&spec).unwrap();
        // independent brute-force radial quadrature: substitute r = t^2 to
        // remove the r^{-1/2} endpoint singularity, then a dense composite rule
        let c = 0.5 / TAU.sqrt();
        let cutoff = spec.cutoff;
        let brute = 2.0
            * c
            * composite_simpson(
                &|t: f64| cutoff_eval(&cutoff, 1.0, t * t) * 2.0, // w(r) r^{-1/2} dr, r=t^2
                0.0,
                1.0,
                1 << 16,
            );
        assert!((m - brute).abs() < 1e-10 * brute);
        // frozen regression value from the brute-force integrator
        assert!((m - 0.689600984639303).abs() < 1e-9, "mass = {m:.15}");
    }

    #[test]
    fn mass_finite_over_s_sweep() {
        for n in [1usize, 2] {
            for k in 1..20 {
                let s = k as f64 / 20.0;
                let spec = KernelSpec::new(n, s, 0.3);
                let m = kernel_mass(&spec).unwrap();
                assert!(m.is_finite() && m > 0.0, "mass must be finite for s={s}, n={n}");
            }
        }
    }
}
