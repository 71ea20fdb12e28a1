use std::f64::consts::PI;

use num_complex::Complex64;

use super::AtomicMeasure;
use crate::error::{Error, Result};

/// A point of the complex plane; solver inputs must lie in the upper
/// half-plane.
pub type ComplexPoint = Complex64;

fn check_upper(z: ComplexPoint) -> Result<()> {
    if !(z.im > 0.0) || !z.re.is_finite() || !z.im.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "z = {z} must lie in the upper half-plane"
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// Support edges `((1 − √γ)², (1 + √γ)²)` of the Marchenko–Pastur law.
pub fn mp_edges(gamma: f64) -> (f64, f64) {
    let r = gamma.sqrt();
    ((1.0 - r).powi(2), (1.0 + r).powi(2))
}

/// Density of the absolutely continuous part of the Marchenko–Pastur law.
/// For `γ > 1` the point mass `1 − 1/γ` at zero is not included.
pub fn mp_density(gamma: f64, x: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let (a, b) = mp_edges(gamma);
    if x <= a || x >= b || x <= 0.0 {
        return Ok(0.0);
    }
    Ok(((b - x) * (x - a)).sqrt() / (2.0 * PI * x * gamma))
}

/// Closed-form Marchenko–Pastur Stieltjes transform
/// `(1 − γ − z + √((1 + γ − z)² − 4γ)) / (2γz)`.
///
/// The square root is taken as `√(z − a) √(z − b)` with principal branches,
/// which is analytic off `[a, b]` and behaves like `z` at infinity.
pub fn mp_stieltjes_closed(gamma: f64, z: ComplexPoint) -> Result<Complex64> {
    check_gamma(gamma)?;
    check_upper(z)?;
    let (a, b) = mp_edges(gamma);
    let root = (z - a).sqrt() * (z - b).sqrt();
    Ok((1.0 - gamma - z + root) / (2.0 * gamma * z))
}

/// Semicircle density `√(4 − x²) / 2π` on `[−2, 2]`.
pub fn semicircle_density(x: f64) -> f64 {
    if x.abs() >= 2.0 {
        0.0
    } else {
        (4.0 - x * x).sqrt() / (2.0 * PI)
    }
}

/// `(√(z² − 4) − z) / 2`, with `√(z² − 4) = √(z − 2) √(z + 2)`.
pub fn semicircle_stieltjes(z: ComplexPoint) -> Result<Complex64> {
    check_upper(z)?;
    Ok(((z - 2.0).sqrt() * (z + 2.0).sqrt() - z) / 2.0)
}

/// Iteration controls for the fixed-point solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Weight of the new iterate in `s ← (1 − d) s + d Φ(s)`.
    pub damping: f64,
    /// Relative step size at which iteration stops.
    pub step_tolerance: f64,
    /// Relative residual `|s − Φ(s)| / max(1, |s|)` required on exit.
    pub residual_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            step_tolerance: 1e-12,
            residual_tolerance: 1e-10,
            max_iterations: 10_000,
        }
    }
}

fn relative(v: f64, s: Complex64) -> f64 {
    v / s.norm().max(1.0)
}

/// Solves `s = Φ(s)` in the upper half-plane.
///
/// Damped iteration from `s0`; if it stalls (near the real axis the map is
/// barely contracting) the last iterate is polished with Newton steps that
/// never leave the upper half-plane.
fn fixed_point(
    what: &'static str,
    s0: Complex64,
    phi: impl Fn(Complex64) -> Complex64,
    dphi: impl Fn(Complex64) -> Complex64,
    opts: &SolverOptions,
) -> Result<Complex64> {
    let residual = |s: Complex64| relative((s - phi(s)).norm(), s);
    let d = opts.damping;
    let mut s = s0;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let next = (1.0 - d) * s + d * phi(s);
        iterations += 1;
        if !next.re.is_finite() || !next.im.is_finite() {
            break;
        }
        let step = relative((next - s).norm(), s);
        s = next;
        if step <= opts.step_tolerance {
            break;
        }
    }
    if s.im > 0.0 && residual(s) <= opts.residual_tolerance {
        return Ok(s);
    }

    // Newton polish on F(s) = s − Φ(s).
    if !(s.im > 0.0) || !s.re.is_finite() {
        s = s0;
    }
    let mut res = residual(s);
    for _ in 0..200 {
        let f = s - phi(s);
        let df = Complex64::new(1.0, 0.0) - dphi(s);
        if df.norm() == 0.0 {
            break;
        }
        let full = f / df;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = s - lambda * full;
            if cand.im > 0.0 && cand.re.is_finite() {
                let r = residual(cand);
                if r < res || r <= opts.residual_tolerance {
                    s = cand;
                    res = r;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted || res <= opts.residual_tolerance * 1e-3 {
            break;
        }
    }
    if s.im > 0.0 && res <= opts.residual_tolerance {
        Ok(s)
    } else {
        Err(Error::NoConvergence {
            what,
            iterations: opts.max_iterations,
            residual: res,
        })
    }
}

/// Runs [`fixed_point`] at `z`; if that fails, walks down from a point high
/// above `z` along the vertical line, warm-starting each step.
fn continued(
    what: &'static str,
    z: ComplexPoint,
    phi: impl Fn(Complex64, Complex64) -> Complex64,
    dphi: impl Fn(Complex64, Complex64) -> Complex64,
    opts: &SolverOptions,
) -> Result<Complex64> {
    let direct = fixed_point(what, -1.0 / z, |u| phi(z, u), |u| dphi(z, u), opts);
    if direct.is_ok() {
        return direct;
    }
    let mut heights = vec![z.im];
    while *heights.last().unwrap() < 4.0 {
        let h = heights.last().unwrap() * 2.0;
        heights.push(h);
    }
    heights.reverse();
    let mut u = -1.0 / Complex64::new(z.re, heights[0]);
    for &h in &heights {
        let w = Complex64::new(z.re, h);
        u = fixed_point(what, u, |v| phi(w, v), |v| dphi(w, v), opts)?;
    }
    Ok(u)
}

/// Stieltjes transform of `F_{γ,H}`: the solution with `im s > 0` of
///
/// `s = ∫ dH(t) / (t (1 − γ − γ z s) − z)`.
///
/// Solved through the companion transform `s̲ = −(1 − γ)/z + γ s`, which
/// satisfies `s̲ = −1 / (z − γ ∫ t dH(t) / (1 + t s̲))`; then
/// `s = −z⁻¹ ∫ dH(t) / (1 + t s̲)`.
pub fn solve_stieltjes(
    gamma: f64,
    h: &AtomicMeasure,
    z: ComplexPoint,
    opts: &SolverOptions,
) -> Result<Complex64> {
    check_gamma(gamma)?;
    check_upper(z)?;
    let atoms = h.atoms();
    let inner = |z: Complex64, u: Complex64| {
        z - gamma * atoms.iter().map(|&(t, w)| w * t / (1.0 + t * u)).sum::<Complex64>()
    };
    let phi = |z: Complex64, u: Complex64| -1.0 / inner(z, u);
    let dphi = |z: Complex64, u: Complex64| {
        let d = inner(z, u);
        gamma * atoms.iter().map(|&(t, w)| w * t * t / (1.0 + t * u).powi(2)).sum::<Complex64>()
            / (d * d)
    };
    let u = continued("stieltjes fixed point", z, phi, dphi, opts)?;
    let s = -atoms.iter().map(|&(t, w)| w / (1.0 + t * u)).sum::<Complex64>() / z;
    if !(s.im > 0.0) {
        return Err(Error::NoConvergence {
            what: "stieltjes transform",
            iterations: 0,
            residual: s.im,
        });
    }
    Ok(s)
}

/// Stieltjes transform of the `γ = 0` limit law: first solve
/// `s̃ = −∫ t dH(t) / (z + t s̃)`, then `s = −∫ dH(t) / (z + t s̃)`.
pub fn solve_stieltjes_zero_gamma(
    h: &AtomicMeasure,
    z: ComplexPoint,
    opts: &SolverOptions,
) -> Result<Complex64> {
    check_upper(z)?;
    let atoms = h.atoms();
    let phi = |z: Complex64, u: Complex64| {
        -atoms.iter().map(|&(t, w)| w * t / (z + t * u)).sum::<Complex64>()
    };
    let dphi = |z: Complex64, u: Complex64| {
        atoms.iter().map(|&(t, w)| w * t * t / (z + t * u).powi(2)).sum::<Complex64>()
    };
    let companion = continued("companion fixed point", z, phi, dphi, opts)?;
    let s = -atoms.iter().map(|&(t, w)| w / (z + t * companion)).sum::<Complex64>();
    if !(s.im > 0.0) {
        return Err(Error::NoConvergence {
            what: "zero-gamma transform",
            iterations: 0,
            residual: s.im,
        });
    }
    Ok(s)
}

/// `s̲(z) = −(1 − γ)/z + γ s(z)`.
pub fn underline_s(gamma: f64, z: ComplexPoint, s: Complex64) -> Complex64 {
    -(1.0 - gamma) / z + gamma * s
}

/// Residual of the inverse form `z = −1/s̲ + γ ∫ t dH(t) / (1 + t s̲)`.
pub fn companion_residual(gamma: f64, h: &AtomicMeasure, z: ComplexPoint, s: Complex64) -> f64 {
    let u = underline_s(gamma, z, s);
    let rhs = -1.0 / u
        + gamma
            * h.atoms()
                .iter()
                .map(|&(t, w)| w * t / (1.0 + t * u))
                .sum::<Complex64>();
    (z - rhs).norm()
}
