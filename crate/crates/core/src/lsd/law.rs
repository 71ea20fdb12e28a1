use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::solver::{
    mp_density, mp_edges, mp_stieltjes_closed, semicircle_density, semicircle_stieltjes,
    solve_stieltjes, solve_stieltjes_zero_gamma, SolverOptions,
};
use super::AtomicMeasure;
use crate::error::{Error, Result};
use crate::linalg::Cdf;

/// Default imaginary offset for Stieltjes inversion.
pub const DEFAULT_ETA: f64 = 1e-4;

/// Which limit law a [`LimitLaw`] represents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawKind {
    /// Marchenko–Pastur law with ratio `gamma`.
    Mp { gamma: f64 },
    /// Semicircle law on `[−2, 2]`.
    Semicircle,
    /// `F_{γ,H}` for `p/n → γ > 0`.
    General { gamma: f64, h: AtomicMeasure },
    /// Limit of `√(n/p)(R − Γ)` for `p/n → 0`.
    GeneralZeroGamma { h: AtomicMeasure },
}

impl LawKind {
    /// Atom of the limit law, if any: mass `max(1 − 1/γ, H({0}))` at zero.
    pub fn point_mass(&self) -> Option<(f64, f64)> {
        let zero_atom = |h: &AtomicMeasure| {
            h.atoms()
                .iter()
                .filter(|a| a.0 == 0.0)
                .map(|a| a.1)
                .sum::<f64>()
        };
        let mass = match self {
            LawKind::Mp { gamma } => (1.0 - 1.0 / gamma).max(0.0),
            LawKind::General { gamma, h } => (1.0 - 1.0 / gamma).max(zero_atom(h)),
            LawKind::GeneralZeroGamma { h } => zero_atom(h),
            LawKind::Semicircle => 0.0,
        };
        (mass > 0.0).then_some((0.0, mass))
    }

    fn validate(&self) -> Result<()> {
        match self {
            LawKind::Mp { gamma } | LawKind::General { gamma, .. } if !(*gamma > 0.0) => Err(
                Error::InvalidParameter(format!("gamma must be positive, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }

    /// Stieltjes transform at `z ∈ C⁺`.
    pub fn stieltjes(&self, z: Complex64, opts: &SolverOptions) -> Result<Complex64> {
        match self {
            LawKind::Mp { gamma } => mp_stieltjes_closed(*gamma, z),
            LawKind::Semicircle => semicircle_stieltjes(z),
            LawKind::General { gamma, h } => solve_stieltjes(*gamma, h, z, opts),
            LawKind::GeneralZeroGamma { h } => solve_stieltjes_zero_gamma(h, z, opts),
        }
    }

    /// Support of the continuous part when it is known analytically.
    pub fn exact_support(&self) -> Option<(f64, f64)> {
        match self {
            LawKind::Mp { gamma } => Some(mp_edges(*gamma)),
            LawKind::Semicircle => Some((-2.0, 2.0)),
            LawKind::General { gamma, h } => Some(support_edges(*gamma, h)),
            LawKind::GeneralZeroGamma { .. } => None,
        }
    }

    /// A grid covering the support with a 5% margin on each side.
    pub fn default_grid(&self, count: usize) -> Grid {
        let (lo, hi) = match (self, self.exact_support()) {
            (_, Some(s)) => s,
            (LawKind::GeneralZeroGamma { h }, None) => {
                let r = 2.0 * h.hull().0.abs().max(h.hull().1.abs());
                (-r, r)
            }
            _ => unreachable!(),
        };
        let margin = 0.05 * (hi - lo).max(1e-3);
        Grid {
            lo: lo - margin,
            hi: hi + margin,
            count,
        }
    }
}

/// Support edges `[a, b]` of the continuous part of `F_{γ,H}`.
///
/// On the real line outside the support, `x ↦ −1/s̲(x)` inverts to
/// `ψ(α) = α + γ ∫ tα/(α − t) dH(t)`; the edges are the critical values of
/// `ψ`: the minimum beyond the largest atom and the maximum left of the
/// smallest positive atom (or on the negative axis when `γ H((0, ∞)) > 1`).
pub fn support_edges(gamma: f64, h: &AtomicMeasure) -> (f64, f64) {
    let positive: Vec<(f64, f64)> = h.atoms().iter().copied().filter(|a| a.0 > 0.0).collect();
    if positive.is_empty() {
        return (0.0, 0.0);
    }
    let t_min = positive[0].0;
    let t_max = positive.last().unwrap().0;
    let psi = |a: f64| h.psi(a, gamma);
    let dpsi = |a: f64| h.psi_prime(a, gamma);

    let bisect = |mut lo: f64, mut hi: f64, increasing: bool| -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (dpsi(mid) > 0.0) == increasing {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };

    // ψ' rises from −∞ at t_max to 1 at +∞
    let mut hi = 2.0 * t_max + 1.0;
    while dpsi(hi) <= 0.0 {
        hi *= 2.0;
    }
    let right = psi(bisect(t_max * (1.0 + 1e-15), hi, true));

    let mass: f64 = positive.iter().map(|a| a.1).sum();
    let left = if gamma * mass < 1.0 {
        // ψ' falls from 1 − γ·mass at 0 to −∞ at t_min
        psi(bisect(0.0, t_min * (1.0 - 1e-15), false))
    } else if gamma * mass > 1.0 {
        // ψ' falls from 1 at −∞ to 1 − γ·mass < 0 at 0
        let mut lo = -(t_max + 1.0);
        while dpsi(lo) <= 0.0 {
            lo *= 2.0;
        }
        psi(bisect(lo, 0.0, false))
    } else {
        0.0
    };
    (left.max(0.0), right)
}

/// Uniform evaluation grid `lo, …, hi` with `count` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Grid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if self.count < 2 || !(self.hi > self.lo) {
            return Err(Error::InvalidParameter(format!(
                "grid needs count >= 2 and hi > lo, got {self:?}"
            )));
        }
        let step = (self.hi - self.lo) / (self.count - 1) as f64;
        Ok((0..self.count).map(|k| self.lo + step * k as f64).collect())
    }
}

/// JSON metadata written next to a density table.
#[derive(Debug, Clone, Serialize)]
pub struct LawHeader {
    #[serde(flatten)]
    pub kind: LawKind,
    pub eta: Option<f64>,
    pub point_masses: Vec<(f64, f64)>,
    pub support: (f64, f64),
    pub total_mass: f64,
    pub grid_points: usize,
}

/// A limit spectral distribution tabulated on a grid.
///
/// The absolutely continuous part is stored as a density table with its
/// trapezoid-integrated CDF; an optional atom is kept separately.
#[derive(Debug, Clone)]
pub struct LimitLaw {
    kind: LawKind,
    x: Vec<f64>,
    density: Vec<f64>,
    cumulative: Vec<f64>,
    point_mass: Option<(f64, f64)>,
    eta: Option<f64>,
    support: (f64, f64),
}

fn trapezoid_cumulative(x: &[f64], f: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(x.len());
    out.push(0.0);
    for k in 1..x.len() {
        acc += 0.5 * (f[k] + f[k - 1]) * (x[k] - x[k - 1]);
        out.push(acc);
    }
    out
}

impl LimitLaw {
    fn assemble(kind: LawKind, x: Vec<f64>, density: Vec<f64>, eta: Option<f64>, support: (f64, f64)) -> Self {
        let cumulative = trapezoid_cumulative(&x, &density);
        let point_mass = kind.point_mass();
        Self {
            kind,
            x,
            density,
            cumulative,
            point_mass,
            eta,
            support,
        }
    }

    /// Marchenko–Pastur law tabulated from its closed-form density on
    /// `count` points spanning the support.
    pub fn marchenko_pastur(gamma: f64, count: usize) -> Result<Self> {
        let kind = LawKind::Mp { gamma };
        kind.validate()?;
        let (a, b) = mp_edges(gamma);
        let x = Grid { lo: a, hi: b, count }.points()?;
        let density = x
            .iter()
            .map(|&v| mp_density(gamma, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(kind, x, density, None, (a, b)))
    }

    /// Semicircle law tabulated from its closed-form density.
    pub fn semicircle(count: usize) -> Result<Self> {
        let x = Grid {
            lo: -2.0,
            hi: 2.0,
            count,
        }
        .points()?;
        let density = x.iter().map(|&v| semicircle_density(v)).collect();
        Ok(Self::assemble(LawKind::Semicircle, x, density, None, (-2.0, 2.0)))
    }

    /// Recovers the density by Stieltjes inversion,
    /// `f(x_k) = max(0, im s(x_k + iη) / π)`, after removing the
    /// contribution of the atom at zero (if any).
    pub fn from_stieltjes(kind: LawKind, grid: Grid, eta: f64, opts: &SolverOptions) -> Result<Self> {
        kind.validate()?;
        if !(eta > 0.0) {
            return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
        }
        let x = grid.points()?;
        let atom = kind.point_mass();
        let density = x
            .iter()
            .map(|&v| {
                let z = Complex64::new(v, eta);
                let mut s = kind.stieltjes(z, opts)?;
                if let Some((loc, w)) = atom {
                    s -= w / (loc - z);
                }
                Ok((s.im / std::f64::consts::PI).max(0.0))
            })
            .collect::<Result<Vec<_>>>()?;
        let support = match kind.exact_support() {
            Some(s) => s,
            None => threshold_support(&x, &density),
        };
        Ok(Self::assemble(kind, x, density, Some(eta), support))
    }

    pub fn kind(&self) -> &LawKind {
        &self.kind
    }

    pub fn grid(&self) -> &[f64] {
        &self.x
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn point_mass(&self) -> Option<(f64, f64)> {
        self.point_mass
    }

    /// Integral of the density plus the atom.
    pub fn total_mass(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0) + self.point_mass.map_or(0.0, |p| p.1)
    }

    fn continuous_cdf(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x < self.x[0] {
            return 0.0;
        }
        if x >= self.x[n - 1] {
            return self.cumulative[n - 1];
        }
        let k = self.x.partition_point(|&v| v <= x);
        let (x0, x1) = (self.x[k - 1], self.x[k]);
        let (c0, c1) = (self.cumulative[k - 1], self.cumulative[k]);
        c0 + (c1 - c0) * (x - x0) / (x1 - x0)
    }

    /// `inf {x : F(x) ≥ q}`; `q = 0` and `q = 1` map to the ends of the
    /// support.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidParameter(format!("quantile level {q} outside [0, 1]")));
        }
        let (lo, hi) = Cdf::support(self);
        if q == 0.0 {
            return Ok(lo);
        }
        if q == 1.0 {
            return Ok(hi);
        }
        if let Some((loc, _)) = self.point_mass {
            if self.cdf_left(loc) < q && q <= self.cdf(loc) {
                return Ok(loc);
            }
        }
        let k = self.x.partition_point(|&v| self.cdf(v) < q);
        if k == self.x.len() {
            return Ok(hi);
        }
        if k == 0 {
            return Ok(self.x[0].clamp(lo, hi));
        }
        let (x0, x1) = (self.x[k - 1], self.x[k]);
        let (f0, f1) = (self.cdf(x0), self.cdf(x1));
        let x = if f1 > f0 {
            x0 + (x1 - x0) * (q - f0) / (f1 - f0)
        } else {
            x1
        };
        Ok(x.clamp(lo, hi))
    }

    pub fn header(&self) -> LawHeader {
        LawHeader {
            kind: self.kind.clone(),
            eta: self.eta,
            point_masses: self.point_mass.into_iter().collect(),
            support: Cdf::support(self),
            total_mass: self.total_mass(),
            grid_points: self.x.len(),
        }
    }

    /// Two-column `x,density` table.
    pub fn write_density_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "density"])?;
        for (x, f) in self.x.iter().zip(&self.density) {
            w.write_record([format!("{x:.12e}"), format!("{f:.12e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First and last grid points where the density exceeds 0.1% of its peak.
fn threshold_support(x: &[f64], f: &[f64]) -> (f64, f64) {
    let peak = f.iter().copied().fold(0.0, f64::max);
    let cut = 1e-3 * peak;
    let first = f.iter().position(|&v| v > cut).unwrap_or(0);
    let last = f.iter().rposition(|&v| v > cut).unwrap_or(x.len() - 1);
    (x[first], x[last])
}

impl Cdf for LimitLaw {
    fn cdf(&self, x: f64) -> f64 {
        let atom = self.point_mass.filter(|p| x >= p.0).map_or(0.0, |p| p.1);
        (self.continuous_cdf(x) + atom).min(1.0)
    }

    fn cdf_left(&self, x: f64) -> f64 {
        let atom = self.point_mass.filter(|p| x > p.0).map_or(0.0, |p| p.1);
        (self.continuous_cdf(x) + atom).min(1.0)
    }

    fn jump_points(&self) -> Vec<f64> {
        self.point_mass.map(|p| p.0).into_iter().collect()
    }

    fn support(&self) -> (f64, f64) {
        match self.point_mass {
            Some((loc, _)) => (self.support.0.min(loc), self.support.1.max(loc)),
            None => self.support,
        }
    }
}
