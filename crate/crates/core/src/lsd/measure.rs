use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of an [`AtomicMeasure`].
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Finite discrete probability measure `Σ_j w_j δ_{t_j}`.
///
/// Atoms are kept sorted by location with strictly positive weights summing
/// to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct AtomicMeasure {
    atoms: Vec<(f64, f64)>,
}

impl AtomicMeasure {
    /// Builds a measure from `(location, weight)` pairs whose weights already
    /// sum to one. Repeated locations are merged.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidParameter("measure has no atoms".into()));
        }
        for &(t, w) in &atoms {
            if !t.is_finite() || !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "atom ({t}, {w}) needs a finite location and positive weight"
                )));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidParameter(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let mut atoms = atoms;
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (t, w) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == t => last.1 += w,
                _ => merged.push((t, w)),
            }
        }
        Ok(Self { atoms: merged })
    }

    /// Like [`new`](Self::new) but rescales the weights to total mass one.
    pub fn normalized(atoms: Vec<(f64, f64)>) -> Result<Self> {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidParameter("total weight must be positive".into()));
        }
        Self::new(atoms.into_iter().map(|(t, w)| (t, w / total)).collect())
    }

    /// Unit mass at `t`.
    pub fn dirac(t: f64) -> Self {
        Self {
            atoms: vec![(t, 1.0)],
        }
    }

    /// Uniform measure on a list of values (e.g. eigenvalues).
    pub fn empirical(values: &[f64]) -> Result<Self> {
        let w = 1.0 / values.len() as f64;
        Self::normalized(values.iter().map(|&t| (t, w)).collect())
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// Smallest and largest atom.
    pub fn hull(&self) -> (f64, f64) {
        (self.atoms[0].0, self.atoms.last().unwrap().0)
    }

    /// Right-continuous CDF `H(x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        let mass: f64 = self.atoms.iter().take_while(|a| a.0 <= x).map(|a| a.1).sum();
        mass.min(1.0)
    }

    /// `∫ t^k dH(t)`.
    pub fn moment(&self, k: i32) -> f64 {
        self.atoms.iter().map(|&(t, w)| w * t.powi(k)).sum()
    }

    /// `ψ(α) = α + γ ∫ tα/(α − t) dH(t)`, without support checks.
    pub fn psi(&self, alpha: f64, gamma: f64) -> f64 {
        alpha
            + gamma
                * self
                    .atoms
                    .iter()
                    .map(|&(t, w)| w * t * alpha / (alpha - t))
                    .sum::<f64>()
    }

    /// `ψ'(α) = 1 − γ ∫ t²/(α − t)² dH(t)`, without support checks.
    pub fn psi_prime(&self, alpha: f64, gamma: f64) -> f64 {
        1.0 - gamma
            * self
                .atoms
                .iter()
                .map(|&(t, w)| w * t * t / (alpha - t).powi(2))
                .sum::<f64>()
    }

    /// Distance from `x` to the nearest atom.
    pub fn distance_to_support(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .map(|a| (a.0 - x).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<Vec<(f64, f64)>> for AtomicMeasure {
    type Error = Error;

    fn try_from(atoms: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(atoms)
    }
}

impl From<AtomicMeasure> for Vec<(f64, f64)> {
    fn from(m: AtomicMeasure) -> Self {
        m.atoms
    }
}
