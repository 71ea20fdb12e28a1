//! Generalized spiked correlation model `Γ = blockdiag(Λ, V)`.
//!
//! A spike `α` outside the support of the bulk law `H` is detectable when
//! `ψ'(α) > 0`; the matching sample eigenvalues of `R` then converge to
//! `ψ(α)`. Otherwise they stick to the `H(α)`-quantile of `F_{γ,H}`.

use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::MixingSpec;
use crate::error::{Error, Result};
use crate::linalg::SymmetricMatrix;
use crate::lsd::{AtomicMeasure, LimitLaw};
use crate::rng::RandomStream;

/// Distance below which a point counts as lying on an atom of `H`.
pub const SUPPORT_TOLERANCE: f64 = 1e-9;
/// Largest eigenvalue change accepted when forcing `diag(Λ) = I`.
pub const MAX_RENORMALIZATION: f64 = 1e-6;
/// Orthogonal conjugations tried before giving up on `Λ`.
pub const MAX_ATTEMPTS: u64 = 16;

fn check_off_support(alpha: f64, h: &AtomicMeasure) -> Result<()> {
    if !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("alpha must be finite, got {alpha}")));
    }
    if h.distance_to_support(alpha) <= SUPPORT_TOLERANCE {
        return Err(Error::OnSupport(alpha));
    }
    Ok(())
}

/// `ψ(α) = α + γ ∫ tα/(α − t) dH(t)`.
pub fn psi(alpha: f64, gamma: f64, h: &AtomicMeasure) -> Result<f64> {
    check_off_support(alpha, h)?;
    Ok(h.psi(alpha, gamma))
}

/// `ψ'(α) = 1 − γ ∫ t²/(α − t)² dH(t)`.
pub fn psi_prime(alpha: f64, gamma: f64, h: &AtomicMeasure) -> Result<f64> {
    check_off_support(alpha, h)?;
    Ok(h.psi_prime(alpha, gamma))
}

/// Detection thresholds `(1 − √γ, 1 + √γ)` for `H = δ₁`.
pub fn spike_threshold_delta1(gamma: f64) -> (f64, f64) {
    let r = gamma.sqrt();
    (1.0 - r, 1.0 + r)
}

/// Spikes `(α_i, m_i)` on top of a bulk law `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikedModel {
    pub spikes: Vec<(f64, usize)>,
    pub bulk: AtomicMeasure,
    pub gamma: f64,
    pub p: usize,
    /// Treat `H` as a discretized continuous law whose support is the
    /// interval between its extreme atoms.
    #[serde(default)]
    pub continuous_bulk: bool,
}

/// Predicted limit for the sample eigenvalues belonging to one spike.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikePrediction {
    pub alpha: f64,
    pub multiplicity: usize,
    /// First rank `ν + 1` (1-based) of the spike among the eigenvalues of `Γ`.
    pub rank_start: usize,
    pub rank_end: usize,
    pub detectable: bool,
    pub predicted_limit: f64,
}

impl SpikedModel {
    pub fn new(spikes: Vec<(f64, usize)>, bulk: AtomicMeasure, gamma: f64, p: usize) -> Result<Self> {
        let model = Self {
            spikes,
            bulk,
            gamma,
            p,
            continuous_bulk: false,
        };
        model.validate()?;
        Ok(model)
    }

    /// Spiked model with `V = I`, so `H = δ₁`.
    pub fn identity_bulk(spikes: Vec<(f64, usize)>, gamma: f64, p: usize) -> Result<Self> {
        Self::new(spikes, AtomicMeasure::dirac(1.0), gamma, p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.spikes.is_empty() {
            return Err(Error::InvalidParameter("no spikes given".into()));
        }
        for &(alpha, m) in &self.spikes {
            if m == 0 {
                return Err(Error::InvalidParameter(format!("spike {alpha} has multiplicity 0")));
            }
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return Err(Error::InvalidParameter(format!("spike {alpha} must be a nonnegative number")));
            }
        }
        if self.m() >= self.p {
            return Err(Error::Dimension(format!(
                "spike block size {} must be below p = {}",
                self.m(),
                self.p
            )));
        }
        if self.spikes.iter().all(|s| self.in_support(s.0)) {
            return Err(Error::InvalidParameter(
                "every spike lies in the support of the bulk law".into(),
            ));
        }
        Ok(())
    }

    /// Size `m = Σ m_i` of the spike block.
    pub fn m(&self) -> usize {
        self.spikes.iter().map(|s| s.1).sum()
    }

    pub fn in_support(&self, x: f64) -> bool {
        if self.continuous_bulk {
            let (lo, hi) = self.bulk.hull();
            x >= lo - SUPPORT_TOLERANCE && x <= hi + SUPPORT_TOLERANCE
        } else {
            self.bulk.distance_to_support(x) <= SUPPORT_TOLERANCE
        }
    }

    /// Bulk eigenvalues of `V` as atom counts summing to `p − m`, rounded by
    /// largest remainder.
    fn bulk_counts(&self) -> Vec<(f64, usize)> {
        let total = self.p - self.m();
        let raw: Vec<f64> = self.bulk.atoms().iter().map(|a| a.1 * total as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&i, &j| (raw[j] - raw[j].floor()).total_cmp(&(raw[i] - raw[i].floor())));
        let mut missing = total - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            counts[i] += 1;
            missing -= 1;
        }
        self.bulk
            .atoms()
            .iter()
            .zip(counts)
            .map(|(a, c)| (a.0, c))
            .collect()
    }

    /// Number `ν` of eigenvalues of `Γ` strictly larger than `alpha`.
    fn eigenvalues_above(&self, alpha: f64) -> usize {
        let spikes: usize = self.spikes.iter().filter(|s| s.0 > alpha).map(|s| s.1).sum();
        let bulk: usize = self.bulk_counts().iter().filter(|b| b.0 > alpha).map(|b| b.1).sum();
        spikes + bulk
    }

    /// Eigenvalues of `Λ` in decreasing order.
    pub fn block_eigenvalues(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .spikes
            .iter()
            .flat_map(|&(a, m)| std::iter::repeat(a).take(m))
            .collect();
        out.sort_by(|a, b| b.total_cmp(a));
        out
    }

    /// Mixing parameters realizing the model with `V = I`.
    pub fn mixing_spec(&self) -> Result<MixingSpec> {
        if self.bulk.atoms() != [(1.0, 1.0)] {
            return Err(Error::InvalidParameter(
                "only the identity bulk (H = δ₁) can be instantiated".into(),
            ));
        }
        let lambda = unit_diagonal_with_spectrum(&self.block_eigenvalues())?;
        let m = lambda.dim();
        let rows = (0..m).map(|i| (0..m).map(|j| lambda.get(i, j)).collect()).collect();
        Ok(MixingSpec::Spiked { lambda: rows })
    }
}

/// Classifies each spike as detectable or not and predicts its limit.
/// Spikes inside the support of `H` are skipped with a warning. `law` must
/// be `F_{γ,H}` for the model's `γ` and `H`.
pub fn classify_spikes(model: &SpikedModel, law: &LimitLaw) -> Result<Vec<SpikePrediction>> {
    model.validate()?;
    let mut out = Vec::new();
    for &(alpha, multiplicity) in &model.spikes {
        if model.in_support(alpha) {
            warn!("alpha = {alpha} lies in the support of H and is not a spike; skipped");
            continue;
        }
        let derivative = model.bulk.psi_prime(alpha, model.gamma);
        let detectable = derivative > 0.0;
        let predicted_limit = if detectable {
            model.bulk.psi(alpha, model.gamma)
        } else {
            law.quantile(model.bulk.cdf(alpha))?
        };
        let nu = model.eigenvalues_above(alpha);
        out.push(SpikePrediction {
            alpha,
            multiplicity,
            rank_start: nu + 1,
            rank_end: nu + multiplicity,
            detectable,
            predicted_limit,
        });
    }
    Ok(out)
}

/// Writes predictions with optional Monte Carlo `(mean, sd)` per spike.
/// Columns: `alpha,multiplicity,detectable,predicted_limit,mc_mean,mc_sd`.
pub fn write_predictions_csv<W: Write>(
    predictions: &[SpikePrediction],
    monte_carlo: Option<&[(f64, f64)]>,
    out: W,
) -> Result<()> {
    if let Some(mc) = monte_carlo {
        if mc.len() != predictions.len() {
            return Err(Error::Dimension(format!(
                "{} Monte Carlo summaries for {} predictions",
                mc.len(),
                predictions.len()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "multiplicity", "detectable", "predicted_limit", "mc_mean", "mc_sd"])?;
    for (i, pr) in predictions.iter().enumerate() {
        let (mean, sd) = match monte_carlo {
            Some(mc) => (format!("{:.12e}", mc[i].0), format!("{:.12e}", mc[i].1)),
            None => (String::new(), String::new()),
        };
        w.write_record([
            pr.alpha.to_string(),
            pr.multiplicity.to_string(),
            pr.detectable.to_string(),
            format!("{:.12e}", pr.predicted_limit),
            mean,
            sd,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Random orthogonal `m × m` matrix (QR of a gaussian matrix, signs fixed).
fn random_orthogonal(m: usize, stream: &mut RandomStream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(stream));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Rotates `M` in the `(i, j)` plane so that the new `M_ii` equals one.
fn rotate_to_unit(m: &mut DMatrix<f64>, i: usize, j: usize) {
    let (aii, ajj, aij) = (m[(i, i)], m[(j, j)], m[(i, j)]);
    // (a_ii − 1) + 2 t a_ij + t² (a_jj − 1) = 0, with a_ii < 1 < a_jj
    let disc = (aij * aij - (aii - 1.0) * (ajj - 1.0)).max(0.0);
    let t = (-aij + disc.sqrt()) / (ajj - 1.0);
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = c * t;
    let n = m.nrows();
    for k in 0..n {
        let (x, y) = (m[(i, k)], m[(j, k)]);
        m[(i, k)] = c * x + s * y;
        m[(j, k)] = -s * x + c * y;
    }
    for k in 0..n {
        let (x, y) = (m[(k, i)], m[(k, j)]);
        m[(k, i)] = c * x + s * y;
        m[(k, j)] = -s * x + c * y;
    }
}

/// A symmetric matrix with unit diagonal and the given eigenvalues, which
/// must be nonnegative and sum to their count.
///
/// Starts from `Q diag(λ) Qᵀ` for a seeded random orthogonal `Q` and applies
/// plane rotations that set one diagonal entry to one at a time. The
/// diagonal is then set to one exactly; if that moves the spectrum by more
/// than [`MAX_RENORMALIZATION`] another `Q` is tried.
pub fn unit_diagonal_with_spectrum(eigenvalues: &[f64]) -> Result<SymmetricMatrix> {
    let m = eigenvalues.len();
    if m == 0 {
        return Err(Error::EmptySpectrum);
    }
    if let Some(&l) = eigenvalues.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidParameter(format!("eigenvalue {l} must be nonnegative")));
    }
    let total: f64 = eigenvalues.iter().sum();
    if (total - m as f64).abs() > 1e-9 * m as f64 {
        return Err(Error::InvalidParameter(format!(
            "unit diagonal needs eigenvalues summing to {m}, got {total}"
        )));
    }
    let mut target = eigenvalues.to_vec();
    target.sort_by(|a, b| b.total_cmp(a));
    let mut worst = f64::INFINITY;
    for attempt in 0..MAX_ATTEMPTS {
        let mut stream = RandomStream::new(attempt);
        let q = random_orthogonal(m, &mut stream);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&target));
        let mut a = &q * d * q.transpose();
        for _ in 0..m {
            let low = (0..m).filter(|&i| a[(i, i)] < 1.0 - 1e-15).min_by(|&x, &y| a[(x, x)].total_cmp(&a[(y, y)]));
            let high = (0..m).filter(|&i| a[(i, i)] > 1.0 + 1e-15).max_by(|&x, &y| a[(x, x)].total_cmp(&a[(y, y)]));
            match (low, high) {
                (Some(i), Some(j)) => rotate_to_unit(&mut a, i, j),
                _ => break,
            }
        }
        let lambda = SymmetricMatrix::from_fn(m, |i, j| if i == j { 1.0 } else { 0.5 * (a[(i, j)] + a[(j, i)]) });
        let realized = lambda.eigenvalues()?;
        let shift = realized
            .iter()
            .zip(&target)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if shift < MAX_RENORMALIZATION {
            return Ok(lambda);
        }
        worst = worst.min(shift);
    }
    Err(Error::NoConvergence {
        what: "unit-diagonal spike block",
        iterations: MAX_ATTEMPTS as usize,
        residual: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::build_a;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn delta1() -> AtomicMeasure {
        AtomicMeasure::dirac(1.0)
    }

    #[test]
    fn psi_values() {
        assert_abs_diff_eq!(psi(3.0, 0.5, &delta1()).unwrap(), 3.75, epsilon = 1e-15);
        assert_abs_diff_eq!(psi(1.5, 0.25, &delta1()).unwrap(), 2.25, epsilon = 1e-15);
        assert_eq!(psi(7.3, 0.0, &delta1()).unwrap(), 7.3);
        assert_abs_diff_eq!(psi_prime(3.0, 0.5, &delta1()).unwrap(), 0.875, epsilon = 1e-15);
        let g: f64 = 0.3;
        assert_abs_diff_eq!(psi_prime(1.0 + g.sqrt(), g, &delta1()).unwrap(), 0.0, epsilon = 1e-14);
        assert!(matches!(psi(1.0, 0.5, &delta1()), Err(Error::OnSupport(_))));
        assert!(psi_prime(1.0 + 1e-12, 0.5, &delta1()).is_err());
    }

    #[test]
    fn thresholds() {
        assert_eq!(spike_threshold_delta1(0.25), (0.5, 1.5));
        assert_eq!(spike_threshold_delta1(1.0), (0.0, 2.0));
        assert_eq!(spike_threshold_delta1(0.0), (1.0, 1.0));
    }

    #[test]
    fn classify_delta1() {
        let law = LimitLaw::marchenko_pastur(0.5, 2001).unwrap();
        let model = SpikedModel::identity_bulk(vec![(3.0, 1), (0.0, 2)], 0.5, 200).unwrap();
        let pred = classify_spikes(&model, &law).unwrap();
        assert!(pred[0].detectable);
        assert_abs_diff_eq!(pred[0].predicted_limit, 3.75, epsilon = 1e-12);
        assert_eq!((pred[0].rank_start, pred[0].rank_end), (1, 1));
        assert!(pred[1].detectable);
        assert_eq!(pred[1].predicted_limit, 0.0);
        assert_eq!((pred[1].rank_start, pred[1].rank_end), (199, 200));

        let model = SpikedModel::identity_bulk(vec![(1.5, 1), (0.5, 1)], 0.5, 200).unwrap();
        let pred = classify_spikes(&model, &law).unwrap();
        assert!(!pred[0].detectable);
        assert_abs_diff_eq!(pred[0].predicted_limit, (1.0 + 0.5f64.sqrt()).powi(2), epsilon = 1e-12);
        assert!(!pred[1].detectable);
        assert_abs_diff_eq!(pred[1].predicted_limit, (1.0 - 0.5f64.sqrt()).powi(2), epsilon = 1e-12);
        assert_eq!(pred[1].rank_start, 200);
    }

    #[test]
    fn symmetric_pair_example() {
        let gamma: f64 = 0.25;
        let law = LimitLaw::marchenko_pastur(gamma, 2001).unwrap();
        let (a, b) = mp_edges_of(gamma);
        for delta in [0.2, 0.5] {
            let model = SpikedModel::identity_bulk(vec![(1.0 + delta, 1), (1.0 - delta, 1)], gamma, 100).unwrap();
            let pred = classify_spikes(&model, &law).unwrap();
            if delta <= gamma.sqrt() {
                assert!(pred.iter().all(|p| !p.detectable));
                assert_abs_diff_eq!(pred[0].predicted_limit, b, epsilon = 1e-12);
                assert_abs_diff_eq!(pred[1].predicted_limit, a, epsilon = 1e-12);
            } else {
                assert!(pred.iter().all(|p| p.detectable));
                assert_abs_diff_eq!(pred[0].predicted_limit, psi(1.0 + delta, gamma, &delta1()).unwrap());
                assert_abs_diff_eq!(pred[1].predicted_limit, psi(1.0 - delta, gamma, &delta1()).unwrap());
            }
        }
    }

    fn mp_edges_of(gamma: f64) -> (f64, f64) {
        crate::lsd::mp_edges(gamma)
    }

    #[test]
    fn spikes_inside_support_are_skipped() {
        let law = LimitLaw::marchenko_pastur(0.5, 501).unwrap();
        let model = SpikedModel::identity_bulk(vec![(1.0, 1), (3.0, 1)], 0.5, 50).unwrap();
        let pred = classify_spikes(&model, &law).unwrap();
        assert_eq!(pred.len(), 1);
        assert_eq!(pred[0].alpha, 3.0);
        assert!(SpikedModel::identity_bulk(vec![(1.0, 2)], 0.5, 50).is_err());
    }

    #[test]
    fn unit_diagonal_blocks() {
        for spectrum in [vec![3.0, 0.0, 0.0], vec![1.5, 0.5], vec![3.0, 3.0, 0.0, 0.0, 0.0, 0.0], vec![2.0, 1.0, 0.5, 0.5]] {
            let lambda = unit_diagonal_with_spectrum(&spectrum).unwrap();
            assert_eq!(lambda.diagonal(), vec![1.0; spectrum.len()]);
            let mut sorted = spectrum.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            for (x, y) in lambda.eigenvalues().unwrap().iter().zip(&sorted) {
                assert!((x - y).abs() < MAX_RENORMALIZATION);
            }
        }
        assert!(unit_diagonal_with_spectrum(&[2.0, 1.0]).is_err());
        assert!(unit_diagonal_with_spectrum(&[2.5, -0.5]).is_err());
    }

    #[test]
    fn instantiated_model_has_requested_gamma() {
        let model = SpikedModel::identity_bulk(vec![(3.0, 2), (0.0, 4)], 0.5, 20).unwrap();
        let mixing = build_a(&model.mixing_spec().unwrap(), 20).unwrap();
        let eig = mixing.gamma.eigenvalues().unwrap();
        assert!((eig[0] - 3.0).abs() < 1e-6 && (eig[1] - 3.0).abs() < 1e-6);
        assert!(eig[19].abs() < 1e-6);
        assert!(eig[2..16].iter().all(|l| (l - 1.0).abs() < 1e-6));
        for (a, b) in mixing.sigma.diagonal().iter().zip(mixing.gamma.diagonal()) {
            assert!((a - 1.0).abs() < 1e-10 && (b - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn predictions_csv() {
        let law = LimitLaw::marchenko_pastur(0.5, 501).unwrap();
        let model = SpikedModel::identity_bulk(vec![(3.0, 1), (0.0, 2)], 0.5, 50).unwrap();
        let pred = classify_spikes(&model, &law).unwrap();
        let mut out = Vec::new();
        write_predictions_csv(&pred, Some(&[(3.7, 0.1), (0.0, 0.0)]), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "alpha,multiplicity,detectable,predicted_limit,mc_mean,mc_sd");
        assert!(lines.next().unwrap().starts_with("3,1,true,3.75"));
        assert!(write_predictions_csv(&pred, Some(&[(1.0, 1.0)]), Vec::new()).is_err());
    }

    #[test]
    fn two_atom_bulk_ranks() {
        let h = AtomicMeasure::new(vec![(0.5, 0.5), (2.0, 0.5)]).unwrap();
        let model = SpikedModel::new(vec![(5.0, 1), (1.0, 1)], h, 0.1, 102).unwrap();
        assert_eq!(model.eigenvalues_above(5.0), 0);
        assert_eq!(model.eigenvalues_above(1.0), 51);
    }

    proptest! {
        #[test]
        fn psi_prime_matches_central_difference(
            alpha in 0.0..6.0f64,
            gamma in 0.0..2.0f64,
            t1 in 0.2..3.0f64,
            w in 0.1..0.9f64,
        ) {
            let h = AtomicMeasure::new(vec![(t1, w), (t1 + 0.5, 1.0 - w)]).unwrap();
            prop_assume!(h.distance_to_support(alpha) > 0.2);
            let step = 1e-5;
            let fd = (psi(alpha + step, gamma, &h).unwrap() - psi(alpha - step, gamma, &h).unwrap()) / (2.0 * step);
            prop_assert!((psi_prime(alpha, gamma, &h).unwrap() - fd).abs() < 1e-6);
        }

        #[test]
        fn psi_above_bulk_exceeds_alpha(gamma in 0.01..2.0f64, offset in 0.01..5.0f64) {
            let h = AtomicMeasure::new(vec![(0.5, 0.3), (1.0, 0.4), (2.0, 0.3)]).unwrap();
            let alpha = 2.0 + offset;
            prop_assert!(psi(alpha, gamma, &h).unwrap() > alpha);
        }
    }

    #[test]
    fn detectability_monotone_above_threshold() {
        for gamma in [0.1, 0.5, 1.0, 2.0] {
            let (_, upper) = spike_threshold_delta1(gamma);
            let mut seen = false;
            for i in 1..400 {
                let alpha = 1.0 + 0.01 * i as f64;
                let d = psi_prime(alpha, gamma, &delta1()).unwrap() > 0.0;
                if seen {
                    assert!(d, "re-entry at {alpha}");
                }
                seen |= d;
                assert_eq!(d, alpha > upper);
            }
        }
    }
}
