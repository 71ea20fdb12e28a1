//! Seeded generation of data from the linear model `X = A Z`.
//!
//! `Z` is a `p × n` matrix of iid standardized entries and `A` a fixed
//! `p × p` mixing matrix, so the columns of `X` are iid observations with
//! covariance `Σ = A Aᵀ`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, sym_eigen, DataMatrix, SymmetricMatrix};
use crate::rng::RandomStream;

/// Lower bound enforced on `min_i Σ_ii`.
pub const MIN_VARIANCE: f64 = 1e-6;
/// Upper bound enforced on `||A||²`.
pub const MAX_NORM_SQ: f64 = 1e6;

/// Law of the iid noise entries. Every variant has mean 0 and variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", content = "law_params", rename_all = "snake_case")]
pub enum EntryLaw {
    Gaussian,
    Rademacher,
    /// Uniform on `[-√3, √3]`.
    Uniform,
    /// Student t with `nu > 4` degrees of freedom, rescaled to unit variance.
    StudentT { nu: f64 },
    /// Symmetric Pareto with tail index `alpha ∈ (2, 4)`: unit variance but
    /// infinite fourth moment.
    ParetoSym { alpha: f64 },
}

impl EntryLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EntryLaw::StudentT { nu } if !(nu > 4.0 && nu.is_finite()) => Err(
                Error::InvalidParameter(format!("student_t requires nu > 4, got {nu}")),
            ),
            EntryLaw::ParetoSym { alpha } if !(alpha > 2.0 && alpha < 4.0) => Err(
                Error::InvalidParameter(format!("pareto_sym requires alpha in (2, 4), got {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn has_finite_fourth_moment(&self) -> bool {
        !matches!(self, EntryLaw::ParetoSym { .. })
    }

    fn sampler(&self) -> Result<EntrySampler> {
        self.validate()?;
        Ok(match *self {
            EntryLaw::Gaussian => EntrySampler::Gaussian,
            EntryLaw::Rademacher => EntrySampler::Rademacher,
            EntryLaw::Uniform => EntrySampler::Uniform,
            EntryLaw::StudentT { nu } => EntrySampler::StudentT {
                dist: StudentT::new(nu)
                    .map_err(|e| Error::InvalidParameter(format!("student_t: {e}")))?,
                scale: ((nu - 2.0) / nu).sqrt(),
            },
            EntryLaw::ParetoSym { alpha } => EntrySampler::Pareto {
                inv_alpha: 1.0 / alpha,
                // E[U^{-2/α}] = α/(α-2)
                scale: ((alpha - 2.0) / alpha).sqrt(),
            },
        })
    }
}

enum EntrySampler {
    Gaussian,
    Rademacher,
    Uniform,
    StudentT { dist: StudentT<f64>, scale: f64 },
    Pareto { inv_alpha: f64, scale: f64 },
}

impl EntrySampler {
    #[inline]
    fn draw(&self, rng: &mut RandomStream) -> f64 {
        match self {
            EntrySampler::Gaussian => StandardNormal.sample(rng),
            EntrySampler::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            EntrySampler::Uniform => 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
            EntrySampler::StudentT { dist, scale } => scale * dist.sample(rng),
            EntrySampler::Pareto { inv_alpha, scale } => {
                // u ∈ (0, 1]
                let u = 1.0 - rng.random::<f64>();
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * scale * u.powf(-inv_alpha)
            }
        }
    }
}

/// Draws a `p × n` matrix of iid entries, filled column by column.
pub fn sample_z(law: &EntryLaw, p: usize, n: usize, stream: &mut RandomStream) -> Result<DataMatrix> {
    if p == 0 || n == 0 {
        return Err(Error::Dimension(format!("p and n must be positive, got {p}x{n}")));
    }
    let sampler = law.sampler()?;
    let data: Vec<f64> = (0..p * n).map(|_| sampler.draw(stream)).collect();
    Ok(DataMatrix::from_vec(p, n, data))
}

/// Family of mixing matrices `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mixing", content = "mixing_params", rename_all = "snake_case")]
pub enum MixingSpec {
    Identity,
    /// `A = T^{1/2}` for the Toeplitz matrix `T_ij = rho^{|i-j|}`.
    Ar1 { rho: f64 },
    /// `A = diag(scales)`.
    RowScaled { scales: Vec<f64> },
    /// `A = Γ^{1/2}` with `Γ = blockdiag(Λ, I)`; `Λ` must be PSD with unit
    /// diagonal.
    Spiked { lambda: Vec<Vec<f64>> },
}

/// A realized mixing matrix together with its population matrices.
#[derive(Debug, Clone)]
pub struct Mixing {
    pub a: DataMatrix,
    /// `Σ = A Aᵀ`
    pub sigma: SymmetricMatrix,
    /// `Γ = diag(Σ)^{-1/2} Σ diag(Σ)^{-1/2}`
    pub gamma: SymmetricMatrix,
    /// Realized `min_i Σ_ii`.
    pub min_variance: f64,
    /// Realized `||A||²`.
    pub norm_sq: f64,
    kind: MixingKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MixingKind {
    Identity,
    Diagonal,
    Dense,
}

/// Population correlation matrix of a covariance matrix.
pub fn correlation_of(sigma: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let d = sigma.diagonal();
    if let Some((index, &value)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveDiagonal { index, value });
    }
    let inv: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut g = sigma.congruence_diag(&inv)?;
    for i in 0..g.dim() {
        g.set(i, i, 1.0);
    }
    Ok(g)
}

fn psd_sqrt(m: &SymmetricMatrix) -> Result<DataMatrix> {
    let e = sym_eigen(m)?;
    Ok(e.apply(|l| l.max(0.0).sqrt()).to_dense())
}

/// Builds `A`, `Σ` and `Γ` for mixing parameters of dimension `p`, and
/// checks `MIN_VARIANCE < min_i Σ_ii` and `||A||² <= MAX_NORM_SQ`.
pub fn build_a(spec: &MixingSpec, p: usize) -> Result<Mixing> {
    if p == 0 {
        return Err(Error::Dimension("p must be positive".into()));
    }
    let (a, kind) = match spec {
        MixingSpec::Identity => (DataMatrix::identity(p, p), MixingKind::Identity),
        MixingSpec::Ar1 { rho } => {
            if !(0.0..1.0).contains(rho) {
                return Err(Error::InvalidParameter(format!("ar1 requires rho in [0, 1), got {rho}")));
            }
            if *rho == 0.0 {
                (DataMatrix::identity(p, p), MixingKind::Identity)
            } else {
                let t = SymmetricMatrix::from_fn(p, |i, j| rho.powi((j - i) as i32));
                (psd_sqrt(&t)?, MixingKind::Dense)
            }
        }
        MixingSpec::RowScaled { scales } => {
            if scales.len() != p {
                return Err(Error::Dimension(format!(
                    "row_scaled needs {p} scales, got {}",
                    scales.len()
                )));
            }
            if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
                return Err(Error::InvalidParameter(format!("row scale {s} is not positive")));
            }
            (DataMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(scales)), MixingKind::Diagonal)
        }
        MixingSpec::Spiked { lambda } => {
            let block = SymmetricMatrix::from_rows(lambda)?;
            let m = block.dim();
            if m > p {
                return Err(Error::Dimension(format!("spike block {m} exceeds p = {p}")));
            }
            for i in 0..m {
                for j in 0..m {
                    if lambda[i][j] != lambda[j][i] {
                        return Err(Error::InvalidParameter("spike block is not symmetric".into()));
                    }
                }
                if (block.get(i, i) - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidParameter(format!(
                        "spike block must have unit diagonal, entry {i} is {}",
                        block.get(i, i)
                    )));
                }
            }
            let e = sym_eigen(&block)?;
            let min = *e.eigenvalues.last().unwrap();
            if min < -1e-10 {
                return Err(Error::InvalidParameter(format!(
                    "spike block is not positive semidefinite (min eigenvalue {min})"
                )));
            }
            let root = e.apply(|l| l.max(0.0).sqrt());
            let mut a = DataMatrix::identity(p, p);
            for i in 0..m {
                for j in 0..m {
                    a[(i, j)] = root.get(i, j);
                }
            }
            (a, MixingKind::Dense)
        }
    };
    let sigma = SymmetricMatrix::gram(&a, 1.0);
    let min_variance = sigma.diagonal().into_iter().fold(f64::INFINITY, f64::min);
    let norm_sq = spectral_norm(&sigma)?;
    if !(min_variance > MIN_VARIANCE) {
        return Err(Error::InvalidParameter(format!(
            "min diagonal of A A' is {min_variance}, must exceed {MIN_VARIANCE}"
        )));
    }
    if norm_sq > MAX_NORM_SQ {
        return Err(Error::InvalidParameter(format!(
            "||A||^2 = {norm_sq} exceeds {MAX_NORM_SQ}"
        )));
    }
    let gamma = correlation_of(&sigma)?;
    Ok(Mixing {
        a,
        sigma,
        gamma,
        min_variance,
        norm_sq,
        kind,
    })
}

impl Mixing {
    /// `A Z`.
    pub fn apply(&self, z: &DataMatrix) -> Result<DataMatrix> {
        if z.nrows() != self.a.nrows() {
            return Err(Error::Dimension(format!(
                "Z has {} rows, A is {}x{}",
                z.nrows(),
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        Ok(match self.kind {
            MixingKind::Identity => z.clone(),
            MixingKind::Diagonal => {
                let mut x = z.clone();
                for (i, mut row) in x.row_iter_mut().enumerate() {
                    row *= self.a[(i, i)];
                }
                x
            }
            MixingKind::Dense => &self.a * z,
        })
    }
}

/// Full generative description of a data matrix.
///
/// Serializes as a flat JSON object:
/// `{"law": ..., "law_params": {...}, "mixing": ..., "mixing_params": {...}, "p": .., "n": .., "seed": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataModel {
    #[serde(flatten)]
    pub law: EntryLaw,
    #[serde(flatten)]
    pub mixing: MixingSpec,
    pub p: usize,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DataModel {
    pub fn validate(&self) -> Result<()> {
        if self.p < 1 {
            return Err(Error::InvalidParameter("p must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(Error::InvalidParameter("n must be at least 2".into()));
        }
        self.law.validate()
    }

    /// `p / n`.
    pub fn aspect_ratio(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    pub fn build_mixing(&self) -> Result<Mixing> {
        self.validate()?;
        build_a(&self.mixing, self.p)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: DataModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Draws `X = A Z` using the model's own seed.
pub fn generate(model: &DataModel) -> Result<DataMatrix> {
    let mixing = model.build_mixing()?;
    let mut stream = RandomStream::new(model.seed);
    generate_with(model, &mixing, &mut stream)
}

/// Draws `X = A Z` from an explicit stream and a prebuilt mixing matrix.
pub fn generate_with(model: &DataModel, mixing: &Mixing, stream: &mut RandomStream) -> Result<DataMatrix> {
    model.validate()?;
    let z = sample_z(&model.law, model.p, model.n, stream)?;
    mixing.apply(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn model(law: EntryLaw, mixing: MixingSpec, p: usize, n: usize) -> DataModel {
        DataModel {
            law,
            mixing,
            p,
            n,
            seed: 11,
        }
    }

    #[test]
    fn rademacher_support() {
        let mut s = RandomStream::new(3);
        let z = sample_z(&EntryLaw::Rademacher, 7, 9, &mut s).unwrap();
        assert!(z.iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn gaussian_moments_against_reference_generator() {
        let (p, n) = (200, 200);
        let mut s = RandomStream::new(2024);
        let z = sample_z(&EntryLaw::Gaussian, p, n, &mut s).unwrap();
        let total = (p * n) as f64;
        let mean = z.iter().sum::<f64>() / total;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / total;
        assert!(mean.abs() < 4.0 / total.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");

        // Box–Muller on an unrelated generator must land in the same bands.
        let mut r = ChaCha20Rng::seed_from_u64(99);
        let mut reference = Vec::with_capacity(p * n);
        while reference.len() < p * n {
            let u1: f64 = 1.0 - r.random::<f64>();
            let u2: f64 = r.random();
            let rad = (-2.0 * u1.ln()).sqrt();
            reference.push(rad * (2.0 * std::f64::consts::PI * u2).cos());
            reference.push(rad * (2.0 * std::f64::consts::PI * u2).sin());
        }
        let rmean = reference.iter().sum::<f64>() / total;
        let rvar = reference.iter().map(|v| (v - rmean).powi(2)).sum::<f64>() / total;
        assert!(rmean.abs() < 4.0 / total.sqrt());
        assert!((rvar - var).abs() < 0.05);
    }

    fn hill_estimate(mut values: Vec<f64>, k: usize) -> f64 {
        values.sort_by(|a, b| b.total_cmp(a));
        let base = values[k].ln();
        let mean_log = values[..k].iter().map(|v| v.ln() - base).sum::<f64>() / k as f64;
        1.0 / mean_log
    }

    #[test]
    fn pareto_tail_index() {
        let mut s = RandomStream::new(5);
        let z = sample_z(&EntryLaw::ParetoSym { alpha: 3.0 }, 1000, 1000, &mut s).unwrap();
        let abs: Vec<f64> = z.iter().map(|v| v.abs()).collect();
        let est = hill_estimate(abs, 2000);
        assert!(est > 2.5 && est < 3.5, "hill estimate {est}");
    }

    #[test]
    fn standardized_laws_have_unit_variance() {
        for law in [
            EntryLaw::Uniform,
            EntryLaw::StudentT { nu: 8.0 },
            EntryLaw::Rademacher,
        ] {
            let mut s = RandomStream::new(17);
            let z = sample_z(&law, 400, 500, &mut s).unwrap();
            let var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
            assert!((var - 1.0).abs() < 0.03, "{law:?}: {var}");
        }
    }

    #[test]
    fn invalid_laws() {
        assert!(EntryLaw::StudentT { nu: 4.0 }.validate().is_err());
        assert!(EntryLaw::ParetoSym { alpha: 4.0 }.validate().is_err());
        assert!(EntryLaw::ParetoSym { alpha: 2.0 }.validate().is_err());
        let mut s = RandomStream::new(1);
        assert!(sample_z(&EntryLaw::StudentT { nu: 3.0 }, 2, 2, &mut s).is_err());
    }

    #[test]
    fn identity_and_degenerate_ar1() {
        let m = build_a(&MixingSpec::Identity, 5).unwrap();
        assert_eq!(m.a, DataMatrix::identity(5, 5));
        assert_eq!(m.sigma, SymmetricMatrix::identity(5));
        assert_eq!(m.gamma, SymmetricMatrix::identity(5));
        let m = build_a(&MixingSpec::Ar1 { rho: 0.0 }, 6).unwrap();
        assert_eq!(m.a, DataMatrix::identity(6, 6));
    }

    #[test]
    fn ar1_square_root() {
        let m = build_a(&MixingSpec::Ar1 { rho: 0.6 }, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expected = 0.6f64.powi((i as i32 - j as i32).abs());
                assert_abs_diff_eq!(m.sigma.get(i, j), expected, epsilon = 1e-10);
            }
        }
        assert_abs_diff_eq!(m.norm_sq, spectral_norm(&m.sigma).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn spiked_gamma_spectrum() {
        let spec = MixingSpec::Spiked {
            lambda: vec![vec![1.0, 0.8], vec![0.8, 1.0]],
        };
        let m = build_a(&spec, 4).unwrap();
        let vals = m.gamma.eigenvalues().unwrap();
        for (v, e) in vals.iter().zip([1.8, 1.0, 1.0, 0.2]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-10);
        }
        for i in 0..4 {
            assert_abs_diff_eq!(m.sigma.get(i, i), 1.0, epsilon = 1e-10);
            assert_eq!(m.gamma.get(i, i), 1.0);
        }
    }

    #[test]
    fn spiked_rejects_bad_blocks() {
        let not_unit = MixingSpec::Spiked {
            lambda: vec![vec![2.0, 0.0], vec![0.0, 1.0]],
        };
        assert!(build_a(&not_unit, 3).is_err());
        let not_psd = MixingSpec::Spiked {
            lambda: vec![vec![1.0, 1.5], vec![1.5, 1.0]],
        };
        assert!(build_a(&not_psd, 3).is_err());
    }

    #[test]
    fn generate_identity_and_scaled() {
        let base = model(EntryLaw::Gaussian, MixingSpec::Identity, 4, 6);
        let x = generate(&base).unwrap();
        let mut s = RandomStream::new(base.seed);
        let z = sample_z(&base.law, 4, 6, &mut s).unwrap();
        assert_eq!(x, z);

        let scaled = DataModel {
            mixing: MixingSpec::RowScaled { scales: vec![2.0; 4] },
            ..base.clone()
        };
        assert_eq!(generate(&scaled).unwrap(), z * 2.0);
        assert_eq!(generate(&base).unwrap(), generate(&base).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let m = model(
            EntryLaw::StudentT { nu: 6.0 },
            MixingSpec::Ar1 { rho: 0.3 },
            10,
            20,
        );
        let text = m.to_json().unwrap();
        assert!(text.contains("\"law\": \"student_t\""));
        assert_eq!(DataModel::from_json(&text).unwrap(), m);

        let doc = r#"{"law":"gaussian","mixing":"identity","p":3,"n":5,"seed":9}"#;
        let m = DataModel::from_json(doc).unwrap();
        assert_eq!(m.law, EntryLaw::Gaussian);
        assert_eq!(m.mixing, MixingSpec::Identity);
        assert!(DataModel::from_json(r#"{"law":"gaussian","mixing":"identity","p":3,"n":1}"#).is_err());
    }
}
