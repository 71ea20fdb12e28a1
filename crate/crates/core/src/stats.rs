//! Sample covariance and correlation matrices and the statistics that
//! compare them with their population counterparts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, DataMatrix, SymmetricMatrix};

fn check_data(x: &DataMatrix) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Dimension(format!(
            "data matrix must be non-empty, got {}x{}",
            x.nrows(),
            x.ncols()
        )));
    }
    for (col, column) in x.column_iter().enumerate() {
        if let Some(row) = column.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
    }
    Ok(())
}

/// `S = X Xᵀ / n` for a `p × n` data matrix.
pub fn sample_covariance(x: &DataMatrix) -> Result<SymmetricMatrix> {
    check_data(x)?;
    Ok(SymmetricMatrix::gram(x, x.ncols() as f64))
}

fn positive_diagonal(m: &SymmetricMatrix) -> Result<Vec<f64>> {
    let d = m.diagonal();
    if let Some((index, &value)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveDiagonal { index, value });
    }
    Ok(d)
}

/// `R_ij = S_ij / √(S_ii S_jj)`, with an exactly unit diagonal.
pub fn sample_correlation(s: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    scale_to_diagonal(s, &positive_diagonal(s)?)
}

/// `M_ij / √(d_i d_j)`; the diagonal is set to exactly 1 when `d == diag(M)`.
fn scale_to_diagonal(m: &SymmetricMatrix, d: &[f64]) -> Result<SymmetricMatrix> {
    if d.len() != m.dim() {
        return Err(Error::Dimension(format!("{} vs {}", d.len(), m.dim())));
    }
    Ok(m.map(|i, j, v| {
        if i == j && v == d[i] {
            1.0
        } else {
            v / (d[i] * d[j]).sqrt()
        }
    }))
}

/// `S^Q = Q Qᵀ / n` with `Q = diag(Σ)^{-1/2} X`.
pub fn q_transform(x: &DataMatrix, sigma: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    check_data(x)?;
    if sigma.dim() != x.nrows() {
        return Err(Error::Dimension(format!(
            "Σ is {}x{}, X has {} rows",
            sigma.dim(),
            sigma.dim(),
            x.nrows()
        )));
    }
    let d = positive_diagonal(sigma)?;
    let mut q = x.clone();
    for (i, mut row) in q.row_iter_mut().enumerate() {
        row /= d[i].sqrt();
    }
    Ok(SymmetricMatrix::gram(&q, x.ncols() as f64))
}

/// How far `diag(S)` and `R` are from their population-diagonal analogues,
/// all on the `√(n/p)` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonReport {
    /// `√(n/p) max_i |S_ii − Σ_ii|`
    pub diag_gap: f64,
    /// `√(n/p) max_i |S_ii^{-1/2} − Σ_ii^{-1/2}|`
    pub inv_sqrt_gap: f64,
    /// `√(n/p) ||R − S^Q||`
    pub r_vs_q_gap: f64,
    pub p: usize,
    pub n: usize,
    pub gamma_hat: f64,
}

pub fn comparison_report(x: &DataMatrix, sigma: &SymmetricMatrix) -> Result<ComparisonReport> {
    let s = sample_covariance(x)?;
    comparison_report_from_cov(&s, sigma, x.ncols())
}

/// As [`comparison_report`], for an already computed `S`.
pub fn comparison_report_from_cov(
    s: &SymmetricMatrix,
    sigma: &SymmetricMatrix,
    n: usize,
) -> Result<ComparisonReport> {
    let p = s.dim();
    if sigma.dim() != p {
        return Err(Error::Dimension(format!("S is {p}x{p}, Σ is {0}x{0}", sigma.dim())));
    }
    let sd = positive_diagonal(s)?;
    let pd = positive_diagonal(sigma)?;
    let scale = (n as f64 / p as f64).sqrt();
    let diag_gap = sd.iter().zip(&pd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let inv_sqrt_gap = sd
        .iter()
        .zip(&pd)
        .map(|(a, b)| (1.0 / a.sqrt() - 1.0 / b.sqrt()).abs())
        .fold(0.0, f64::max);
    let r = scale_to_diagonal(s, &sd)?;
    let sq = scale_to_diagonal(s, &pd)?;
    let r_vs_q_gap = spectral_norm(&r.sub(&sq)?)?;
    Ok(ComparisonReport {
        diag_gap: scale * diag_gap,
        inv_sqrt_gap: scale * inv_sqrt_gap,
        r_vs_q_gap: scale * r_vs_q_gap,
        p,
        n,
        gamma_hat: p as f64 / n as f64,
    })
}

/// Largest and smallest non-trivial eigenvalue of `S` or `R`, raw and on
/// the `√(n/p)(λ − 1)` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtremeReport {
    pub lambda_top: f64,
    /// The `min(p, n)`-th largest eigenvalue.
    pub lambda_bottom: f64,
    pub top_scaled: f64,
    pub bottom_scaled: f64,
}

pub fn extreme_report(m: &SymmetricMatrix, n: usize) -> Result<ExtremeReport> {
    extreme_report_from_eigenvalues(&m.eigenvalues()?, n)
}

/// As [`extreme_report`] for eigenvalues sorted in descending order.
pub fn extreme_report_from_eigenvalues(eigenvalues: &[f64], n: usize) -> Result<ExtremeReport> {
    let p = eigenvalues.len();
    if p == 0 || n == 0 {
        return Err(Error::EmptySpectrum);
    }
    let scale = (n as f64 / p as f64).sqrt();
    let lambda_top = eigenvalues[0];
    let lambda_bottom = eigenvalues[p.min(n) - 1];
    Ok(ExtremeReport {
        lambda_top,
        lambda_bottom,
        top_scaled: scale * (lambda_top - 1.0),
        bottom_scaled: scale * (lambda_bottom - 1.0),
    })
}

/// `√(n / ln p) · max_{i≠j} |R_ij|`.
pub fn max_offdiag_scaled(r: &SymmetricMatrix, n: usize) -> Result<f64> {
    let p = r.dim();
    if p < 2 {
        return Err(Error::InvalidParameter(format!("need p >= 2, got {p}")));
    }
    Ok((n as f64 / (p as f64).ln()).sqrt() * r.max_abs_offdiag())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_z, EntryLaw};
    use crate::linalg::sym_eigen;
    use crate::rng::RandomStream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dm(rows: &[&[f64]]) -> DataMatrix {
        DataMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn covariance_small_cases() {
        let s = sample_covariance(&dm(&[&[1.0, -1.0], &[1.0, -1.0]])).unwrap();
        assert_eq!(s, SymmetricMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap());
        let s = sample_covariance(&DataMatrix::identity(2, 2)).unwrap();
        assert_eq!(s, SymmetricMatrix::from_diagonal(&[0.5, 0.5]));
    }

    #[test]
    fn covariance_matches_triple_loop() {
        let mut st = RandomStream::new(4);
        let x = sample_z(&EntryLaw::Gaussian, 3, 4, &mut st).unwrap();
        let s = sample_covariance(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += x[(i, t)] * x[(j, t)];
                }
                assert_abs_diff_eq!(s.get(i, j), acc / 4.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn correlation_small_cases() {
        let ones = SymmetricMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(sample_correlation(&ones).unwrap(), ones);
        let d = SymmetricMatrix::from_diagonal(&[4.0, 9.0]);
        assert_eq!(sample_correlation(&d).unwrap(), SymmetricMatrix::identity(2));
        let s = SymmetricMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let r = sample_correlation(&s).unwrap();
        assert_eq!(r.get(0, 1), 0.5);
        assert_eq!(r.get(0, 0), 1.0);
    }

    #[test]
    fn correlation_rejects_zero_variance() {
        let s = SymmetricMatrix::from_diagonal(&[1.0, 0.0, 2.0]);
        assert_eq!(
            sample_correlation(&s),
            Err(Error::NonPositiveDiagonal { index: 1, value: 0.0 })
        );
    }

    #[test]
    fn q_transform_cases() {
        let mut st = RandomStream::new(8);
        let x = sample_z(&EntryLaw::Gaussian, 3, 7, &mut st).unwrap();
        let s = sample_covariance(&x).unwrap();
        let sq = q_transform(&x, &SymmetricMatrix::from_diagonal(&[4.0; 3])).unwrap();
        let sq_unit = q_transform(&x, &SymmetricMatrix::identity(3)).unwrap();
        let sigma = SymmetricMatrix::from_rows(&[
            vec![2.0, 0.3, 0.1],
            vec![0.3, 0.5, 0.0],
            vec![0.1, 0.0, 3.0],
        ])
        .unwrap();
        let sq_gen = q_transform(&x, &sigma).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(sq.get(i, j), s.get(i, j) / 4.0, epsilon = 1e-14);
                assert_abs_diff_eq!(sq_unit.get(i, j), s.get(i, j), epsilon = 1e-14);
                let oracle = s.get(i, j) / (sigma.get(i, i) * sigma.get(j, j)).sqrt();
                assert_abs_diff_eq!(sq_gen.get(i, j), oracle, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn rademacher_diagonal_is_exact() {
        let mut st = RandomStream::new(21);
        let x = sample_z(&EntryLaw::Rademacher, 20, 49, &mut st).unwrap();
        let rep = comparison_report(&x, &SymmetricMatrix::identity(20)).unwrap();
        assert_eq!(rep.diag_gap, 0.0);
        assert_eq!(rep.inv_sqrt_gap, 0.0);
        assert!(rep.r_vs_q_gap <= 1e-12);
    }

    #[test]
    fn extreme_report_trivial() {
        let rep = extreme_report(&SymmetricMatrix::identity(1), 10).unwrap();
        assert_eq!(rep.top_scaled, 0.0);
        assert_eq!(rep.bottom_scaled, 0.0);
        // p > n: bottom uses the n-th largest eigenvalue
        let rep = extreme_report_from_eigenvalues(&[3.0, 2.0, 0.5, 0.0, 0.0], 3).unwrap();
        assert_eq!(rep.lambda_bottom, 0.5);
    }

    #[test]
    fn max_offdiag_cases() {
        let x = dm(&[&[1.0, 2.0, -1.0, 0.5], &[1.0, 2.0, -1.0, 0.5], &[0.3, -0.2, 1.0, 2.0]]);
        let r = sample_correlation(&sample_covariance(&x).unwrap()).unwrap();
        let stat = max_offdiag_scaled(&r, 4).unwrap();
        assert_abs_diff_eq!(stat, (4.0 / 3f64.ln()).sqrt(), epsilon = 1e-12);
        assert_eq!(max_offdiag_scaled(&SymmetricMatrix::identity(5), 10).unwrap(), 0.0);
        assert!(max_offdiag_scaled(&SymmetricMatrix::identity(1), 10).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn correlation_properties(seed in any::<u64>(), p in 2usize..8, n in 2usize..12,
                                  scales in prop::collection::vec(0.1..10.0f64, 8)) {
            let mut st = RandomStream::new(seed);
            let x = sample_z(&EntryLaw::Gaussian, p, n, &mut st).unwrap();
            let r = sample_correlation(&sample_covariance(&x).unwrap()).unwrap();
            let mut dx = x.clone();
            for (i, mut row) in dx.row_iter_mut().enumerate() {
                row *= scales[i];
            }
            let r2 = sample_correlation(&sample_covariance(&dx).unwrap()).unwrap();
            prop_assert!(r.sub(&r2).unwrap().max_abs() <= 1e-12);
            prop_assert!((r.trace() - p as f64).abs() <= 1e-12 * p as f64);
            prop_assert!(r.max_abs() <= 1.0 + 1e-12);
            let min = *sym_eigen(&r).unwrap().eigenvalues.last().unwrap();
            prop_assert!(min >= -1e-10);
        }

        #[test]
        fn weyl_transfer(seed in any::<u64>(), p in 2usize..10, n in 3usize..15) {
            let mut st = RandomStream::new(seed);
            let x = sample_z(&EntryLaw::Uniform, p, n, &mut st).unwrap();
            let sigma = SymmetricMatrix::identity(p);
            let r = sample_correlation(&sample_covariance(&x).unwrap()).unwrap();
            let sq = q_transform(&x, &sigma).unwrap();
            let lr = r.eigenvalues().unwrap();
            let lq = sq.eigenvalues().unwrap();
            let bound = spectral_norm(&r.sub(&sq).unwrap()).unwrap();
            for (a, b) in lr.iter().zip(&lq) {
                prop_assert!((a - b).abs() <= bound + 1e-10);
            }
        }
    }
}
