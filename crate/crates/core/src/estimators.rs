//! Estimators of the population correlation matrix and its spectrum.
//!
//! Hard thresholding of `R` or `S`, the increasing-path moment estimator of
//! `tr(Γ^k)` and a grid-based reconstruction of the eigenvalues of `Γ` from
//! those moments.

use std::io::{Read, Write};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DataMatrix, SymmetricMatrix};
use crate::stats::sample_covariance;

/// Threshold constant used when none is given.
pub const DEFAULT_M: f64 = 2.1;
/// Number of moments used for spectrum reconstruction by default.
pub const DEFAULT_MOMENTS: usize = 6;
/// Largest `n` accepted by [`increasing_path_average_bruteforce`].
pub const MAX_BRUTEFORCE_DIM: usize = 14;
/// Default spacing of the reconstruction grid.
pub const DEFAULT_GRID_STEP: f64 = 0.01;
/// Most negative normalized Hankel eigenvalue still treated as noise.
pub const HANKEL_TOLERANCE: f64 = 1e-2;

/// `t_p = M √(ln p / n)`.
pub fn default_threshold(p: usize, n: usize, m: f64) -> f64 {
    m * ((p as f64).ln() / n as f64).sqrt()
}

/// Hard-thresholding rule with level `t_p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub m: f64,
    pub t_p: f64,
}

impl ThresholdRule {
    /// Rule with `t_p = M √(ln p / n)`. Values `M ≤ 2` are accepted with a
    /// warning.
    pub fn new(m: f64, p: usize, n: usize) -> Result<Self> {
        if p < 2 || n < 1 {
            return Err(Error::Dimension(format!("threshold needs p >= 2 and n >= 1, got p={p}, n={n}")));
        }
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidParameter(format!("M must be positive, got {m}")));
        }
        if m <= 2.0 {
            warn!("threshold constant M = {m} is not above 2");
        }
        Ok(Self {
            m,
            t_p: default_threshold(p, n, m),
        })
    }

    /// Rule with an explicit level.
    pub fn with_level(t_p: f64) -> Result<Self> {
        if !(t_p > 0.0 && t_p.is_finite()) {
            return Err(Error::InvalidParameter(format!("threshold must be positive, got {t_p}")));
        }
        Ok(Self { m: f64::NAN, t_p })
    }
}

/// Keeps off-diagonal entries with `|M_ij| > t_p` and zeroes the rest. The
/// diagonal is left untouched.
pub fn threshold_estimate(m: &SymmetricMatrix, rule: &ThresholdRule) -> SymmetricMatrix {
    m.map(|i, j, v| if i == j || v.abs() > rule.t_p { v } else { 0.0 })
}

/// `Π_i M[σ_i, σ_{i+1}]` with `σ_{k+1} = σ_1`. Indices are zero-based.
pub fn path_product(m: &DataMatrix, sigma: &[usize]) -> Result<f64> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!("path product needs a square matrix, got {}x{}", n, m.ncols())));
    }
    if sigma.is_empty() {
        return Err(Error::InvalidParameter("empty path".into()));
    }
    if let Some(&index) = sigma.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index, dim: n });
    }
    let k = sigma.len();
    Ok((0..k).map(|i| m[(sigma[i], sigma[(i + 1) % k])]).product())
}

/// Average of [`path_product`] over all strictly increasing `k`-paths.
/// Enumerates every path, so only small `n` is allowed.
pub fn increasing_path_average_bruteforce(m: &DataMatrix, k: usize) -> Result<f64> {
    let n = m.nrows();
    if n > MAX_BRUTEFORCE_DIM {
        return Err(Error::TooLarge(format!(
            "brute force enumeration is limited to n <= {MAX_BRUTEFORCE_DIM} (got {n}); use moment_estimate"
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("path length {k} must be in 1..={n}")));
    }
    let mut sigma: Vec<usize> = (0..k).collect();
    let mut total = 0.0;
    let mut count = 0u64;
    loop {
        total += path_product(m, &sigma)?;
        count += 1;
        // next combination in lexicographic order
        let mut i = k;
        while i > 0 && sigma[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        sigma[i - 1] += 1;
        for j in i..k {
            sigma[j] = sigma[j - 1] + 1;
        }
    }
    Ok(total / count as f64)
}

/// `ln C(n, k)`.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// `value / C(n, k)`. Small coefficients are formed exactly, large ones in
/// log space.
fn divide_by_binomial(value: f64, n: usize, k: usize) -> f64 {
    let log = ln_binomial(n, k);
    if log < 36.0 {
        let mut c = 1.0;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        value / c.round()
    } else {
        value * (-log).exp()
    }
}

/// `C(n,k)⁻¹ tr(G^{k−1} M)` with `G` the strictly upper triangular part of
/// the square matrix `M`, by repeated `n × n` products.
pub fn increasing_path_average(m: &DataMatrix, k: usize) -> Result<f64> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!("need a square matrix, got {}x{}", n, m.ncols())));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("path length {k} must be in 1..={n}")));
    }
    let g = DataMatrix::from_fn(n, n, |i, j| if j > i { m[(i, j)] } else { 0.0 });
    let mut product = m.clone();
    for _ in 1..k {
        product = &g * &product;
    }
    Ok(divide_by_binomial(product.trace(), n, k))
}

/// `m̂_k = C(n,k)⁻¹ tr(G^{k−1} X′B⁻¹X)` for `k = 1..=ell`, where `G` is the
/// strictly upper triangular part of `X′B⁻¹X` and `b` holds the diagonal of
/// `B`.
///
/// With `Y = B^{−1/2} X` the trace equals `tr(Y G^{k−1} Y′)`, so only `n × p`
/// products are formed.
pub fn moment_estimates(x: &DataMatrix, b: &[f64], ell: usize) -> Result<Vec<f64>> {
    let (p, n) = x.shape();
    if b.len() != p {
        return Err(Error::Dimension(format!("B has {} entries, X has {p} rows", b.len())));
    }
    if let Some((index, &value)) = b.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveDiagonal { index, value });
    }
    if ell == 0 || ell > n {
        return Err(Error::InvalidParameter(format!("moment order {ell} must be in 1..={n}")));
    }
    let mut y = x.clone();
    for (i, &bi) in b.iter().enumerate() {
        let f = bi.sqrt().recip();
        y.row_mut(i).iter_mut().for_each(|v| *v *= f);
    }
    let yt = y.transpose();
    let mut g = &yt * &y;
    for j in 0..n {
        for i in j..n {
            g[(i, j)] = 0.0;
        }
    }
    let mut w = yt.clone();
    let mut out = Vec::with_capacity(ell);
    for k in 1..=ell {
        if k > 1 {
            w = &g * &w;
        }
        let trace: f64 = y.iter().zip(w.transpose().iter()).map(|(a, b)| a * b).sum();
        out.push(divide_by_binomial(trace, n, k));
    }
    Ok(out)
}

/// Single-order form of [`moment_estimates`].
pub fn moment_estimate(x: &DataMatrix, b: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > x.ncols() {
        return Err(Error::InvalidParameter(format!(
            "moment order {k} must be in 1..={}",
            x.ncols()
        )));
    }
    Ok(*moment_estimates(x, b, k)?.last().unwrap())
}

/// Estimated power sums `(p, m̂_2, …, m̂_ℓ)` of the eigenvalues of `Γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    p: usize,
    values: Vec<f64>,
}

impl MomentVector {
    /// `higher` holds `m̂_2..=m̂_ℓ`; the first moment is fixed to `p`.
    pub fn new(p: usize, higher: Vec<f64>) -> Result<Self> {
        if p == 0 || higher.is_empty() {
            return Err(Error::InvalidParameter("moment vector needs p >= 1 and ell >= 2".into()));
        }
        if higher.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("moments must be finite".into()));
        }
        let mut values = vec![p as f64];
        values.extend(higher);
        Ok(Self { p, values })
    }

    /// Exact power sums of a list of eigenvalues.
    pub fn from_eigenvalues(eigenvalues: &[f64], ell: usize) -> Result<Self> {
        let higher = (2..=ell as i32)
            .map(|k| eigenvalues.iter().map(|l| l.powi(k)).sum())
            .collect();
        Self::new(eigenvalues.len(), higher)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn ell(&self) -> usize {
        self.values.len()
    }

    /// `m̂_k` for `1 ≤ k ≤ ℓ`.
    pub fn get(&self, k: usize) -> f64 {
        self.values[k - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Moments of the spectral distribution, `m̂_k / p`.
    pub fn normalized(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / self.p as f64).collect()
    }
}

/// Steps 1 and 2 of the moment method: `B = diag(S)` and
/// `m̂_k = moment_estimate(X, B, k)`.
pub fn estimate_correlation_moments(x: &DataMatrix, ell: usize) -> Result<MomentVector> {
    if ell < 2 {
        return Err(Error::InvalidParameter(format!("need ell >= 2, got {ell}")));
    }
    if x.ncols() < ell {
        return Err(Error::Dimension(format!("need n >= ell, got n={} and ell={ell}", x.ncols())));
    }
    let b = sample_covariance(x)?.diagonal();
    let all = moment_estimates(x, &b, ell)?;
    MomentVector::new(x.nrows(), all[1..].to_vec())
}

/// Grid of candidate eigenvalues `0, h, 2h, …` up to `upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportGrid {
    /// Defaults to `max(4, 2 m̂_2 / p)`.
    pub upper: Option<f64>,
    pub step: f64,
}

impl Default for SupportGrid {
    fn default() -> Self {
        Self {
            upper: None,
            step: DEFAULT_GRID_STEP,
        }
    }
}

/// Eigenvalue estimates with the fitted measure behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumEstimate {
    /// Descending, nonnegative, summing to `p`.
    pub eigenvalues: Vec<f64>,
    pub metadata: SpectrumMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumMetadata {
    pub ell: usize,
    pub p: usize,
    pub grid_upper: f64,
    pub grid_step: f64,
    /// Fitted atoms `(location, weight)` with positive weight.
    pub atoms: Vec<(f64, f64)>,
    /// `|Σ λ̂_i^k / m̂_k − 1|` for `k = 1..=ℓ`.
    pub residuals: Vec<f64>,
    /// Smallest eigenvalue of the normalized moment Hankel matrix.
    pub hankel_min_eigenvalue: f64,
    pub fit: FitKind,
}

/// Which candidate measure produced the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FitKind {
    /// Nonnegative least squares on the grid.
    Grid,
    /// Gauss quadrature with this many atoms.
    Gauss { atoms: usize },
}

impl SpectrumEstimate {
    pub fn max_residual(&self) -> f64 {
        self.metadata.residuals.iter().cloned().fold(0.0, f64::max)
    }

    /// Columns `index,estimate`, index starting at 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "estimate"])?;
        for (i, v) in self.eigenvalues.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{v:.12e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn metadata_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.metadata)?)
    }
}

/// Smallest eigenvalue of the Hankel matrix `(μ_{i+j})`, `μ_0 = 1`, after
/// scaling to unit diagonal.
fn hankel_min_eigenvalue(mu: &[f64]) -> Result<f64> {
    let mut full = vec![1.0];
    full.extend_from_slice(mu);
    let r = (full.len() - 1) / 2;
    let diag: Vec<f64> = (0..=r).map(|i| full[2 * i]).collect();
    if let Some(i) = diag.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::InfeasibleMoments(format!(
            "even moment of order {} is not positive",
            2 * i
        )));
    }
    let h = SymmetricMatrix::from_fn(r + 1, |i, j| full[i + j] / (diag[i] * diag[j]).sqrt());
    Ok(*h.eigenvalues()?.last().unwrap())
}

/// Lawson–Hanson nonnegative least squares, `min ||A x − b||` with `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (rows, cols) = a.shape();
    if b.len() != rows {
        return Err(Error::Dimension(format!("rhs has {} entries, matrix has {rows} rows", b.len())));
    }
    let tol = 1e-15 * a.norm().max(1.0) * b.norm().max(1.0);
    let mut x = DVector::<f64>::zeros(cols);
    let mut passive = vec![false; cols];
    let solve = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..cols).filter(|&j| passive[j]).collect();
        let sub = a.select_columns(&idx);
        let sol = sub
            .svd(true, true)
            .solve(b, 1e-14)
            .unwrap_or_else(|_| DVector::zeros(idx.len()));
        let mut full = DVector::zeros(cols);
        for (k, &j) in idx.iter().enumerate() {
            full[j] = sol[k];
        }
        full
    };
    let max_outer = 3 * cols + 10;
    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let next = (0..cols)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        match next {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => return Ok(x),
        }
        for _ in 0..cols {
            let s = solve(&passive);
            let bad: Vec<usize> = (0..cols).filter(|&j| passive[j] && s[j] <= 0.0).collect();
            if bad.is_empty() {
                x = s;
                break;
            }
            let alpha = bad
                .iter()
                .map(|&j| x[j] / (x[j] - s[j]))
                .fold(f64::INFINITY, f64::min);
            x += (s - &x) * alpha;
            for j in 0..cols {
                if passive[j] && x[j] <= 1e-15 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    Err(Error::NoConvergence {
        what: "nonnegative least squares",
        iterations: max_outer,
        residual: (a * &x - b).norm(),
    })
}

/// Nonnegative weights on `xs` matching mass and moments `mu`, each row
/// relative to its target. Returns the atoms with positive weight.
fn fit_atoms(xs: &[f64], mu: &[f64]) -> Result<Vec<(f64, f64)>> {
    let ell = mu.len();
    let mut a = DMatrix::<f64>::zeros(ell + 1, xs.len());
    for (g, &x) in xs.iter().enumerate() {
        a[(0, g)] = 1.0;
        let mut power = 1.0;
        for k in 1..=ell {
            power *= x;
            a[(k, g)] = power / mu[k - 1];
        }
    }
    let weights = nnls(&a, &DVector::from_element(ell + 1, 1.0))?;
    Ok(xs
        .iter()
        .zip(weights.iter())
        .filter(|(_, &w)| w > 1e-14)
        .map(|(&x, &w)| (x, w))
        .collect())
}

fn moment_residuals(atoms: &[(f64, f64)], mu: &[f64]) -> f64 {
    let mass = atoms.iter().map(|a| a.1).sum::<f64>() - 1.0;
    let rest = mu.iter().enumerate().map(|(k, &m)| {
        let power = (k + 1) as i32;
        atoms.iter().map(|&(x, w)| w * x.powi(power)).sum::<f64>() / m - 1.0
    });
    (mass * mass + rest.map(|r| r * r).sum::<f64>()).sqrt()
}

/// The `r`-point Gauss quadrature of the moment sequence `1, μ_1, …`
/// (Golub–Welsch), which matches `μ_1..μ_{2r−1}` exactly. `None` when the
/// leading Hankel block is not positive definite or a node is negative.
fn gauss_atoms(mu: &[f64], r: usize) -> Option<Vec<(f64, f64)>> {
    let moment = |i: usize| if i == 0 { 1.0 } else { mu[i - 1] };
    if 2 * r - 1 > mu.len() {
        return None;
    }
    let h = DMatrix::from_fn(r, r, |i, j| moment(i + j));
    let chol = h.cholesky()?;
    let l = chol.l();
    let last = DVector::from_fn(r, |i, _| moment(i + r));
    let tail = l.solve_lower_triangular(&last)?;
    // upper factor U = Lᵀ extended by the column `tail`
    let u = |i: usize, j: usize| if j == r { tail[i] } else { l[(j, i)] };
    let mut alpha = vec![0.0; r];
    let mut beta = vec![0.0; r];
    for j in 0..r {
        alpha[j] = u(j, j + 1) / u(j, j) - if j > 0 { u(j - 1, j) / u(j - 1, j - 1) } else { 0.0 };
        if j + 1 < r {
            beta[j + 1] = u(j + 1, j + 1) / u(j, j);
        }
    }
    let jacobi = SymmetricMatrix::from_fn(r, |i, j| {
        if i == j {
            alpha[i]
        } else if j == i + 1 {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = crate::linalg::sym_eigen(&jacobi).ok()?;
    let mut atoms: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &x)| (x, eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    if atoms.iter().any(|&(x, w)| !x.is_finite() || x < -1e-9 || !(w > 0.0)) {
        return None;
    }
    atoms.iter_mut().for_each(|a| a.0 = a.0.max(0.0));
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(atoms)
}

/// Step 3 of the moment method: fits a nonnegative measure on a uniform grid
/// to the mass and the moments (each row relative to its target), keeps
/// whichever of that fit and the Gauss quadratures of the moment sequence
/// matches the moments best, then reports the
/// `p` quantiles at levels `(i − ½)/p`, rescaled to sum to `p`.
pub fn reconstruct_spectrum(moments: &MomentVector, grid: &SupportGrid) -> Result<SpectrumEstimate> {
    let p = moments.p();
    let ell = moments.ell();
    if ell < 2 {
        return Err(Error::InvalidParameter("need at least two moments".into()));
    }
    if !(grid.step > 0.0 && grid.step.is_finite()) {
        return Err(Error::InvalidParameter(format!("grid step must be positive, got {}", grid.step)));
    }
    let mu = moments.normalized();
    let hankel = hankel_min_eigenvalue(&mu)?;
    if hankel < -HANKEL_TOLERANCE {
        return Err(Error::InfeasibleMoments(format!(
            "moment Hankel matrix has eigenvalue {hankel:.3e}; no nonnegative spectrum has these moments"
        )));
    }
    let upper = grid.upper.unwrap_or((2.0 * mu[1]).max(4.0));
    if !(upper > 0.0 && upper.is_finite()) {
        return Err(Error::InvalidParameter(format!("grid upper end must be positive, got {upper}")));
    }
    let count = (upper / grid.step).round() as usize + 1;
    let xs: Vec<f64> = (0..count).map(|i| i as f64 * grid.step).collect();
    let mut atoms = fit_atoms(&xs, &mu)?;
    let mut best = moment_residuals(&atoms, &mu);
    let mut fit = FitKind::Grid;
    for r in 1..=(ell + 1) / 2 {
        if let Some(candidate) = gauss_atoms(&mu, r) {
            let score = moment_residuals(&candidate, &mu);
            if score < best {
                best = score;
                atoms = candidate;
                fit = FitKind::Gauss { atoms: r };
            }
        }
    }
    let total: f64 = atoms.iter().map(|a| a.1).sum();
    if atoms.is_empty() || !(total > 0.0) {
        return Err(Error::InfeasibleMoments("fitted measure is empty".into()));
    }

    let mut eigenvalues = Vec::with_capacity(p);
    let mut cumulative = 0.0;
    let mut next = 0;
    for i in 0..p {
        let level = (i as f64 + 0.5) / p as f64;
        while next < atoms.len() - 1 && cumulative + atoms[next].1 / total < level {
            cumulative += atoms[next].1 / total;
            next += 1;
        }
        eigenvalues.push(atoms[next].0);
    }
    eigenvalues.reverse();
    let sum: f64 = eigenvalues.iter().sum();
    if sum > 0.0 {
        let f = p as f64 / sum;
        eigenvalues.iter_mut().for_each(|v| *v *= f);
    }
    let residuals = (1..=ell)
        .map(|k| {
            let fitted: f64 = eigenvalues.iter().map(|l| l.powi(k as i32)).sum();
            (fitted / moments.get(k) - 1.0).abs()
        })
        .collect();
    Ok(SpectrumEstimate {
        eigenvalues,
        metadata: SpectrumMetadata {
            ell,
            p,
            grid_upper: upper,
            grid_step: grid.step,
            atoms: atoms.into_iter().map(|(x, w)| (x, w / total)).collect(),
            residuals,
            hankel_min_eigenvalue: hankel,
            fit,
        },
    })
}

/// Reads a dense data matrix from CSV, one variable per row and one
/// observation per column, without a header.
pub fn read_data_matrix<R: Read>(input: R) -> Result<DataMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .enumerate()
            .map(|(j, field)| {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}, column {}: {field:?} is not a number", i + 1, j + 1)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite { row: i, col: j })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let p = rows.len();
    if p == 0 {
        return Err(Error::Parse("data file is empty".into()));
    }
    let n = rows[0].len();
    if let Some(i) = rows.iter().position(|r| r.len() != n) {
        return Err(Error::Dimension(format!("row {} has {} columns, expected {n}", i + 1, rows[i].len())));
    }
    Ok(DataMatrix::from_fn(p, n, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_a, sample_z, EntryLaw, MixingSpec};
    use crate::rng::RandomStream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn example() -> DataMatrix {
        DataMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0])
    }

    fn gaussian(p: usize, n: usize, seed: u64) -> DataMatrix {
        sample_z(&EntryLaw::Gaussian, p, n, &mut RandomStream::new(seed)).unwrap()
    }

    #[test]
    fn threshold_values() {
        assert_abs_diff_eq!(default_threshold(100, 100, 2.1), 0.450_653, epsilon = 1e-5);
        let e2 = std::f64::consts::E.powi(2);
        assert_abs_diff_eq!(2.1 * (e2.ln() / 4.0).sqrt(), 1.484_924, epsilon = 1e-5);
        let a = default_threshold(300, 100, 2.1);
        let b = default_threshold(300, 400, 2.1);
        assert_abs_diff_eq!(a / b, 2.0, epsilon = 1e-12);
        assert!(ThresholdRule::new(1.5, 10, 10).is_ok());
        assert!(ThresholdRule::new(2.1, 1, 10).is_err());
    }

    #[test]
    fn thresholding_hand_cases() {
        let rule = ThresholdRule::with_level(0.45).unwrap();
        let r = SymmetricMatrix::from_rows(&[
            vec![1.0, 0.6, 0.2],
            vec![0.6, 1.0, -0.3],
            vec![0.2, -0.3, 1.0],
        ])
        .unwrap();
        let est = threshold_estimate(&r, &rule);
        assert_eq!(est.get(0, 1), 0.6);
        assert_eq!(est.get(0, 2), 0.0);
        assert_eq!(est.get(1, 2), 0.0);
        assert_eq!(est.diagonal(), vec![1.0; 3]);
        let id = SymmetricMatrix::identity(4);
        assert_eq!(threshold_estimate(&id, &rule), id);
        let small = r.map(|i, j, v| if i == j { v } else { v * 0.1 });
        assert_eq!(threshold_estimate(&small, &rule), SymmetricMatrix::identity(3));
    }

    #[test]
    fn path_products() {
        let m = example();
        assert_eq!(path_product(&m, &[1]).unwrap(), 4.0);
        assert_eq!(path_product(&m, &[0, 1]).unwrap(), 4.0);
        assert_eq!(path_product(&m, &[0, 1, 2]).unwrap(), 30.0);
        assert!(matches!(
            path_product(&m, &[0, 3]),
            Err(Error::IndexOutOfRange { index: 3, dim: 3 })
        ));
    }

    #[test]
    fn worked_example_both_routes() {
        let m = example();
        assert_eq!(increasing_path_average_bruteforce(&m, 2).unwrap(), 38.0 / 3.0);
        assert_eq!(increasing_path_average(&m, 2).unwrap(), 38.0 / 3.0);
        let g = DataMatrix::from_fn(3, 3, |i, j| if j > i { m[(i, j)] } else { 0.0 });
        let gm = &g * &m;
        assert_eq!([gm[(0, 0)], gm[(1, 1)], gm[(2, 2)]], [13.0, 25.0, 0.0]);
        assert_eq!(increasing_path_average_bruteforce(&m, 1).unwrap(), 11.0 / 3.0);
        assert_eq!(increasing_path_average_bruteforce(&m, 3).unwrap(), 30.0);
        assert_eq!(increasing_path_average(&m, 3).unwrap(), 30.0);
    }

    #[test]
    fn bruteforce_limits() {
        let big = DataMatrix::identity(15, 15);
        assert!(matches!(increasing_path_average_bruteforce(&big, 2), Err(Error::TooLarge(_))));
        assert!(increasing_path_average_bruteforce(&example(), 4).is_err());
    }

    #[test]
    fn moment_order_one_is_scaled_trace() {
        let x = gaussian(4, 7, 3);
        let b = [1.0, 2.0, 0.5, 4.0];
        let m1 = moment_estimate(&x, &b, 1).unwrap();
        let direct: f64 = (0..4)
            .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>() / b[i])
            .sum::<f64>()
            / 7.0;
        assert_abs_diff_eq!(m1, direct, epsilon = 1e-12);
        assert!(moment_estimate(&x, &b, 8).is_err());
        assert!(moment_estimate(&x, &[1.0, 0.0, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn moment_estimate_unbiased_with_fixed_b() {
        // p=3, n=6, k=2 with B = diag(Σ)
        let mixing = build_a(&MixingSpec::RowScaled { scales: vec![1.0, 2.0, 0.5] }, 3).unwrap();
        let a = DataMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.6, 0.8, 0.0, 0.3, -0.4, 0.5]);
        let a = &mixing.a * a;
        let sigma = &a * a.transpose();
        let b: Vec<f64> = (0..3).map(|i| sigma[(i, i)]).collect();
        let d = DataMatrix::from_fn(3, 3, |i, j| sigma[(i, j)] / (b[i] * b[j]).sqrt());
        let exact = (&d * &d).trace();
        let reps = 100_000;
        let mut stream = RandomStream::new(11);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..reps {
            let z = sample_z(&EntryLaw::Gaussian, 3, 6, &mut stream).unwrap();
            let v = moment_estimate(&(&a * z), &b, 2).unwrap();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / reps as f64;
        let se = ((sum_sq / reps as f64 - mean * mean) / reps as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean}, exact {exact}, se {se}");
    }

    #[test]
    fn correlation_moments_identity() {
        let x = gaussian(50, 500, 5);
        let m = estimate_correlation_moments(&x, 3).unwrap();
        assert_eq!(m.get(1), 50.0);
        assert_eq!(m.ell(), 3);
        assert!((m.get(2) - 50.0).abs() < 2.5, "{}", m.get(2));
        let minimal = estimate_correlation_moments(&x, 2).unwrap();
        assert_eq!(minimal.values().len(), 2);
        assert!(estimate_correlation_moments(&x, 1).is_err());
    }

    #[test]
    fn correlation_moments_spiked() {
        let lambda = vec![vec![1.0, 0.8], vec![0.8, 1.0]];
        let mixing = build_a(&MixingSpec::Spiked { lambda }, 4).unwrap();
        let z = gaussian(4, 20_000, 9);
        let x = mixing.apply(&z).unwrap();
        let m = estimate_correlation_moments(&x, 2).unwrap();
        assert!((m.get(2) - 5.28).abs() < 0.25, "{}", m.get(2));
    }

    #[test]
    fn reconstruct_identity() {
        let m = MomentVector::from_eigenvalues(&[1.0; 10], 6).unwrap();
        let est = reconstruct_spectrum(&m, &SupportGrid::default()).unwrap();
        assert_eq!(est.eigenvalues.len(), 10);
        for v in &est.eigenvalues {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn reconstruct_two_atoms() {
        let m = MomentVector::new(4, vec![5.0, 7.0, 10.25]).unwrap();
        let est = reconstruct_spectrum(&m, &SupportGrid::default()).unwrap();
        let expected = [1.5, 1.5, 0.5, 0.5];
        for (v, e) in est.eigenvalues.iter().zip(expected) {
            assert!((v - e).abs() <= 0.02, "{:?}", est.eigenvalues);
        }
        assert_abs_diff_eq!(est.eigenvalues.iter().sum::<f64>(), 4.0, epsilon = 1e-9);
        assert!(est.max_residual() < 0.05);
    }

    #[test]
    fn reconstruct_rejects_infeasible() {
        let m = MomentVector::new(10, vec![5.0]).unwrap();
        assert!(matches!(
            reconstruct_spectrum(&m, &SupportGrid::default()),
            Err(Error::InfeasibleMoments(_))
        ));
    }

    #[test]
    fn spectrum_csv() {
        let m = MomentVector::new(4, vec![5.0, 7.0, 10.25]).unwrap();
        let est = reconstruct_spectrum(&m, &SupportGrid::default()).unwrap();
        let mut out = Vec::new();
        est.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("index,estimate\n1,"));
        assert_eq!(text.lines().count(), 5);
        let meta: serde_json::Value = serde_json::from_str(&est.metadata_json().unwrap()).unwrap();
        assert_eq!(meta["ell"], 4);
    }

    #[test]
    fn data_csv_ingestion() {
        let x = read_data_matrix("1, 2, 3\n4, 5, 6\n".as_bytes()).unwrap();
        assert_eq!(x.shape(), (2, 3));
        assert_eq!(x[(1, 2)], 6.0);
        assert!(read_data_matrix("1,2\n3\n".as_bytes()).is_err());
        assert!(read_data_matrix("1,x\n".as_bytes()).is_err());
        assert!(read_data_matrix("".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn path_identity(
            p in 1usize..5,
            n in 1usize..=10,
            k in 1usize..=4,
            seed in any::<u64>(),
        ) {
            prop_assume!(k <= n);
            let x = gaussian(p, n, seed);
            let m = x.transpose() * &x;
            let brute = increasing_path_average_bruteforce(&m, k).unwrap();
            let fast = moment_estimate(&x, &vec![1.0; p], k).unwrap();
            let via_gram = increasing_path_average(&m, k).unwrap();
            let scale = m.abs().max().powi(k as i32).max(1e-300);
            prop_assert!((brute - fast).abs() <= 1e-10 * scale);
            prop_assert!((brute - via_gram).abs() <= 1e-10 * scale);
        }

        #[test]
        fn threshold_idempotent(seed in any::<u64>(), t in 0.05..0.9f64) {
            let x = gaussian(6, 8, seed);
            let r = crate::stats::sample_correlation(&sample_covariance(&x).unwrap()).unwrap();
            let rule = ThresholdRule::with_level(t).unwrap();
            let once = threshold_estimate(&r, &rule);
            prop_assert_eq!(threshold_estimate(&once, &rule), once);
        }

        #[test]
        fn reconstruct_few_atoms(
            a in 0.1..0.8f64,
            gap1 in 0.4..1.0f64,
            gap2 in 0.4..1.0f64,
            c1 in 1usize..5,
            c2 in 1usize..5,
            c3 in 0usize..4,
        ) {
            let locations = [a, a + gap1, a + gap1 + gap2];
            let mut eig = Vec::new();
            for (loc, count) in locations.iter().zip([c1, c2, c3]) {
                eig.extend(std::iter::repeat(*loc).take(count));
            }
            // rescale to trace p
            let f = eig.len() as f64 / eig.iter().sum::<f64>();
            eig.iter_mut().for_each(|v| *v *= f);
            eig.sort_by(|x, y| y.total_cmp(x));
            let m = MomentVector::from_eigenvalues(&eig, 6).unwrap();
            let est = reconstruct_spectrum(&m, &SupportGrid::default()).unwrap();
            for (v, e) in est.eigenvalues.iter().zip(&eig) {
                prop_assert!((v - e).abs() <= 0.02, "{:?} vs {:?}", est.eigenvalues, eig);
            }
        }
    }
}
