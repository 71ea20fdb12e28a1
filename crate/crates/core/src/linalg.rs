//! Dense real symmetric matrices, eigendecomposition and empirical spectral
//! distributions.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Column-major dense real matrix used for data (`p × n`) and general
/// square work matrices.
pub type DataMatrix = DMatrix<f64>;

/// Relative off-diagonal mass at which the Jacobi sweep stops.
pub const JACOBI_TOLERANCE: f64 = 1e-13;
/// Maximum number of cyclic Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense real symmetric `p × p` matrix.
///
/// Only the upper triangle is stored (packed row-major), so `get(i, j)` and
/// `get(j, i)` read the same memory and symmetry is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    upper: Vec<f64>,
}

impl SymmetricMatrix {
    fn offset(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // start of row i in the packed layout
        i * self.dim - (i * i.saturating_sub(1)) / 2 + (j - i)
    }

    /// The `p × p` zero matrix. Panics if `dim == 0`.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "symmetric matrix must have dim >= 1");
        Self {
            dim,
            upper: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dim])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    /// Builds a matrix from `f(i, j)` evaluated on the upper triangle `i <= j`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let k = m.offset(i, j);
                m.upper[k] = f(i, j);
            }
        }
        m
    }

    /// Builds from nested rows, reading the upper triangle.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::Dimension("empty matrix".into()));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("rows must form a square matrix".into()));
        }
        Ok(Self::from_fn(dim, |i, j| rows[i][j]))
    }

    /// Takes the upper triangle of a square dense matrix.
    pub fn from_dense(m: &DataMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "expected non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self::from_fn(m.nrows(), |i, j| m[(i, j)]))
    }

    /// `X Xᵀ / divisor` for a `p × n` matrix `X`.
    pub fn gram(x: &DataMatrix, divisor: f64) -> Self {
        let g = x * x.transpose();
        Self::from_fn(x.nrows(), |i, j| g[(i, j)] / divisor)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[self.offset(i, j)]
    }

    /// Sets entry `(i, j)` and, implicitly, `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let k = self.offset(i, j);
        self.upper[k] = value;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.upper.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.get(i, j);
                sum += if i == j { v * v } else { 2.0 * v * v };
            }
        }
        sum.sqrt()
    }

    /// Largest absolute off-diagonal entry (0 for `dim == 1`).
    pub fn max_abs_offdiag(&self) -> f64 {
        let mut best = 0.0_f64;
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                best = best.max(self.get(i, j).abs());
            }
        }
        best
    }

    pub fn map(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        Self::from_fn(self.dim, |i, j| f(i, j, self.get(i, j)))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            upper: self.upper.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other)?;
        Ok(Self {
            dim: self.dim,
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other)?;
        Ok(Self {
            dim: self.dim,
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "{} vs {}",
                self.dim, other.dim
            )));
        }
        Ok(())
    }

    /// `D M D` for a diagonal `D` given by its entries.
    pub fn congruence_diag(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.dim {
            return Err(Error::Dimension(format!(
                "diagonal of length {} for dim {}",
                d.len(),
                self.dim
            )));
        }
        Ok(self.map(|i, j, v| d[i] * v * d[j]))
    }

    pub fn to_dense(&self) -> DataMatrix {
        DataMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    fn check_finite(&self) -> Result<()> {
        for i in 0..self.dim {
            for j in i..self.dim {
                if !self.get(i, j).is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(())
    }

    /// Eigenvalues in descending order.
    ///
    /// Uses Householder tridiagonalisation with implicit QR (via `nalgebra`),
    /// which is much faster than the Jacobi sweep for large `p`. Use
    /// [`sym_eigen`] when eigenvectors are needed.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.check_finite()?;
        let mut vals: Vec<f64> = self.to_dense().symmetric_eigenvalues().iter().copied().collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        Ok(vals)
    }

    /// Spectral norm `max_i |λ_i|`.
    pub fn spectral_norm(&self) -> Result<f64> {
        spectral_norm(self)
    }
}

/// Eigenvalues (descending) and orthonormal eigenvectors (as columns).
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DataMatrix,
}

impl EigenDecomposition {
    /// `Q Λ Qᵀ`.
    pub fn reconstruct(&self) -> SymmetricMatrix {
        let p = self.eigenvalues.len();
        let q = &self.eigenvectors;
        SymmetricMatrix::from_fn(p, |i, j| {
            (0..p)
                .map(|k| q[(i, k)] * self.eigenvalues[k] * q[(j, k)])
                .sum()
        })
    }

    /// `Q f(Λ) Qᵀ`, e.g. a matrix square root.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> SymmetricMatrix {
        let vals: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let p = vals.len();
        let q = &self.eigenvectors;
        SymmetricMatrix::from_fn(p, |i, j| (0..p).map(|k| q[(i, k)] * vals[k] * q[(j, k)]).sum())
    }
}

/// Full symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps run in row-cyclic order until the off-diagonal Frobenius mass
/// drops below `1e-13 · ||M||_F` (at most 100 sweeps). Eigenvalues are
/// returned in descending order; equal eigenvalues keep the order in which
/// they appear on the rotated diagonal.
pub fn sym_eigen(m: &SymmetricMatrix) -> Result<EigenDecomposition> {
    m.check_finite()?;
    let n = m.dim();
    // row-major working copy
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = m.get(i, j);
        }
    }
    // vt holds eigenvectors as rows so that rotations touch contiguous memory
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }

    let target = JACOBI_TOLERANCE * m.frobenius_norm();
    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        s.sqrt()
    };

    let mut off = off_norm(&a);
    let mut sweeps = 0;
    while off > target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                what: "jacobi eigensolver",
                iterations: sweeps,
                residual: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let new_p = c * akp - s * akq;
                    let new_q = s * akp + c * akq;
                    a[k * n + p] = new_p;
                    a[p * n + k] = new_p;
                    a[k * n + q] = new_q;
                    a[q * n + k] = new_q;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                let (row_p, row_q) = if p < q {
                    let (lo, hi) = vt.split_at_mut(q * n);
                    (&mut lo[p * n..p * n + n], &mut hi[..n])
                } else {
                    unreachable!()
                };
                for (vp, vq) in row_p.iter_mut().zip(row_q.iter_mut()) {
                    let x = *vp;
                    let y = *vq;
                    *vp = c * x - s * y;
                    *vq = s * x + c * y;
                }
            }
        }
        sweeps += 1;
        off = off_norm(&a);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
    let eigenvectors = DataMatrix::from_fn(n, n, |row, col| vt[order[col] * n + row]);
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// `max_i |λ_i(m)|`, the operator norm of a symmetric matrix.
pub fn spectral_norm(m: &SymmetricMatrix) -> Result<f64> {
    let vals = m.eigenvalues()?;
    Ok(vals.first().unwrap().abs().max(vals.last().unwrap().abs()))
}

/// A cumulative distribution function on the real line.
pub trait Cdf {
    /// `F(x)`, right-continuous.
    fn cdf(&self, x: f64) -> f64;
    /// Left limit `F(x-)`.
    fn cdf_left(&self, x: f64) -> f64;
    /// Locations of jumps (atoms).
    fn jump_points(&self) -> Vec<f64>;
    /// Smallest closed interval carrying all mass.
    fn support(&self) -> (f64, f64);
}

/// Uniform distribution on a finite set of eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSpectralDistribution {
    points: Vec<f64>,
}

impl EmpiricalSpectralDistribution {
    pub fn new(mut points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySpectrum);
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        points.sort_by(|a, b| a.total_cmp(b));
        Ok(Self { points })
    }

    /// ESD of a symmetric matrix.
    pub fn of_matrix(m: &SymmetricMatrix) -> Result<Self> {
        Self::new(m.eigenvalues()?)
    }

    /// Ascending points.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl Cdf for EmpiricalSpectralDistribution {
    fn cdf(&self, x: f64) -> f64 {
        self.points.partition_point(|&v| v <= x) as f64 / self.points.len() as f64
    }

    fn cdf_left(&self, x: f64) -> f64 {
        self.points.partition_point(|&v| v < x) as f64 / self.points.len() as f64
    }

    fn jump_points(&self) -> Vec<f64> {
        let mut pts = self.points.clone();
        pts.dedup();
        pts
    }

    fn support(&self) -> (f64, f64) {
        (self.points[0], *self.points.last().unwrap())
    }
}

/// Number of uniform grid points added to the jump points when comparing
/// two CDFs.
pub const KOLMOGOROV_GRID: usize = 2048;

/// Kolmogorov distance `sup_x |F(x) − G(x)|`, evaluated (with left limits)
/// on the union of both jump sets and a uniform grid spanning both supports.
pub fn kolmogorov_distance(f: &dyn Cdf, g: &dyn Cdf) -> Result<f64> {
    let (fl, fh) = f.support();
    let (gl, gh) = g.support();
    let lo = fl.min(gl);
    let hi = fh.max(gh);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidParameter("unbounded support".into()));
    }
    let mut grid = f.jump_points();
    grid.extend(g.jump_points());
    let steps = (KOLMOGOROV_GRID - 1) as f64;
    grid.extend((0..KOLMOGOROV_GRID).map(|k| lo + (hi - lo) * k as f64 / steps));
    let mut best = 0.0_f64;
    for x in grid {
        best = best
            .max((f.cdf(x) - g.cdf(x)).abs())
            .max((f.cdf_left(x) - g.cdf_left(x)).abs());
    }
    Ok(best.min(1.0))
}
