//! Kernels, Gram matrices, bandwidth selection and ridge-regularized SPD solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, range_err, Error, Result};
use crate::points::PointSet;

/// Jitter values tried in order when a factorization fails.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return config_err(format!("kernel bandwidth must be positive and finite, got {bandwidth}"));
        }
        Ok(Self { family: KernelFamily::Gaussian, bandwidth })
    }

    /// Bandwidth chosen by the median heuristic on `points`.
    pub fn gaussian_median(points: &PointSet) -> Result<Self> {
        Self::gaussian(median_heuristic(points)?)
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self.family {
            KernelFamily::Gaussian => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
        }
    }

    /// Kernel value from a squared distance.
    #[inline]
    pub fn from_sq_dist(&self, d2: f64) -> f64 {
        (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }
}

/// Dense kernel matrix between two point sets.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
}

impl GramMatrix {
    pub fn from_matrix(entries: DMatrix<f64>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let m = &self.entries;
        if m.nrows() != m.ncols() {
            return f64::INFINITY;
        }
        (m - m.transpose()).amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.entries + self.entries.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }
}

fn check_dims(a: &PointSet, b: &PointSet) -> Result<()> {
    if a.dim() != b.dim() {
        return range_err(format!("point dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    Ok(())
}

/// Entry (i, j) = k(a_i, b_j).
pub fn gram(kernel: &KernelSpec, a: &PointSet, b: &PointSet) -> Result<GramMatrix> {
    check_dims(a, b)?;
    let (n, m) = (a.len(), b.len());
    let mut data = vec![0.0; n * m];
    // Column-major: column j holds k(., b_j).
    data.par_chunks_mut(n.max(1)).enumerate().for_each(|(j, col)| {
        if n == 0 {
            return;
        }
        let bj = b.row(j);
        for (i, v) in col.iter_mut().enumerate() {
            *v = kernel.eval(a.row(i), bj);
        }
    });
    Ok(GramMatrix { entries: DMatrix::from_vec(n, m, data) })
}

/// Symmetric Gram matrix of a point set with itself.
pub fn gram_sym(kernel: &KernelSpec, a: &PointSet) -> GramMatrix {
    let n = a.len();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = 1.0;
        let aj = a.row(j);
        for i in 0..j {
            let v = kernel.eval(a.row(i), aj);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    GramMatrix { entries: m }
}

/// Vector (k(p_i, x))_i.
pub fn kernel_vector(kernel: &KernelSpec, points: &PointSet, x: &[f64]) -> Vec<f64> {
    points.iter().map(|p| kernel.eval(p, x)).collect()
}

/// Median Euclidean distance over distinct pairs.
pub fn median_heuristic(points: &PointSet) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("median heuristic needs at least 2 points, got {n}")));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let pi = points.row(i);
        for j in (i + 1)..n {
            let pj = points.row(j);
            let s: f64 = pi.iter().zip(pj).map(|(x, y)| (x - y) * (x - y)).sum();
            d.push(s.sqrt());
        }
    }
    let len = d.len();
    let mid = len / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if len % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median <= 0.0 {
        return Err(Error::Degenerate("median pairwise distance is zero".into()));
    }
    Ok(median)
}

/// Cholesky factor of `A + (ridge + jitter) I` for the smallest working jitter.
#[derive(Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl std::fmt::Debug for SpdFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdFactor").field("size", &self.size()).field("jitter", &self.jitter).finish()
    }
}

impl SpdFactor {
    pub fn new(matrix: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return range_err(format!("matrix is {}x{}, expected square", n, matrix.ncols()));
        }
        if !(ridge >= 0.0) {
            return config_err(format!("ridge must be nonnegative, got {ridge}"));
        }
        for &jitter in &JITTER_LADDER {
            let mut a = matrix.clone();
            for i in 0..n {
                a[(i, i)] += ridge + jitter;
            }
            if let Some(chol) = Cholesky::new(a) {
                return Ok(Self { chol, jitter });
            }
        }
        Err(Error::NumericalRank { size: n, max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn size(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(rhs);
        self.chol.solve(&b).as_slice().to_vec()
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RidgeSolution {
    pub alpha: Vec<f64>,
    /// Jitter that had to be added on top of the ridge.
    pub jitter: f64,
    /// ‖(G + ridge I) α − y‖.
    pub residual_norm: f64,
}

/// Solves (G + ridge I) α = y through a Cholesky factorization with the jitter ladder.
pub fn ridge_solve(g: &GramMatrix, y: &[f64], ridge: f64) -> Result<RidgeSolution> {
    let n = g.nrows();
    if y.len() != n {
        return range_err(format!("right-hand side has length {} but the matrix is {n}x{n}", y.len()));
    }
    let factor = SpdFactor::new(g.entries(), ridge)?;
    let alpha = factor.solve_vec(y);
    let a = DVector::from_column_slice(&alpha);
    let mut r = g.entries() * &a;
    for i in 0..n {
        r[i] += ridge * alpha[i] - y[i];
    }
    Ok(RidgeSolution { alpha, jitter: factor.jitter(), residual_norm: r.norm() })
}
