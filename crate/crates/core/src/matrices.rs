//! Standard covariance and correlation matrices of a window, with 1/T
//! normalization throughout, and their with-diagonal and off-diagonal means.

use nalgebra::{DMatrix, DMatrixView};
use thiserror::Error;

/// Rows whose 1/T standard deviation is below this are treated as constant.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("off-diagonal mean needs dimension >= 2, got {0}")]
    TooSmall(usize),

    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    Covariance,
    Correlation,
    ReducedRank,
}

/// Dense symmetric matrix. Symmetry is exact: the lower triangle is always a
/// copy of the upper one.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    kind: MatrixKind,
    data: DMatrix<f64>,
}

impl SymmetricMatrix {
    /// Takes the upper triangle of `data` and mirrors it.
    pub fn from_upper(kind: MatrixKind, mut data: DMatrix<f64>) -> Result<Self, MatrixError> {
        let (rows, cols) = data.shape();
        if rows != cols {
            return Err(MatrixError::NotSquare { rows, cols });
        }
        mirror_upper(&mut data);
        Ok(Self { kind, data })
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.amax()
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    pub fn scaled(&self, c: f64) -> SymmetricMatrix {
        SymmetricMatrix {
            kind: self.kind,
            data: &self.data * c,
        }
    }
}

pub(crate) fn mirror_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

pub fn demean_rows(data: DMatrixView<'_, f64>) -> DMatrix<f64> {
    let mut out = data.clone_owned();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    out
}

/// Standardized data plus the rows that were too flat to standardize.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub data: DMatrix<f64>,
    pub degenerate: Vec<usize>,
}

/// Demeans each row and divides by its 1/T standard deviation. Rows with a
/// standard deviation below `sigma_floor` become all-zero and are reported.
pub fn standardize_rows(data: DMatrixView<'_, f64>, sigma_floor: f64) -> Standardized {
    let mut out = demean_rows(data);
    let t = out.ncols() as f64;
    let mut degenerate = Vec::new();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let sd = (row.norm_squared() / t).sqrt();
        if sd < sigma_floor || !sd.is_finite() {
            row.fill(0.0);
            degenerate.push(i);
        } else {
            row /= sd;
        }
    }
    Standardized {
        data: out,
        degenerate,
    }
}

fn gram(a: &DMatrix<f64>, kind: MatrixKind) -> SymmetricMatrix {
    let t = a.ncols() as f64;
    let mut m = a * a.transpose();
    m /= t;
    mirror_upper(&mut m);
    SymmetricMatrix { kind, data: m }
}

/// Σ = (1/T) A Aᵀ for a row-demeaned data matrix.
pub fn covariance(a: &DMatrix<f64>) -> SymmetricMatrix {
    gram(a, MatrixKind::Covariance)
}

/// C = (1/T) M Mᵀ. The diagonal is set to exactly 1, including degenerate
/// rows, whose off-diagonal entries are zero.
pub fn correlation(m: &Standardized) -> SymmetricMatrix {
    let mut c = gram(&m.data, MatrixKind::Correlation);
    c.data.fill_diagonal(1.0);
    c
}

/// (1/K²) Σ_{i,l} S_il.
pub fn mean_with_diagonal(s: &SymmetricMatrix) -> f64 {
    let k = s.dim() as f64;
    s.data.sum() / (k * k)
}

/// (1/(K(K−1))) Σ_{i≠j} S_ij.
pub fn mean_offdiagonal(s: &SymmetricMatrix) -> Result<f64, MatrixError> {
    let k = s.dim();
    if k < 2 {
        return Err(MatrixError::TooSmall(k));
    }
    let mut upper = 0.0;
    for j in 1..k {
        for i in 0..j {
            upper += s.data[(i, j)];
        }
    }
    Ok(2.0 * upper / (k * (k - 1)) as f64)
}
