//! Symmetric eigendecomposition, leading-mode removal and the inverse
//! participation ratio.
//!
//! Eigenpairs are stored in ascending order, so the market mode is the last
//! column. Each eigenvector's sign is fixed so its components sum to a
//! non-negative value; dyadics and IPR values do not depend on that choice.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::matrices::{mirror_upper, MatrixKind, SymmetricMatrix};

/// Relative gap below which the top eigenvalue is considered degenerate.
pub const TIE_TOLERANCE: f64 = 1e-12;
/// Relative magnitude of negative eigenvalues treated as rounding noise.
pub const PSD_TOLERANCE: f64 = 1e-10;
/// Allowed deviation of an eigenvector's norm from 1 for [`ipr`].
pub const NORM_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("eigensolver did not converge for a {dim}x{dim} matrix")]
    NoConvergence { dim: usize },

    #[error("cannot remove {m} leading modes from a {k}x{k} matrix (need 1 <= m < K)")]
    ModeCount { m: usize, k: usize },

    #[error("vector is not normalized (norm {0})")]
    NotNormalized(f64),
}

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    source: SymmetricMatrix,
}

impl SpectralDecomposition {
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Column `i` pairs with `eigenvalues()[i]`.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn source(&self) -> &SymmetricMatrix {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn largest(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    pub fn smallest(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Eigenvector of the largest eigenvalue.
    pub fn market_mode(&self) -> DVector<f64> {
        self.eigenvectors.column(self.dim() - 1).clone_owned()
    }

    /// Eigenvalue `i` with rounding-level negatives clamped to zero.
    pub fn clamped_eigenvalue(&self, i: usize) -> f64 {
        let v = self.eigenvalues[i];
        let tol = PSD_TOLERANCE * self.source.max_abs();
        if v < 0.0 && v >= -tol {
            0.0
        } else {
            v
        }
    }

    /// True when the `m` largest eigenvalues are not separated from the rest.
    pub fn boundary_is_degenerate(&self, m: usize) -> bool {
        let k = self.dim();
        if m == 0 || m >= k {
            return false;
        }
        let upper = self.eigenvalues[k - m];
        let lower = self.eigenvalues[k - m - 1];
        upper - lower <= TIE_TOLERANCE * upper.abs()
    }

    /// κ u uᵀ for eigenpair `i`.
    pub fn dyadic(&self, i: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        self.add_dyadic(&mut out, i);
        mirror_upper(&mut out);
        out
    }

    fn add_dyadic(&self, acc: &mut DMatrix<f64>, i: usize) {
        let kappa = self.clamped_eigenvalue(i);
        let u = self.eigenvectors.column(i);
        let k = self.dim();
        for c in 0..k {
            let w = kappa * u[c];
            for r in 0..=c {
                acc[(r, c)] += w * u[r];
            }
        }
    }

    /// ‖S − Σ_i κ_i u_i u_iᵀ‖_max.
    pub fn reconstruction_error(&self) -> f64 {
        let mut acc = DMatrix::zeros(self.dim(), self.dim());
        for i in 0..self.dim() {
            self.add_dyadic(&mut acc, i);
        }
        mirror_upper(&mut acc);
        (self.source.as_matrix() - acc).amax()
    }

    /// ‖UᵀU − I‖_max.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.dim();
        (self.eigenvectors.transpose() * &self.eigenvectors - DMatrix::identity(k, k)).amax()
    }
}

pub fn eigendecompose(s: &SymmetricMatrix) -> Result<SpectralDecomposition, SpectralError> {
    let k = s.dim();
    if k == 0 {
        return Ok(SpectralDecomposition {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
            source: s.clone(),
        });
    }
    let eig = SymmetricEigen::try_new(s.as_matrix().clone(), f64::EPSILON, 1000 * k.max(10))
        .ok_or(SpectralError::NoConvergence { dim: k })?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = eig.eigenvectors.select_columns(&order);
    for mut col in eigenvectors.column_iter_mut() {
        if col.sum() < 0.0 {
            col.neg_mut();
        }
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
        source: s.clone(),
    })
}

/// A matrix split into its `removed_count` leading dyadics and the rest.
#[derive(Debug, Clone)]
pub struct ModeSplit {
    pub leading: SymmetricMatrix,
    pub residual: SymmetricMatrix,
    pub removed_count: usize,
    /// The removed modes share an eigenvalue with a retained one, so the split
    /// depends on the basis chosen inside that eigenspace.
    pub degenerate: bool,
}

/// Removes κ_K u_K u_Kᵀ.
pub fn split_market_mode(d: &SpectralDecomposition) -> Result<ModeSplit, SpectralError> {
    remove_leading_modes(d, 1)
}

/// residual = S − Σ_{i=K−m+1..K} κ_i u_i u_iᵀ.
pub fn remove_leading_modes(
    d: &SpectralDecomposition,
    m: usize,
) -> Result<ModeSplit, SpectralError> {
    let k = d.dim();
    if m == 0 || m >= k {
        return Err(SpectralError::ModeCount { m, k });
    }
    let mut leading = DMatrix::zeros(k, k);
    for i in (k - m)..k {
        d.add_dyadic(&mut leading, i);
    }
    mirror_upper(&mut leading);
    let residual = d.source.as_matrix() - &leading;
    Ok(ModeSplit {
        leading: SymmetricMatrix::from_upper(MatrixKind::ReducedRank, leading)
            .expect("square by construction"),
        residual: SymmetricMatrix::from_upper(MatrixKind::ReducedRank, residual)
            .expect("square by construction"),
        removed_count: m,
        degenerate: d.boundary_is_degenerate(m),
    })
}

/// Inverse participation ratio Σ_j v_j⁴ of a unit vector.
pub fn ipr(v: &[f64]) -> Result<f64, SpectralError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(SpectralError::NotNormalized(norm));
    }
    Ok(v.iter().map(|x| (x * x) * (x * x)).sum())
}
