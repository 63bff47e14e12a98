//! Cumulative scatter of past-task features and the safe subspace built from it.
//!
//! The scatter `S = Σ XᵀX` summarizes every feature row seen so far without
//! keeping the rows. For any orthonormal `P`, `‖X P‖²_F = trace(Pᵀ S P)`, so the
//! rank-`k` basis that disturbs past features least is spanned by the
//! eigenvectors of `S` with the `k` smallest eigenvalues.

use crate::error::{Error, Result};
use crate::matrixkit::{self, frobenius_sq, matmul, matmul_tn, Matrix};

/// Running `XᵀX` over every feature row accumulated so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterState {
    s: Matrix,
    n_samples: u64,
    /// Accumulate unit-normalized rows instead of raw features.
    pub normalize_rows: bool,
}

impl ScatterState {
    pub fn new(d_o: usize) -> Self {
        Self {
            s: Matrix::zeros(d_o, d_o),
            n_samples: 0,
            normalize_rows: false,
        }
    }

    pub fn with_normalization(d_o: usize, normalize_rows: bool) -> Self {
        Self {
            normalize_rows,
            ..Self::new(d_o)
        }
    }

    /// Rebuild from a stored scatter matrix (checkpoint load).
    pub fn from_parts(s: Matrix, n_samples: u64, normalize_rows: bool) -> Result<Self> {
        if s.rows() != s.cols() {
            return Err(Error::shape("ScatterState::from_parts", "scatter must be square"));
        }
        Ok(Self {
            s,
            n_samples,
            normalize_rows,
        })
    }

    pub fn scatter(&self) -> &Matrix {
        &self.s
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn d_o(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples == 0
    }

    /// `S ← S + XᵀX`, then re-symmetrize.
    pub fn accumulate(&self, x_new: &Matrix) -> Result<ScatterState> {
        if x_new.cols() != self.d_o() {
            return Err(Error::shape(
                "accumulate",
                format!("features have width {}, scatter expects {}", x_new.cols(), self.d_o()),
            ));
        }
        let gram = if self.normalize_rows {
            let x = matrixkit::l2_normalize_rows(x_new)?;
            matmul_tn(&x, &x)?
        } else {
            matmul_tn(x_new, x_new)?
        };
        let s = self.s.add(&gram)?.symmetrized()?;
        if !s.is_finite() {
            return Err(Error::NonFinite("accumulate"));
        }
        Ok(ScatterState {
            s,
            n_samples: self.n_samples + x_new.rows() as u64,
            normalize_rows: self.normalize_rows,
        })
    }

    /// Rank-`k` orthogonal safe subspace of the current scatter.
    pub fn safe_subspace(&self, k: usize) -> Result<SafeSubspace> {
        safe_subspace(self, k)
    }
}

/// Orthonormal basis `P*` (`d_o × k`) of least past-feature energy.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeSubspace {
    pub basis: Matrix,
    pub k: usize,
    /// Sum of the `k` smallest scatter eigenvalues, i.e. `‖X_old P*‖²_F`.
    pub residual_energy: f64,
}

/// Eigenvectors of the scatter with the `k` smallest eigenvalues, ascending.
pub fn safe_subspace(state: &ScatterState, k: usize) -> Result<SafeSubspace> {
    let d_o = state.d_o();
    if k == 0 || k > d_o {
        return Err(Error::InvalidArgument(format!(
            "subspace rank {k} outside 1..={d_o}"
        )));
    }
    let eig = matrixkit::sym_eig(state.scatter())?;
    // tiny negative eigenvalues are roundoff on a PSD matrix
    let residual_energy = eig.values[..k].iter().map(|v| v.max(0.0)).sum();
    Ok(SafeSubspace {
        basis: eig.vectors.first_cols(k),
        k,
        residual_energy,
    })
}

/// `‖X_old P‖²_F`
pub fn interference(x_old: &Matrix, p: &Matrix) -> Result<f64> {
    if x_old.cols() != p.rows() {
        return Err(Error::shape(
            "interference",
            format!("features width {} vs basis rows {}", x_old.cols(), p.rows()),
        ));
    }
    Ok(frobenius_sq(&matmul(x_old, p)?))
}

/// Default subspace rank: `max(1, d_o / 8)`.
pub fn default_rank(d_o: usize) -> usize {
    (d_o / 8).max(1)
}
