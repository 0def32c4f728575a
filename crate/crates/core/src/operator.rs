//! Finite-dimensional stand-ins for the generator `A`.
//!
//! Bounded generators are dense matrices; unbounded ones (Laplacian-type) are
//! represented by an `N`-mode spectral truncation with an implicit
//! orthonormal eigenbasis, which keeps every statement checkable per mode.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;

/// Condition number above which dense solves log a warning.
pub const CONDITION_WARNING: f64 = 1e12;
/// Condition number above which a dense solve is declared singular.
const CONDITION_LIMIT: f64 = 1e15;

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorModel {
    Dense(DMatrix<f64>),
    /// Eigenvalues in descending order.
    Spectral(Vec<f64>),
}

impl OperatorModel {
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::Invalid(format!(
                "dense operator must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("dense operator has non-finite entries".into()));
        }
        Ok(OperatorModel::Dense(matrix))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid("dense operator rows must form a square matrix".into()));
        }
        OperatorModel::dense(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    /// The 1x1 dense operator `x -> value * x`.
    pub fn scalar(value: f64) -> Self {
        OperatorModel::Dense(DMatrix::from_element(1, 1, value))
    }

    pub fn spectral(mut eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Invalid("spectral operator needs at least one mode".into()));
        }
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("spectral operator has non-finite eigenvalues".into()));
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        Ok(OperatorModel::Spectral(eigenvalues))
    }

    /// Dirichlet Laplacian on `(0, length)`: `lambda_k = -(k pi / length)^2`.
    pub fn laplacian_modes(modes: usize, length: f64) -> Result<Self> {
        if modes == 0 || !(length > 0.0) {
            return Err(Error::Invalid("laplacian_modes needs N >= 1 and length > 0".into()));
        }
        let eig = (1..=modes)
            .map(|k| -(k as f64 * std::f64::consts::PI / length).powi(2))
            .collect();
        OperatorModel::spectral(eig)
    }

    pub fn dim(&self) -> usize {
        match self {
            OperatorModel::Dense(m) => m.nrows(),
            OperatorModel::Spectral(e) => e.len(),
        }
    }

    pub fn is_spectral(&self) -> bool {
        matches!(self, OperatorModel::Spectral(_))
    }

    fn check_dim(&self, x: &Vector) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        self.check_dim(x)?;
        Ok(self.apply_unchecked(x))
    }

    pub(crate) fn apply_unchecked(&self, x: &Vector) -> Vector {
        match self {
            OperatorModel::Dense(m) => m * x,
            OperatorModel::Spectral(e) => {
                DVector::from_iterator(e.len(), e.iter().zip(x.iter()).map(|(l, v)| l * v))
            }
        }
    }

    /// Left multiplication `A * M` for a matrix with `dim` rows.
    pub(crate) fn apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            OperatorModel::Dense(a) => a * m,
            OperatorModel::Spectral(e) => {
                let mut out = m.clone();
                for (k, mut row) in out.row_iter_mut().enumerate() {
                    row *= e[k];
                }
                out
            }
        }
    }

    /// Solves `(lambda I - A) y = x`.
    pub fn resolvent_apply(&self, lambda: f64, x: &Vector) -> Result<Vector> {
        self.check_dim(x)?;
        match self {
            OperatorModel::Spectral(e) => {
                let mut y = x.clone();
                for (k, &l) in e.iter().enumerate() {
                    let gap = lambda - l;
                    if gap.abs() <= 1e-12 * lambda.abs().max(l.abs()).max(1.0) {
                        return Err(Error::SingularResolvent { lambda });
                    }
                    y[k] /= gap;
                }
                Ok(y)
            }
            OperatorModel::Dense(_) => {
                let lu = self.shifted_lu(lambda, -1.0)?;
                Ok(lu.solve(x).ok_or(Error::SingularResolvent { lambda })?)
            }
        }
    }

    /// `R(lambda, A) = (lambda I - A)^{-1}` as an operator of the same kind.
    pub fn resolvent_operator(&self, lambda: f64) -> Result<OperatorModel> {
        match self {
            OperatorModel::Spectral(e) => {
                let mut out = Vec::with_capacity(e.len());
                for &l in e {
                    let gap = lambda - l;
                    if gap.abs() <= 1e-12 * lambda.abs().max(l.abs()).max(1.0) {
                        return Err(Error::SingularResolvent { lambda });
                    }
                    out.push(1.0 / gap);
                }
                OperatorModel::spectral(out)
            }
            OperatorModel::Dense(m) => {
                let d = m.nrows();
                let lu = self.shifted_lu(lambda, -1.0)?;
                let inv = lu
                    .solve(&DMatrix::identity(d, d))
                    .ok_or(Error::SingularResolvent { lambda })?;
                Ok(OperatorModel::Dense(inv))
            }
        }
    }

    /// LU factorization of `shift * I + scale * A` with a condition check.
    pub(crate) fn shifted_lu(
        &self,
        shift: f64,
        scale: f64,
    ) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
        let OperatorModel::Dense(a) = self else {
            unreachable!("shifted_lu is only used on dense models");
        };
        let d = a.nrows();
        let m = DMatrix::identity(d, d) * shift + a * scale;
        let lu = m.clone().lu();
        let inv = lu.try_inverse().ok_or(Error::SingularResolvent { lambda: shift })?;
        let cond = one_norm(&m) * one_norm(&inv);
        if !cond.is_finite() || cond > CONDITION_LIMIT {
            return Err(Error::SingularResolvent { lambda: shift });
        }
        if cond > CONDITION_WARNING {
            log::warn!("ill-conditioned solve at shift {shift}: condition number {cond:.3e}");
        }
        Ok(lu)
    }

    /// `|x|_{D(A)} = (|x|^2 + |Ax|^2)^{1/2}`.
    pub fn graph_norm(&self, x: &Vector) -> Result<f64> {
        let ax = self.apply(x)?;
        Ok((x.norm_squared() + ax.norm_squared()).sqrt())
    }

    pub fn adjoint(&self) -> OperatorModel {
        match self {
            OperatorModel::Dense(m) => OperatorModel::Dense(m.transpose()),
            OperatorModel::Spectral(_) => self.clone(),
        }
    }

    /// Eigenvalues (real parts) of the model.
    pub fn eigenvalues_re(&self) -> Vec<f64> {
        match self {
            OperatorModel::Spectral(e) => e.clone(),
            OperatorModel::Dense(m) => m.complex_eigenvalues().iter().map(|z| z.re).collect(),
        }
    }

    /// Largest modulus of an eigenvalue.
    pub fn spectral_radius(&self) -> f64 {
        match self {
            OperatorModel::Spectral(e) => e.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())),
            OperatorModel::Dense(m) => {
                m.complex_eigenvalues().iter().fold(0.0, |acc: f64, z| acc.max(z.norm()))
            }
        }
    }

    /// Growth bound proxy `w = max(0, max Re eig)`.
    pub fn growth_bound(&self) -> f64 {
        self.eigenvalues_re().into_iter().fold(0.0, f64::max)
    }

    /// Dense matrix form (diagonal for spectral models).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            OperatorModel::Dense(m) => m.clone(),
            OperatorModel::Spectral(e) => DMatrix::from_diagonal(&DVector::from_column_slice(e)),
        }
    }

    /// Operator 2-norm.
    pub fn norm(&self) -> f64 {
        match self {
            OperatorModel::Spectral(e) => e.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())),
            OperatorModel::Dense(m) => matrix_norm2(m),
        }
    }

    /// Exponent `p` in `|lambda_k| ~ k^p`, fitted by least squares on
    /// `log|lambda_k|` against `log k` (spectral models only).
    pub fn eigenvalue_growth(&self) -> Option<f64> {
        let OperatorModel::Spectral(e) = self else { return None };
        let mut mags: Vec<f64> = e.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| a.total_cmp(b));
        let pts: Vec<(f64, f64)> = mags
            .iter()
            .enumerate()
            .filter(|(_, m)| **m > 0.0)
            .map(|(k, m)| (((k + 1) as f64).ln(), m.ln()))
            .collect();
        if pts.len() < 2 {
            return Some(0.0);
        }
        Some(least_squares_slope(&pts))
    }
}

pub(crate) fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub(crate) fn matrix_norm2(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone().singular_values().iter().fold(0.0, |acc: f64, v| acc.max(*v))
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Operator section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Dense { matrix: Vec<Vec<f64>> },
    Spectral { eigenvalues: Vec<f64> },
    LaplacianModes {
        #[serde(rename = "N")]
        modes: usize,
        #[serde(default = "unit_length")]
        length: f64,
    },
}

fn unit_length() -> f64 {
    1.0
}

impl OperatorSpec {
    pub fn build(&self) -> Result<OperatorModel> {
        match self {
            OperatorSpec::Dense { matrix } => OperatorModel::from_rows(matrix),
            OperatorSpec::Spectral { eigenvalues } => OperatorModel::spectral(eigenvalues.clone()),
            OperatorSpec::LaplacianModes { modes, length } => {
                OperatorModel::laplacian_modes(*modes, *length)
            }
        }
    }
}
