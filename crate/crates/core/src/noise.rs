//! Truncated Q-Wiener increments, Hilbert-Schmidt norms and integrands `Psi`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::operator::OperatorModel;

/// Diagonal covariance `Q = diag(q_1..q_J)` in the basis `e_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub q: Vec<f64>,
    /// `q_j = 1` for all `j` (trace of `Q` diverges as `J` grows).
    pub cylindrical: bool,
}

impl NoiseSpec {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::Invalid("noise needs J >= 1".into()));
        }
        if let Some(v) = q.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invalid(format!("covariance entries must be >= 0, got {v}")));
        }
        Ok(NoiseSpec { q, cylindrical: false })
    }

    pub fn cylindrical(j: usize) -> Result<Self> {
        let mut n = NoiseSpec::new(vec![1.0; j])?;
        n.cylindrical = true;
        Ok(n)
    }

    /// Number of retained modes `J`.
    pub fn modes(&self) -> usize {
        self.q.len()
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }
}

/// `(sum_j q_j |C e_j|^2)^{1/2}` for `C` of shape `dim x J`.
pub fn hs_norm(c: &DMatrix<f64>, noise: &NoiseSpec) -> Result<f64> {
    if c.ncols() != noise.modes() {
        return Err(Error::DimensionMismatch { expected: noise.modes(), got: c.ncols() });
    }
    Ok(hs_norm_sq_unchecked(c, &noise.q).sqrt())
}

pub(crate) fn hs_norm_sq_unchecked(c: &DMatrix<f64>, q: &[f64]) -> f64 {
    c.column_iter().zip(q).map(|(col, q)| q * col.norm_squared()).sum()
}

type PsiRule = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Deterministic integrand `Psi(t): U_0 -> H`, realized as `dim x J` matrices.
#[derive(Clone)]
pub enum PsiProcess {
    Constant(DMatrix<f64>),
    TimeVarying { rows: usize, cols: usize, rule: PsiRule },
    /// Diagonal entries `j^{-alpha}`, `j = 1..min(dim, J)`.
    DiagDecay { alpha: f64 },
    /// `B Psi(t)` for a fixed operator `B`.
    Composed { op: OperatorModel, inner: Box<PsiProcess> },
}

impl fmt::Debug for PsiProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PsiProcess::Constant(m) => write!(f, "Constant({}x{})", m.nrows(), m.ncols()),
            PsiProcess::TimeVarying { rows, cols, .. } => write!(f, "TimeVarying({rows}x{cols})"),
            PsiProcess::DiagDecay { alpha } => write!(f, "DiagDecay(alpha={alpha})"),
            PsiProcess::Composed { inner, .. } => write!(f, "Composed({inner:?})"),
        }
    }
}

impl PsiProcess {
    pub fn constant(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("psi has non-finite entries".into()));
        }
        Ok(PsiProcess::Constant(m))
    }

    pub fn time_varying(
        rows: usize,
        cols: usize,
        rule: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        PsiProcess::TimeVarying { rows, cols, rule: Arc::new(rule) }
    }

    pub fn diag_decay(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::Invalid(format!("diag_decay alpha must be finite, got {alpha}")));
        }
        Ok(PsiProcess::DiagDecay { alpha })
    }

    /// The zero integrand.
    pub fn zero(dim: usize, modes: usize) -> Self {
        PsiProcess::Constant(DMatrix::zeros(dim, modes))
    }

    /// `B Psi`.
    pub fn left_mul(&self, op: &OperatorModel) -> Self {
        PsiProcess::Composed { op: op.clone(), inner: Box::new(self.clone()) }
    }

    /// `Psi(t)` as a `dim x modes` matrix.
    pub fn matrix(&self, t: f64, dim: usize, modes: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            PsiProcess::Constant(m) => m.clone(),
            PsiProcess::TimeVarying { rule, .. } => rule(t),
            PsiProcess::DiagDecay { alpha } => {
                DMatrix::from_fn(dim, modes, |r, c| if r == c { ((r + 1) as f64).powf(-alpha) } else { 0.0 })
            }
            PsiProcess::Composed { op, inner } => {
                if op.dim() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: op.dim() });
                }
                op.apply_matrix(&inner.matrix(t, dim, modes)?)
            }
        };
        if m.nrows() != dim || m.ncols() != modes {
            return Err(Error::DimensionMismatch { expected: dim * modes, got: m.nrows() * m.ncols() });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("psi({t}) has non-finite entries")));
        }
        Ok(m)
    }

    /// `Psi(t_i)` for every node.
    pub fn sample(&self, grid: Grid, dim: usize, modes: usize) -> Result<Vec<DMatrix<f64>>> {
        (0..=grid.n).map(|i| self.matrix(grid.t(i), dim, modes)).collect()
    }

    pub fn is_zero(&self) -> bool {
        match self {
            PsiProcess::Constant(m) => m.iter().all(|v| *v == 0.0),
            PsiProcess::Composed { inner, .. } => inner.is_zero(),
            _ => false,
        }
    }

    /// Checks that `Psi` takes values in `D(A)`, so that `A Psi` stays
    /// Hilbert-Schmidt as the truncation grows. Bounded (dense) `A` needs
    /// nothing. For spectral `A` with `|lambda_k| ~ k^p` a `diag_decay`
    /// integrand needs `alpha > p + 1/2`; explicit matrices are finite-rank
    /// and always qualify.
    pub fn check_domain_valued(&self, a: &OperatorModel) -> Result<()> {
        if !a.is_spectral() {
            return Ok(());
        }
        match self {
            PsiProcess::DiagDecay { alpha } => {
                let p = a.eigenvalue_growth().unwrap_or(0.0);
                if *alpha > p + 0.5 {
                    Ok(())
                } else {
                    Err(Error::Hypothesis(format!(
                        "psi must take values in D(A) (A psi Hilbert-Schmidt): diag_decay alpha = {alpha} \
                         needs to exceed eigenvalue growth {p:.3} + 0.5"
                    )))
                }
            }
            PsiProcess::Composed { inner, .. } => inner.check_domain_valued(a),
            _ => Ok(()),
        }
    }
}

/// `int_0^T |Psi(t)|_{L_2^0}^2 dt` by the trapezoid rule.
pub fn psi_norm_sq(psi: &PsiProcess, noise: &NoiseSpec, grid: Grid, dim: usize) -> Result<f64> {
    let vals: Vec<f64> = psi
        .sample(grid, dim, noise.modes())?
        .iter()
        .map(|m| hs_norm_sq_unchecked(m, &noise.q))
        .collect();
    Ok(trapezoid(&vals, grid.dt))
}

pub(crate) fn trapezoid(vals: &[f64], h: f64) -> f64 {
    let n = vals.len();
    if n < 2 {
        return 0.0;
    }
    let inner = crate::grid::pairwise_sum(&vals[1..n - 1]);
    h * (0.5 * (vals[0] + vals[n - 1]) + inner)
}

/// Counter-addressable standard normal for `(seed, path, step, mode)`.
///
/// Path `p` owns ChaCha stream `p`; draw `k = step * J + mode` uses words
/// `4k..4k+4` (two 64-bit uniforms, Box-Muller cosine branch).
pub fn normal_at(seed: u64, path: u64, step: usize, mode: usize, modes: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng.set_word_pos(4 * (step as u128 * modes as u128 + mode as u128));
    box_muller(&mut rng)
}

#[inline]
fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * SCALE;
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Increments `dW[p][i][j] = sqrt(q_j) (beta_j(t_{i+1}) - beta_j(t_i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementBatch {
    pub seed: u64,
    pub grid: Grid,
    pub paths: usize,
    pub noise: NoiseSpec,
    /// Layout `[p][i][j]`, `i < n`.
    data: Vec<f64>,
}

impl IncrementBatch {
    pub fn modes(&self) -> usize {
        self.noise.modes()
    }

    /// Increments of path `p` as `n` rows of `J` values.
    pub fn path(&self, p: usize) -> &[f64] {
        let stride = self.grid.n * self.modes();
        &self.data[p * stride..(p + 1) * stride]
    }

    pub fn increment(&self, p: usize, i: usize, j: usize) -> f64 {
        self.path(p)[i * self.modes() + j]
    }

    /// The batch on the grid coarsened by `factor`, with each coarse
    /// increment the sum of the fine increments it covers.
    pub fn coarsen(&self, factor: usize) -> Result<IncrementBatch> {
        let grid = self.grid.coarsen(factor)?;
        let jm = self.modes();
        let mut data = Vec::with_capacity(self.paths * grid.n * jm);
        for p in 0..self.paths {
            let fine = self.path(p);
            for i in 0..grid.n {
                for j in 0..jm {
                    let s: f64 = (0..factor).map(|k| fine[(i * factor + k) * jm + j]).sum();
                    data.push(if self.noise.q[j] == 0.0 { 0.0 } else { s });
                }
            }
        }
        Ok(IncrementBatch { seed: self.seed, grid, paths: self.paths, noise: self.noise.clone(), data })
    }

    /// `W(t_i)` on path `p` (partial sums of the increments).
    pub fn wiener_path(&self, p: usize) -> Vec<Vec<f64>> {
        let jm = self.modes();
        let inc = self.path(p);
        let mut out = vec![vec![0.0; jm]];
        for i in 0..self.grid.n {
            let prev = out[i].clone();
            out.push(prev.iter().enumerate().map(|(j, w)| w + inc[i * jm + j]).collect());
        }
        out
    }
}

/// Draws a reproducible batch. Results do not depend on the thread count.
pub fn sample_increments(noise: &NoiseSpec, grid: Grid, paths: usize, seed: u64) -> Result<IncrementBatch> {
    if paths == 0 {
        return Err(Error::Invalid("need at least one path".into()));
    }
    let jm = noise.modes();
    let scale: Vec<f64> = noise.q.iter().map(|q| (q * grid.dt).sqrt()).collect();
    let per_path: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut v = Vec::with_capacity(grid.n * jm);
            for _ in 0..grid.n {
                for s in &scale {
                    let z = box_muller(&mut rng);
                    v.push(if *s == 0.0 { 0.0 } else { s * z });
                }
            }
            v
        })
        .collect();
    Ok(IncrementBatch { seed, grid, paths, noise: noise.clone(), data: per_path.concat() })
}
