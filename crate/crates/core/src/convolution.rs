//! Discrete stochastic convolutions `W^Psi(t) = int_0^t S(t - tau) Psi(tau) dW(tau)`
//! and checks of the strong, weak and mild solution notions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{mean_and_se, pairwise_sum, Grid};
use crate::kernel::{Kernel, ProductWeights};
use crate::noise::{hs_norm_sq_unchecked, sample_increments, trapezoid, IncrementBatch, NoiseSpec, PsiProcess};
use crate::operator::{OperatorModel, Vector};
use crate::resolvent::{build_resolvent, build_resolvent_with, make_yosida, ResolventFamily, Samples};
use crate::volterra::{dot, SubstepPolicy, Verdict};

/// Internal refinement used for reference families in refinement studies and
/// for the mild side of [`mild_vs_weak`]: at least four internal steps per
/// grid step, so the family is resolved more finely than any scheme it is
/// compared against.
pub fn reference_policy() -> SubstepPolicy {
    SubstepPolicy { min_substeps: 4, ..SubstepPolicy::default() }
}

/// Paths `X[p][i]` in `R^dim`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: Grid,
    pub paths: usize,
    pub dim: usize,
    pub seed: u64,
    pub psi: PsiProcess,
    pub scheme: String,
    /// Layout `[p][i][k]`.
    values: Vec<f64>,
}

impl PathEnsemble {
    pub fn path(&self, p: usize) -> &[f64] {
        let stride = self.grid.len() * self.dim;
        &self.values[p * stride..(p + 1) * stride]
    }

    pub fn value(&self, p: usize, i: usize) -> Vector {
        let d = self.dim;
        DVector::from_column_slice(&self.path(p)[i * d..(i + 1) * d])
    }

    fn from_paths(
        grid: Grid,
        dim: usize,
        seed: u64,
        psi: PsiProcess,
        scheme: String,
        per_path: Vec<Vec<f64>>,
    ) -> Self {
        PathEnsemble { grid, paths: per_path.len(), dim, seed, psi, scheme, values: per_path.concat() }
    }

    /// Ensemble mean of `f(X[p][i])` at node `i`, pairwise-summed over paths.
    fn node_mean(&self, i: usize, f: impl Fn(&[f64]) -> f64) -> (f64, f64) {
        let d = self.dim;
        let xs: Vec<f64> = (0..self.paths).map(|p| f(&self.path(p)[i * d..(i + 1) * d])).collect();
        mean_and_se(&xs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualKind {
    Strong,
    Weak,
    MildVsWeak,
    Isometry,
    Exchange,
    SquareIntegrability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsometryProbe {
    pub t: f64,
    pub mc_mean: f64,
    pub se: f64,
    /// `sum_{j<i} dt |S(t_i - t_j) Psi(t_j)|^2`, the exact second moment of
    /// the discrete convolution.
    pub deterministic: f64,
    /// Trapezoid value of `int_0^t |S(t - tau) Psi(tau)|^2 d tau`.
    pub quadrature: f64,
    pub z: f64,
}

/// Per-path statistic (usually the max residual over the grid) with its
/// ensemble summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub kind: ResidualKind,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub paths: usize,
    pub per_path: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub max: f64,
    /// Ensemble mean of the residual at each node.
    pub mean_curve: Vec<f64>,
    /// Ensemble mean of `max_i |X(t_i)|`, the size of what is being checked.
    pub scale: f64,
    pub extra: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub probes: Vec<IsometryProbe>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verdict: Option<Verdict>,
}

impl ResidualReport {
    fn from_curves(kind: ResidualKind, grid: Grid, curves: &[Vec<f64>], scale: f64) -> Self {
        let per_path: Vec<f64> = curves.iter().map(|c| c.iter().copied().fold(0.0, f64::max)).collect();
        let (mean, se) = mean_and_se(&per_path);
        let max = per_path.iter().copied().fold(0.0, f64::max);
        let mean_curve = (0..grid.len())
            .map(|i| {
                let col: Vec<f64> = curves.iter().map(|c| c[i]).collect();
                pairwise_sum(&col) / curves.len().max(1) as f64
            })
            .collect();
        ResidualReport {
            kind,
            dt: grid.dt,
            t_end: grid.t_end(),
            paths: curves.len(),
            per_path,
            mean,
            se,
            max,
            mean_curve,
            scale,
            extra: BTreeMap::new(),
            probes: Vec::new(),
            verdict: None,
        }
    }

    /// `mean / scale` (0 when nothing moves).
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.mean / self.scale
        } else {
            0.0
        }
    }
}

/// `G_m = Psi(t_m) dW_m` for one path, layout `[m][k]`, `m < n`.
fn forcing(psi: &[DMatrix<f64>], batch: &IncrementBatch, p: usize, dim: usize) -> Vec<f64> {
    let jm = batch.modes();
    let inc = batch.path(p);
    let mut g = Vec::with_capacity(batch.grid.n * dim);
    for m in 0..batch.grid.n {
        let dw = DVector::from_column_slice(&inc[m * jm..(m + 1) * jm]);
        g.extend_from_slice((&psi[m] * dw).as_slice());
    }
    g
}

/// Splits `[i][k]`-ordered data into per-component series.
fn components(v: &[f64], len: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..dim).map(|k| (0..len).map(|i| v[i * dim + k]).collect()).collect()
}

/// Reversed entry series of `S` for `X_i = sum_{j<i} S(t_i - t_j) g_j`:
/// `rev[(r, c)][x] = S(t_{n-x})[r, c]`, only structurally nonzero entries.
struct ConvPlan {
    entries: Vec<(usize, usize, Vec<f64>)>,
}

impl ConvPlan {
    fn new(s: &ResolventFamily) -> Self {
        let entries = match &s.samples {
            Samples::Modes(m) => {
                m.iter().enumerate().map(|(k, v)| (k, k, v.iter().rev().copied().collect())).collect()
            }
            Samples::Dense(d) => {
                let dim = s.dim();
                let mut e = Vec::with_capacity(dim * dim);
                for r in 0..dim {
                    for c in 0..dim {
                        let series: Vec<f64> = d.iter().rev().map(|m| m[(r, c)]).collect();
                        if series.iter().any(|v| *v != 0.0) {
                            e.push((r, c, series));
                        }
                    }
                }
                e
            }
        };
        ConvPlan { entries }
    }

    /// `X_i` for `i = 0..=n`, layout `[i][k]`.
    fn apply(&self, g: &[f64], n: usize, dim: usize) -> Vec<f64> {
        let gc = components(g, n, dim);
        let mut out = vec![0.0; (n + 1) * dim];
        for (r, c, rev) in &self.entries {
            for i in 1..=n {
                out[i * dim + r] += dot(&rev[n - i..n], &gc[*c][..i]);
            }
        }
        out
    }
}

fn check_batch(s: &ResolventFamily, batch: &IncrementBatch) -> Result<()> {
    if !s.grid.same_as(&batch.grid) {
        return Err(Error::Invalid(format!(
            "resolvent grid (dt={}, n={}) differs from increment grid (dt={}, n={})",
            s.grid.dt, s.grid.n, batch.grid.dt, batch.grid.n
        )));
    }
    Ok(())
}

/// Left-endpoint (Ito) sums `W^Psi(t_i) = sum_{j<i} S(t_i - t_j) Psi(t_j) dW_j`.
pub fn stochastic_convolution(s: &ResolventFamily, psi: &PsiProcess, batch: &IncrementBatch) -> Result<PathEnsemble> {
    check_batch(s, batch)?;
    let dim = s.dim();
    let n = s.grid.n;
    let psi_t = psi.sample(s.grid, dim, batch.modes())?;
    let plan = ConvPlan::new(s);
    let per_path: Vec<Vec<f64>> = (0..batch.paths)
        .into_par_iter()
        .map(|p| plan.apply(&forcing(&psi_t, batch, p, dim), n, dim))
        .collect();
    Ok(PathEnsemble::from_paths(s.grid, dim, batch.seed, psi.clone(), s.scheme.clone(), per_path))
}

fn check_ensemble(ens: &PathEnsemble, a: &OperatorModel, batch: &IncrementBatch) -> Result<()> {
    if !ens.grid.same_as(&batch.grid) || ens.paths != batch.paths || ens.seed != batch.seed {
        return Err(Error::Invalid("ensemble was not built from this increment batch".into()));
    }
    if ens.dim != a.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: ens.dim });
    }
    Ok(())
}

/// Weights for the jump-adapted product rule.
///
/// On the cell `[t_m, t_{m+1}]` the path is interpolated linearly from its
/// right limit `X_m + G_m` to `X_{m+1}`, so `int_0^{t_i} a(t_i - s) Y(s) ds`
/// becomes `sum_j w[i][j] Y_j + sum_{m<i} B_{i-1-m} G_m`.
struct JumpRule<'a> {
    w: &'a ProductWeights,
    rev_omega: Vec<f64>,
    rev_b: Vec<f64>,
}

impl<'a> JumpRule<'a> {
    fn new(w: &'a ProductWeights) -> Self {
        let n = w.n;
        JumpRule {
            w,
            rev_omega: (0..n).rev().map(|k| w.omega(k)).collect(),
            rev_b: (0..n).rev().map(|c| w.left_node_weight(c)).collect(),
        }
    }

    /// `sum_{j<=i} w[i][j] x_j + sum_{m<i} B_{i-1-m} g_m` for a scalar series.
    fn integral(&self, x: &[f64], g: &[f64], i: usize) -> f64 {
        if i == 0 {
            return 0.0;
        }
        let n = self.w.n;
        self.w.left_node_weight(i - 1) * x[0]
            + dot(&self.rev_omega[n - i..n - 1], &x[1..i])
            + self.w.diagonal() * x[i]
            + dot(&self.rev_b[n - i..n], &g[..i])
    }
}

/// `R(t_i) = |X_i - (a * A X)(t_i) - sum_{j<i} Psi(t_j) dW_j|` per path.
pub fn strong_residual(
    ens: &PathEnsemble,
    a: &OperatorModel,
    kernel: &Kernel,
    batch: &IncrementBatch,
) -> Result<ResidualReport> {
    check_ensemble(ens, a, batch)?;
    ens.psi.check_domain_valued(a)?;
    let (n, dim) = (ens.grid.n, ens.dim);
    let w = kernel.moment_weights(ens.grid.dt, n)?;
    let rule = JumpRule::new(&w);
    let psi_t = ens.psi.sample(ens.grid, dim, batch.modes())?;
    let out: Vec<(Vec<f64>, f64, f64)> = (0..ens.paths)
        .into_par_iter()
        .map(|p| {
            let x = ens.path(p);
            let g = forcing(&psi_t, batch, p, dim);
            let xc = components(x, n + 1, dim);
            let gc = components(&g, n, dim);
            let mut curve = Vec::with_capacity(n + 1);
            let mut noise_sum = DVector::zeros(dim);
            let mut xmax: f64 = 0.0;
            for i in 0..=n {
                if i > 0 {
                    noise_sum += DVector::from_column_slice(&g[(i - 1) * dim..i * dim]);
                }
                let conv = DVector::from_fn(dim, |k, _| rule.integral(&xc[k], &gc[k], i));
                let xi = DVector::from_column_slice(&x[i * dim..(i + 1) * dim]);
                xmax = xmax.max(xi.norm());
                curve.push((&xi - a.apply_unchecked(&conv) - &noise_sum).norm());
            }
            // int_0^T |a(T - tau)| |A X(tau)| d tau
            let proxy: f64 = (0..=n)
                .map(|j| {
                    let xj = DVector::from_column_slice(&x[j * dim..(j + 1) * dim]);
                    w.weight(n, j).abs() * a.apply_unchecked(&xj).norm()
                })
                .sum();
            (curve, xmax, proxy)
        })
        .collect();
    let curves: Vec<Vec<f64>> = out.iter().map(|o| o.0.clone()).collect();
    let xmax: Vec<f64> = out.iter().map(|o| o.1).collect();
    let proxy: Vec<f64> = out.iter().map(|o| o.2).collect();
    let mut rep = ResidualReport::from_curves(ResidualKind::Strong, ens.grid, &curves, mean_and_se(&xmax).0);
    rep.extra.insert("integrability_proxy_mean".into(), mean_and_se(&proxy).0);
    rep.extra.insert("integrability_proxy_max".into(), proxy.iter().copied().fold(0.0, f64::max));
    rep.extra.insert("relative".into(), rep.relative());
    Ok(rep)
}

/// Residual of `<X(t), xi> = int a(t - tau) <X(tau), A* xi> d tau + <int Psi dW, xi>`.
/// Only `A*` acting on `xi` is needed, never `A` on the path.
pub fn weak_residual(
    ens: &PathEnsemble,
    a: &OperatorModel,
    kernel: &Kernel,
    batch: &IncrementBatch,
    xi: &Vector,
) -> Result<ResidualReport> {
    check_ensemble(ens, a, batch)?;
    if xi.len() != ens.dim {
        return Err(Error::DimensionMismatch { expected: ens.dim, got: xi.len() });
    }
    let (n, dim) = (ens.grid.n, ens.dim);
    let eta = a.adjoint().apply_unchecked(xi);
    let w = kernel.moment_weights(ens.grid.dt, n)?;
    let rule = JumpRule::new(&w);
    let psi_t = ens.psi.sample(ens.grid, dim, batch.modes())?;
    let pair = |v: &[f64], y: &Vector, len: usize| -> Vec<f64> {
        (0..len).map(|i| dot(&v[i * dim..(i + 1) * dim], y.as_slice())).collect()
    };
    let out: Vec<(Vec<f64>, f64)> = (0..ens.paths)
        .into_par_iter()
        .map(|p| {
            let x = ens.path(p);
            let g = forcing(&psi_t, batch, p, dim);
            let (x_xi, x_eta) = (pair(x, xi, n + 1), pair(x, &eta, n + 1));
            let (g_xi, g_eta) = (pair(&g, xi, n), pair(&g, &eta, n));
            let mut curve = Vec::with_capacity(n + 1);
            let mut noise = 0.0;
            for i in 0..=n {
                if i > 0 {
                    noise += g_xi[i - 1];
                }
                curve.push((x_xi[i] - rule.integral(&x_eta, &g_eta, i) - noise).abs());
            }
            let scale = x_xi.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            (curve, scale)
        })
        .collect();
    let curves: Vec<Vec<f64>> = out.iter().map(|o| o.0.clone()).collect();
    let scales: Vec<f64> = out.iter().map(|o| o.1).collect();
    let mut rep = ResidualReport::from_curves(ResidualKind::Weak, ens.grid, &curves, mean_and_se(&scales).0);
    rep.extra.insert("relative".into(), rep.relative());
    Ok(rep)
}

/// Steps the weak identity tested against every basis functional `e_k`:
/// `<X_i, e_k> = <X_0, e_k> + <int a(t_i - .) X, A* e_k> + <sum_{m<i} G_m, e_k>`,
/// with the history integral by the jump-adapted product rule and the newest
/// node treated implicitly.
fn weak_stepped(
    a: &OperatorModel,
    rule: &JumpRule,
    x0: &Vector,
    g: &[f64],
    n: usize,
    solver: &StepSolver,
) -> Vec<f64> {
    let dim = x0.len();
    let adj = a.adjoint();
    let basis_images: Vec<Vector> = (0..dim)
        .map(|k| adj.apply_unchecked(&DVector::from_fn(dim, |r, _| if r == k { 1.0 } else { 0.0 })))
        .collect();
    let gc = components(g, n, dim);
    let mut xc: Vec<Vec<f64>> = (0..dim).map(|k| vec![x0[k]; 1]).collect();
    let mut out = Vec::with_capacity((n + 1) * dim);
    out.extend_from_slice(x0.as_slice());
    let mut noise = DVector::zeros(dim);
    for i in 1..=n {
        noise += DVector::from_column_slice(&g[(i - 1) * dim..i * dim]);
        // history part of the integral (newest node excluded)
        let hist = DVector::from_fn(dim, |k, _| {
            let mut tmp = xc[k].clone();
            tmp.push(0.0);
            rule.integral(&tmp, &gc[k], i)
        });
        let a_hist = DVector::from_fn(dim, |k, _| hist.dot(&basis_images[k]));
        let rhs = x0 + a_hist + &noise;
        let xi = solver.solve(&rhs);
        for k in 0..dim {
            xc[k].push(xi[k]);
        }
        out.extend_from_slice(xi.as_slice());
    }
    out
}

/// `(I - omega_0 A)^{-1}`.
enum StepSolver {
    Diagonal(Vec<f64>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl StepSolver {
    fn new(a: &OperatorModel, w0: f64) -> Result<Self> {
        match a {
            OperatorModel::Spectral(e) => {
                let d: Vec<f64> = e.iter().map(|l| 1.0 - w0 * l).collect();
                if d.iter().any(|v| v.abs() < 1e-14) {
                    return Err(Error::StepSingular { t: 0.0 });
                }
                Ok(StepSolver::Diagonal(d))
            }
            OperatorModel::Dense(m) => {
                let d = m.nrows();
                let lu = (DMatrix::identity(d, d) - m * w0).lu();
                if !lu.is_invertible() {
                    return Err(Error::StepSingular { t: 0.0 });
                }
                Ok(StepSolver::Lu(lu))
            }
        }
    }

    fn solve(&self, rhs: &Vector) -> Vector {
        match self {
            StepSolver::Diagonal(d) => DVector::from_fn(rhs.len(), |k, _| rhs[k] / d[k]),
            StepSolver::Lu(lu) => lu.solve(rhs).expect("invertible step matrix"),
        }
    }
}

/// Compares the weak-stepped solution with the mild form
/// `S(t) X_0 + W^Psi(t)`, where `S` is a reference family. Requires a kernel
/// of bounded variation.
pub fn mild_vs_weak(
    a: &OperatorModel,
    kernel: &Kernel,
    psi: &PsiProcess,
    batch: &IncrementBatch,
    x0: &Vector,
) -> Result<ResidualReport> {
    if !kernel.is_bv() {
        return Err(Error::Hypothesis(
            "mild and weak solutions coincide only for kernels of bounded variation".into(),
        ));
    }
    let s = build_resolvent_with(a, kernel, batch.grid, &reference_policy())?;
    mild_vs_weak_with(a, kernel, psi, batch, x0, &s)
}

/// As [`mild_vs_weak`] with a caller-supplied family for the mild side.
pub fn mild_vs_weak_with(
    a: &OperatorModel,
    kernel: &Kernel,
    psi: &PsiProcess,
    batch: &IncrementBatch,
    x0: &Vector,
    s: &ResolventFamily,
) -> Result<ResidualReport> {
    if !kernel.is_bv() {
        return Err(Error::Hypothesis(
            "mild and weak solutions coincide only for kernels of bounded variation".into(),
        ));
    }
    if x0.len() != a.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: x0.len() });
    }
    check_batch(s, batch)?;
    let (n, dim) = (batch.grid.n, a.dim());
    let w = kernel.moment_weights(batch.grid.dt, n)?;
    let rule = JumpRule::new(&w);
    let solver = StepSolver::new(a, w.diagonal())?;
    let psi_t = psi.sample(batch.grid, dim, batch.modes())?;
    let plan = ConvPlan::new(s);
    let sx0: Vec<Vector> = (0..=n).map(|i| s.apply_unchecked(i, x0)).collect();
    let out: Vec<(Vec<f64>, f64)> = (0..batch.paths)
        .into_par_iter()
        .map(|p| {
            let g = forcing(&psi_t, batch, p, dim);
            let weak = weak_stepped(a, &rule, x0, &g, n, &solver);
            let conv = plan.apply(&g, n, dim);
            let mut curve = Vec::with_capacity(n + 1);
            let mut scale: f64 = 0.0;
            for i in 0..=n {
                let mild = DVector::from_column_slice(&conv[i * dim..(i + 1) * dim]) + &sx0[i];
                let wk = DVector::from_column_slice(&weak[i * dim..(i + 1) * dim]);
                scale = scale.max(mild.norm());
                curve.push((wk - mild).norm());
            }
            (curve, scale)
        })
        .collect();
    let curves: Vec<Vec<f64>> = out.iter().map(|o| o.0.clone()).collect();
    let scales: Vec<f64> = out.iter().map(|o| o.1).collect();
    let mut rep = ResidualReport::from_curves(ResidualKind::MildVsWeak, batch.grid, &curves, mean_and_se(&scales).0);
    rep.extra.insert("relative".into(), rep.relative());
    Ok(rep)
}

/// `A W^Psi` against the convolution with integrand `S(t - tau) A Psi(tau)`.
pub fn closed_operator_exchange_check(
    a: &OperatorModel,
    s: &ResolventFamily,
    psi: &PsiProcess,
    batch: &IncrementBatch,
) -> Result<ResidualReport> {
    psi.check_domain_valued(a)?;
    let w = stochastic_convolution(s, psi, batch)?;
    let aw = stochastic_convolution(s, &psi.left_mul(a), batch)?;
    let n = s.grid.n;
    let curves: Vec<Vec<f64>> = (0..batch.paths)
        .into_par_iter()
        .map(|p| {
            (0..=n)
                .map(|i| (a.apply_unchecked(&w.value(p, i)) - aw.value(p, i)).norm())
                .collect()
        })
        .collect();
    let scales: Vec<f64> = (0..batch.paths)
        .map(|p| (0..=n).map(|i| aw.value(p, i).norm()).fold(0.0, f64::max))
        .collect();
    Ok(ResidualReport::from_curves(ResidualKind::Exchange, s.grid, &curves, mean_and_se(&scales).0))
}

/// Probe nodes: five evenly spaced nodes ending at `T`.
pub fn probe_nodes(grid: Grid) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=5).map(|k| (k * grid.n).div_ceil(5)).collect();
    v.dedup();
    v
}

/// Monte Carlo `E|W^Psi(t)|^2` against `int_0^t |S(t - tau) Psi(tau)|^2 d tau`
/// at five probe times; `z = (mc - deterministic) / se`.
pub fn ito_isometry_check(
    s: &ResolventFamily,
    psi: &PsiProcess,
    noise: &NoiseSpec,
    paths: usize,
    seed: u64,
) -> Result<ResidualReport> {
    if paths < 100 {
        return Err(Error::Invalid(format!("isometry check needs at least 100 paths, got {paths}")));
    }
    let batch = sample_increments(noise, s.grid, paths, seed)?;
    let ens = stochastic_convolution(s, psi, &batch)?;
    let (grid, dim) = (s.grid, s.dim());
    let psi_t = psi.sample(grid, dim, noise.modes())?;
    let mut probes = Vec::new();
    let curves_sq: Vec<Vec<f64>> = (0..paths)
        .map(|p| ens.path(p).chunks(dim).map(|x| dot(x, x)).collect())
        .collect();
    for i in probe_nodes(grid) {
        let (mc, se) = ens.node_mean(i, |x| x.iter().map(|v| v * v).sum());
        let f: Vec<f64> =
            (0..=i).map(|j| hs_norm_sq_unchecked(&s.apply_matrix(i - j, &psi_t[j]), &noise.q)).collect();
        let deterministic = grid.dt * pairwise_sum(&f[..i]);
        let quadrature = trapezoid(&f, grid.dt);
        let z = if se > 0.0 { (mc - deterministic) / se } else if mc == deterministic { 0.0 } else { f64::INFINITY };
        probes.push(IsometryProbe { t: grid.t(i), mc_mean: mc, se, deterministic, quadrature, z });
    }
    let mut rep = ResidualReport::from_curves(ResidualKind::Isometry, grid, &curves_sq, 0.0);
    rep.verdict = Some(Verdict::from_bool(probes.iter().all(|p| p.z.abs() <= 3.0)));
    rep.extra.insert("max_abs_z".into(), probes.iter().fold(0.0, |m: f64, p| m.max(p.z.abs())));
    rep.probes = probes;
    Ok(rep)
}

/// Per path `int_0^T |X(t)|^2 dt` (trapezoid).
pub fn square_integrability_stats(ens: &PathEnsemble) -> ResidualReport {
    let d = ens.dim;
    let per_path: Vec<f64> = (0..ens.paths)
        .map(|p| {
            let x = ens.path(p);
            let sq: Vec<f64> = (0..ens.grid.len()).map(|i| dot(&x[i * d..(i + 1) * d], &x[i * d..(i + 1) * d])).collect();
            trapezoid(&sq, ens.grid.dt)
        })
        .collect();
    let (mean, se) = mean_and_se(&per_path);
    let max = per_path.iter().copied().fold(0.0, f64::max);
    let mean_curve = (0..ens.grid.len()).map(|i| ens.node_mean(i, |x| x.iter().map(|v| v * v).sum()).0).collect();
    ResidualReport {
        kind: ResidualKind::SquareIntegrability,
        dt: ens.grid.dt,
        t_end: ens.grid.t_end(),
        paths: ens.paths,
        per_path,
        mean,
        se,
        max,
        mean_curve,
        scale: 0.0,
        extra: BTreeMap::new(),
        probes: Vec::new(),
        verdict: None,
    }
}

/// Residual reports at `dt` and `dt/2` from one fine batch (coarse increments
/// are sums of fine ones) and one reference family sampled on both grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStudy {
    pub coarse: ResidualReport,
    pub fine: ResidualReport,
    /// `fine.mean / coarse.mean`
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub enum StudyKind {
    Strong,
    Weak(Vector),
    MildVsWeak(Vector),
}

pub fn refinement_study(
    kind: &StudyKind,
    a: &OperatorModel,
    kernel: &Kernel,
    psi: &PsiProcess,
    noise: &NoiseSpec,
    coarse: Grid,
    paths: usize,
    seed: u64,
) -> Result<RefinementStudy> {
    let fine = coarse.refine(2);
    let fine_batch = sample_increments(noise, fine, paths, seed)?;
    let coarse_batch = fine_batch.coarsen(2)?;
    let s_fine = build_resolvent_with(a, kernel, fine, &reference_policy())?;
    let s_coarse = s_fine.coarsen(2)?;
    let run = |s: &ResolventFamily, b: &IncrementBatch| -> Result<ResidualReport> {
        match kind {
            StudyKind::Strong => strong_residual(&stochastic_convolution(s, psi, b)?, a, kernel, b),
            StudyKind::Weak(xi) => weak_residual(&stochastic_convolution(s, psi, b)?, a, kernel, b, xi),
            StudyKind::MildVsWeak(x0) => mild_vs_weak_with(a, kernel, psi, b, x0, s),
        }
    };
    let c = run(&s_coarse, &coarse_batch)?;
    let f = run(&s_fine, &fine_batch)?;
    let ratio = if c.mean > 0.0 { f.mean / c.mean } else { 0.0 };
    Ok(RefinementStudy { coarse: c, fine: f, ratio })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eq27Row {
    pub n: f64,
    /// `sup_i mean_p |W_n(t_i) - W(t_i)|^2`
    pub eps: f64,
    pub eps_se: f64,
    pub eps_t: f64,
    /// `sup_i sum_{j<i} dt |(S_n - S)(t_i - t_j) Psi(t_j)|^2`: the exact
    /// expectation of the discrete difference.
    pub eps_expected: f64,
    /// `sup_i mean_p |J_n (conv(S_n, A Psi) - conv(S, A Psi))(t_i)|^2`
    pub n1: f64,
    pub n1_se: f64,
    /// `sup_i mean_p |(A_n - A) W(t_i)|^2`
    pub n2: f64,
    pub n2_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eq27Report {
    pub n_list: Vec<f64>,
    pub paths: usize,
    pub seed: u64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub rows: Vec<Eq27Row>,
    pub psi_norm_sq: f64,
    pub square_integrability: ResidualReport,
    pub formulas: BTreeMap<String, String>,
}

impl Eq27Report {
    pub fn eps(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.eps).collect()
    }

    pub fn n2(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.n2).collect()
    }
}

/// `sup_i` of the ensemble mean of `f(p, i)`, with the SE at the maximizer.
fn sup_mean(grid: Grid, paths: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> (f64, f64, f64) {
    (0..=grid.n)
        .map(|i| {
            let xs: Vec<f64> = (0..paths).map(|p| f(p, i)).collect();
            let (m, se) = mean_and_se(&xs);
            (m, se, grid.t(i))
        })
        .fold((0.0, 0.0, 0.0), |best, c| if c.0 > best.0 { c } else { best })
}

/// Convergence of the Yosida-approximated convolutions `W_n^Psi -> W^Psi`
/// with one increment batch shared by every `n`.
#[allow(clippy::too_many_arguments)]
pub fn yosida_convolution_experiment(
    a: &OperatorModel,
    kernel: &Kernel,
    psi: &PsiProcess,
    noise: &NoiseSpec,
    n_list: &[f64],
    paths: usize,
    grid: Grid,
    seed: u64,
) -> Result<Eq27Report> {
    psi.check_domain_valued(a)?;
    let growth = a.growth_bound();
    if let Some(n) = n_list.iter().find(|n| !(**n > 2.0 * growth)) {
        return Err(Error::Precondition(format!(
            "Yosida index needs n > 2w (w = {growth}), got n = {n}"
        )));
    }
    let dim = a.dim();
    let batch = sample_increments(noise, grid, paths, seed)?;
    let s = build_resolvent(a, kernel, grid)?;
    let w = stochastic_convolution(&s, psi, &batch)?;
    let a_psi = psi.left_mul(a);
    let aw_conv = stochastic_convolution(&s, &a_psi, &batch)?;
    let psi_t = psi.sample(grid, dim, noise.modes())?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let y = make_yosida(a, n)?;
        let sn = build_resolvent(&y.approx, kernel, grid)?;
        let wn = stochastic_convolution(&sn, psi, &batch)?;
        let awn_conv = stochastic_convolution(&sn, &a_psi, &batch)?;
        let (eps, eps_se, eps_t) =
            sup_mean(grid, paths, |p, i| (wn.value(p, i) - w.value(p, i)).norm_squared());
        let (n1, n1_se, _) = sup_mean(grid, paths, |p, i| {
            y.smoothing.apply_unchecked(&(awn_conv.value(p, i) - aw_conv.value(p, i))).norm_squared()
        });
        let (n2, n2_se, _) = sup_mean(grid, paths, |p, i| {
            let wi = w.value(p, i);
            (y.approx.apply_unchecked(&wi) - a.apply_unchecked(&wi)).norm_squared()
        });
        let eps_expected = (1..=grid.n)
            .map(|i| {
                let f: Vec<f64> = (0..i)
                    .map(|j| {
                        let diff = sn.apply_matrix(i - j, &psi_t[j]) - s.apply_matrix(i - j, &psi_t[j]);
                        hs_norm_sq_unchecked(&diff, &noise.q)
                    })
                    .collect();
                grid.dt * pairwise_sum(&f)
            })
            .fold(0.0, f64::max);
        rows.push(Eq27Row { n, eps, eps_se, eps_t, eps_expected, n1, n1_se, n2, n2_se });
    }
    let mut formulas = BTreeMap::new();
    formulas.insert("eps".into(), "sup_i mean_p |W_n(t_i) - W(t_i)|^2".into());
    formulas.insert("eps_expected".into(), "sup_i sum_{j<i} dt |(S_n - S)(t_i - t_j) Psi(t_j)|_HS^2".into());
    formulas.insert("n1".into(), "sup_i mean_p |J_n (conv(S_n, A Psi) - conv(S, A Psi))(t_i)|^2".into());
    formulas.insert("n2".into(), "sup_i mean_p |(A_n - A) W(t_i)|^2".into());
    Ok(Eq27Report {
        n_list: n_list.to_vec(),
        paths,
        seed,
        dt: grid.dt,
        t_end: grid.t_end(),
        rows,
        psi_norm_sq: crate::noise::psi_norm_sq(psi, noise, grid, dim)?,
        square_integrability: square_integrability_stats(&w),
        formulas,
    })
}
