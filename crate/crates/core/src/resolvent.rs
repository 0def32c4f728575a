//! Resolvent families `S(t) = I + a * (A S)(t)`, their Yosida approximants,
//! Trotter-Kato convergence tables and a Laplace-domain oracle.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::kernel::Kernel;
use crate::operator::{least_squares_slope, matrix_norm2, OperatorModel, Vector};
use crate::volterra::{step_dense, step_s, SubstepPolicy};

/// Stored values of `S(t_i)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    /// `modes[k][i]`: the scalar resolvent of mode `k` at node `i`.
    Modes(Vec<Vec<f64>>),
    /// One matrix per node.
    Dense(Vec<DMatrix<f64>>),
}

/// `(M, omega)` with `|S(t)| <= M e^{omega t}` on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeEstimate {
    #[serde(rename = "M")]
    pub m: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolventFamily {
    pub operator: OperatorModel,
    pub kernel: Kernel,
    pub grid: Grid,
    pub samples: Samples,
    pub scheme: String,
    /// Internal steps per grid step, per mode (or one entry for dense models).
    pub substeps: Vec<usize>,
    pub type_estimate: Option<TypeEstimate>,
}

impl ResolventFamily {
    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    /// `S(t_i)` as a matrix.
    pub fn matrix(&self, i: usize) -> DMatrix<f64> {
        match &self.samples {
            Samples::Modes(m) => DMatrix::from_diagonal(&DVector::from_fn(m.len(), |k, _| m[k][i])),
            Samples::Dense(s) => s[i].clone(),
        }
    }

    /// Mode `k` over the grid (spectral families only).
    pub fn mode(&self, k: usize) -> Option<&[f64]> {
        match &self.samples {
            Samples::Modes(m) => m.get(k).map(|v| v.as_slice()),
            Samples::Dense(_) => None,
        }
    }

    /// `S(t_i) x`.
    pub fn apply(&self, i: usize, x: &Vector) -> Result<Vector> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(self.apply_unchecked(i, x))
    }

    pub(crate) fn apply_unchecked(&self, i: usize, x: &Vector) -> Vector {
        match &self.samples {
            Samples::Modes(m) => DVector::from_fn(m.len(), |k, _| m[k][i] * x[k]),
            Samples::Dense(s) => &s[i] * x,
        }
    }

    /// `S(t_i) C` for a matrix with `dim` rows.
    pub fn apply_matrix(&self, i: usize, c: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.samples {
            Samples::Modes(m) => {
                let mut out = c.clone();
                for (k, mut row) in out.row_iter_mut().enumerate() {
                    row *= m[k][i];
                }
                out
            }
            Samples::Dense(s) => &s[i] * c,
        }
    }

    /// Operator 2-norm of `S(t_i)`.
    pub fn norm_at(&self, i: usize) -> f64 {
        match &self.samples {
            Samples::Modes(m) => m.iter().fold(0.0, |acc: f64, v| acc.max(v[i].abs())),
            Samples::Dense(s) => matrix_norm2(&s[i]),
        }
    }

    /// The same family on every `factor`-th node.
    pub fn coarsen(&self, factor: usize) -> Result<ResolventFamily> {
        let grid = self.grid.coarsen(factor)?;
        let samples = match &self.samples {
            Samples::Modes(m) => {
                Samples::Modes(m.iter().map(|v| v.iter().step_by(factor).copied().collect()).collect())
            }
            Samples::Dense(s) => Samples::Dense(s.iter().step_by(factor).cloned().collect()),
        };
        Ok(ResolventFamily {
            grid,
            samples,
            substeps: self.substeps.iter().map(|m| m * factor).collect(),
            type_estimate: None,
            ..self.clone()
        })
    }
}

fn scheme_tag(substeps: &[usize]) -> String {
    let lo = substeps.iter().min().copied().unwrap_or(1);
    let hi = substeps.iter().max().copied().unwrap_or(1);
    if lo == hi {
        format!("product-integration/pl, {lo} internal steps per grid step")
    } else {
        format!("product-integration/pl, {lo}..{hi} internal steps per grid step")
    }
}

/// Builds `S` with the default internal refinement.
pub fn build_resolvent(a: &OperatorModel, kernel: &Kernel, grid: Grid) -> Result<ResolventFamily> {
    build_resolvent_with(a, kernel, grid, &SubstepPolicy::default())
}

/// Builds `S` from `S = I + a * (A S)`. Spectral models are solved mode by
/// mode (`s` with `mu = -lambda_k`); dense models as one matrix equation.
/// The solve runs on an internally refined grid and is sampled at the
/// requested nodes.
pub fn build_resolvent_with(
    a: &OperatorModel,
    kernel: &Kernel,
    grid: Grid,
    policy: &SubstepPolicy,
) -> Result<ResolventFamily> {
    kernel.validate()?;
    let (samples, substeps) = match a {
        OperatorModel::Spectral(eig) => {
            if let Some(l) = eig.iter().find(|l| **l > 0.0) {
                return Err(Error::Precondition(format!(
                    "spectral models must be dissipative (all eigenvalues <= 0), found {l}"
                )));
            }
            let subs: Vec<usize> = eig.iter().map(|l| policy.substeps(kernel, -l, grid)).collect();
            let mut distinct = subs.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let weights = distinct
                .par_iter()
                .map(|&m| {
                    let fine = grid.refine(m);
                    kernel.moment_weights(fine.dt, fine.n).map(|w| (m, w))
                })
                .collect::<Result<Vec<_>>>()?;
            let modes = eig
                .par_iter()
                .zip(&subs)
                .map(|(l, m)| {
                    let w = &weights.iter().find(|(k, _)| k == m).expect("weights for m").1;
                    let s = step_s(w, -l)?;
                    let mut coarse: Vec<f64> = s.into_iter().step_by(*m).collect();
                    coarse[0] = 1.0;
                    Ok(coarse)
                })
                .collect::<Result<Vec<_>>>()?;
            (Samples::Modes(modes), subs)
        }
        OperatorModel::Dense(m) => {
            let d = m.nrows();
            let rate = kernel.characteristic_rate(a.spectral_radius());
            let sub = policy.substeps_for_rate(rate, grid);
            let fine = grid.refine(sub);
            let w = kernel.moment_weights(fine.dt, fine.n)?;
            let eye = DMatrix::identity(d, d);
            let f = vec![eye.clone(); fine.n + 1];
            let s = step_dense(&w, m, &f)?;
            let mut coarse: Vec<DMatrix<f64>> = s.into_iter().step_by(sub).collect();
            coarse[0] = eye;
            (Samples::Dense(coarse), vec![sub])
        }
    };
    Ok(ResolventFamily {
        operator: a.clone(),
        kernel: kernel.clone(),
        grid,
        scheme: scheme_tag(&substeps),
        samples,
        substeps,
        type_estimate: None,
    })
}

/// `int_0^{t_i} a(t_i - tau) g(tau) d tau` from nodal values of `g`, by a
/// quadrature unrelated to product integration: composite trapezoid for
/// kernels finite at 0, and for `t^{beta-1}` singularities the substitution
/// `u = v^{1/beta}` followed by a trapezoid rule on a resampled (linearly
/// interpolated) integrand.
pub(crate) fn independent_convolution(kernel: &Kernel, g: &[Vector], h: f64, i: usize) -> Vector {
    let d = g[0].len();
    if i == 0 {
        return DVector::zeros(d);
    }
    match kernel {
        Kernel::Mixture { terms } => {
            let mut acc = DVector::zeros(d);
            for (w, k) in terms {
                acc += independent_convolution(k, g, h, i) * *w;
            }
            acc
        }
        Kernel::PowerLaw { beta, eta } if *beta < 1.0 => {
            let t = i as f64 * h;
            let vmax = t.powf(*beta);
            let pieces = (4 * i).max(64);
            let dv = vmax / pieces as f64;
            let inv_beta = 1.0 / beta;
            let mut acc = DVector::zeros(d);
            for q in 0..=pieces {
                let v = q as f64 * dv;
                let u = if q == pieces { t } else { v.powf(inv_beta) };
                let weight = if q == 0 || q == pieces { 0.5 } else { 1.0 };
                let x = ((t - u) / h).max(0.0);
                let j = (x.floor() as usize).min(i - 1);
                let frac = x - j as f64;
                let gj = &g[j] * (1.0 - frac) + &g[j + 1] * frac;
                acc += gj * (weight * (-eta * u).exp());
            }
            acc * (dv / (beta * statrs::function::gamma::gamma(*beta)))
        }
        _ => {
            let mut acc = &g[0] * (0.5 * kernel.eval_unchecked(i as f64 * h));
            for j in 1..i {
                acc += &g[j] * kernel.eval_unchecked((i - j) as f64 * h);
            }
            acc += &g[i] * (0.5 * kernel.eval_unchecked(0.0));
            acc * h
        }
    }
}

/// `t -> |S(t)x - x - (a * A S x)(t)|`, with the convolution recomputed by
/// [`independent_convolution`].
pub fn resolvent_equation_residual(s: &ResolventFamily, x: &Vector) -> Result<GridFunction<f64>> {
    if x.len() != s.dim() {
        return Err(Error::DimensionMismatch { expected: s.dim(), got: x.len() });
    }
    let n = s.grid.n;
    let sx: Vec<Vector> = (0..=n).map(|i| s.apply_unchecked(i, x)).collect();
    let asx: Vec<Vector> = sx.iter().map(|v| s.operator.apply_unchecked(v)).collect();
    let values = (0..=n)
        .into_par_iter()
        .map(|i| {
            let conv = independent_convolution(&s.kernel, &asx, s.grid.dt, i);
            (&sx[i] - x - conv).norm()
        })
        .collect();
    GridFunction::new(s.grid, values)
}

/// Fits an exponential type to the family: `omega` is the (non-negative)
/// growth rate of the running maximum of `|S(t)|` over the tail half of the
/// grid and `M = max |S(t)| e^{-omega t}`, at least 1.
pub fn estimate_type(s: &mut ResolventFamily) -> Result<TypeEstimate> {
    let n = s.grid.n;
    if n + 1 < 10 {
        return Err(Error::Invalid(format!("type estimate needs at least 10 nodes, got {}", n + 1)));
    }
    let norms: Vec<f64> = (0..=n).map(|i| s.norm_at(i)).collect();
    let mut env = norms.clone();
    for i in 1..=n {
        env[i] = env[i].max(env[i - 1]);
    }
    let pts: Vec<(f64, f64)> =
        (n / 2..=n).filter(|&i| env[i] > 0.0).map(|i| (s.grid.t(i), env[i].ln())).collect();
    let slope = if pts.len() >= 2 { least_squares_slope(&pts) } else { 0.0 };
    let omega = slope.max(0.0);
    let m = norms
        .iter()
        .enumerate()
        .map(|(i, v)| v * (-omega * s.grid.t(i)).exp())
        .fold(1.0, f64::max);
    let est = TypeEstimate { m, omega };
    s.type_estimate = Some(est);
    Ok(est)
}

/// `max_i |A S(t_i) x - S(t_i) A x|`; exactly 0 for spectral models.
pub fn commutation_defect(s: &ResolventFamily, x: &Vector) -> Result<f64> {
    if x.len() != s.dim() {
        return Err(Error::DimensionMismatch { expected: s.dim(), got: x.len() });
    }
    if s.operator.is_spectral() {
        return Ok(0.0);
    }
    let ax = s.operator.apply_unchecked(x);
    Ok((0..=s.grid.n)
        .map(|i| (s.operator.apply_unchecked(&s.apply_unchecked(i, x)) - s.apply_unchecked(i, &ax)).norm())
        .fold(0.0, f64::max))
}

/// `A_n = n^2 R(n, A) - n I` together with `J_n = n R(n, A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct YosidaOperator {
    pub base: OperatorModel,
    pub n: f64,
    pub approx: OperatorModel,
    pub smoothing: OperatorModel,
}

/// Builds the Yosida approximant of index `n`. Requires `n > 2w` with
/// `w = max(0, max Re eig A)`. Spectral models stay spectral
/// (`lambda -> n lambda / (n - lambda)`).
pub fn make_yosida(a: &OperatorModel, n: f64) -> Result<YosidaOperator> {
    let w = a.growth_bound();
    if !(n > 2.0 * w) || !n.is_finite() {
        return Err(Error::Precondition(format!(
            "Yosida index needs n > 2w (w = {w}), got n = {n}; n <= 2w violates the bound |e^(t A_n)| <= M e^(2wt)"
        )));
    }
    let r = a.resolvent_operator(n)?;
    let (approx, smoothing) = match (a, &r) {
        (OperatorModel::Spectral(eig), OperatorModel::Spectral(_)) => {
            let an: Vec<f64> = eig.iter().map(|l| n * l / (n - l)).collect();
            let jn: Vec<f64> = eig.iter().map(|l| n / (n - l)).collect();
            for (k, l) in eig.iter().enumerate() {
                let other = n * n / (n - l) - n;
                if (other - an[k]).abs() > 1e-10 * (1.0 + an[k].abs()) {
                    return Err(Error::Precondition(format!("Yosida formulas disagree in mode {k}")));
                }
            }
            (OperatorModel::spectral(an)?, OperatorModel::spectral(jn)?)
        }
        (OperatorModel::Dense(am), OperatorModel::Dense(rm)) => {
            let d = am.nrows();
            let first = rm * (n * n) - DMatrix::identity(d, d) * n;
            let second = am * rm * n;
            let scale = 1.0 + first.amax();
            if (&first - &second).amax() > 1e-10 * scale {
                return Err(Error::Precondition(format!(
                    "Yosida formulas disagree by {:e}",
                    (&first - &second).amax()
                )));
            }
            (OperatorModel::Dense(first), OperatorModel::Dense(rm * n))
        }
        _ => unreachable!("resolvent keeps the model kind"),
    };
    Ok(YosidaOperator { base: a.clone(), n, approx, smoothing })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YosidaDefect {
    pub n: f64,
    /// `|A_n x - A x|`
    pub generator: f64,
    /// `|J_n x - x|`
    pub smoothing: f64,
}

pub fn yosida_limit_defect(a: &OperatorModel, n_list: &[f64], x: &Vector) -> Result<Vec<YosidaDefect>> {
    let ax = a.apply(x)?;
    n_list
        .iter()
        .map(|&n| {
            let y = make_yosida(a, n)?;
            Ok(YosidaDefect {
                n,
                generator: (y.approx.apply_unchecked(x) - &ax).norm(),
                smoothing: (y.smoothing.apply_unchecked(x) - x).norm(),
            })
        })
        .collect()
}

/// Resolvent family of the pair `(A_n, a)`.
pub fn build_approx_resolvent(y: &YosidaOperator, kernel: &Kernel, grid: Grid) -> Result<ResolventFamily> {
    build_resolvent(&y.approx, kernel, grid)
}

pub fn build_approx_resolvent_with(
    y: &YosidaOperator,
    kernel: &Kernel,
    grid: Grid,
    policy: &SubstepPolicy,
) -> Result<ResolventFamily> {
    build_resolvent_with(&y.approx, kernel, grid, policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: f64,
    pub probe: usize,
    pub sup_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub n_list: Vec<f64>,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    pub fn entry(&self, n: f64, probe: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n && r.probe == probe).map(|r| r.sup_error)
    }

    /// Errors for one probe in `n_list` order.
    pub fn column(&self, probe: usize) -> Vec<f64> {
        self.n_list.iter().filter_map(|&n| self.entry(n, probe)).collect()
    }
}

/// `sup_i |S_n(t_i) x - S(t_i) x|` for every `n` and probe `x`.
pub fn trotter_kato_table(
    a: &OperatorModel,
    kernel: &Kernel,
    probes: &[Vector],
    n_list: &[f64],
    grid: Grid,
) -> Result<ConvergenceTable> {
    trotter_kato_table_with(a, kernel, probes, n_list, grid, &SubstepPolicy::default())
}

pub fn trotter_kato_table_with(
    a: &OperatorModel,
    kernel: &Kernel,
    probes: &[Vector],
    n_list: &[f64],
    grid: Grid,
    policy: &SubstepPolicy,
) -> Result<ConvergenceTable> {
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("n_list must be strictly increasing".into()));
    }
    for x in probes {
        if x.len() != a.dim() {
            return Err(Error::DimensionMismatch { expected: a.dim(), got: x.len() });
        }
    }
    let s = build_resolvent_with(a, kernel, grid, policy)?;
    let mut rows = Vec::new();
    for &n in n_list {
        let y = make_yosida(a, n)?;
        let sn = build_resolvent_with(&y.approx, kernel, grid, policy)?;
        for (p, x) in probes.iter().enumerate() {
            let sup = (0..=grid.n)
                .map(|i| (sn.apply_unchecked(i, x) - s.apply_unchecked(i, x)).norm())
                .fold(0.0, f64::max);
            rows.push(ConvergenceRow { n, probe: p, sup_error: sup });
        }
    }
    Ok(ConvergenceTable { n_list: n_list.to_vec(), dt: grid.dt, t_end: grid.t_end(), rows })
}

/// `H(lambda) = (lambda - lambda a^(lambda) A)^{-1}`, cross-checked against
/// `(lambda a^(lambda))^{-1} R(1/a^(lambda), A)`.
pub fn laplace_oracle(a: &OperatorModel, kernel: &Kernel, lambda: Complex64) -> Result<DMatrix<Complex64>> {
    let ahat = kernel.laplace(lambda)?;
    let la = lambda * ahat;
    if la.norm() == 0.0 || !la.is_finite() {
        return Err(Error::Domain(format!("lambda a^(lambda) vanishes at lambda = {lambda}")));
    }
    let d = a.dim();
    let am = a.to_matrix().map(|v| Complex64::new(v, 0.0));
    let eye = DMatrix::<Complex64>::identity(d, d);
    let first = (&eye * lambda - &am * la)
        .try_inverse()
        .ok_or_else(|| Error::Domain(format!("lambda - lambda a^(lambda) A is singular at {lambda}")))?;
    let second = (&eye * ahat.inv() - &am)
        .try_inverse()
        .ok_or_else(|| Error::Domain(format!("1/a^(lambda) lies in the spectrum at {lambda}")))?
        * la.inv();
    let scale = 1.0 + first.iter().fold(0.0, |m: f64, z| m.max(z.norm()));
    let gap = (&first - &second).iter().fold(0.0, |m: f64, z| m.max(z.norm()));
    if gap > 1e-9 * scale {
        return Err(Error::Domain(format!("transform formulas disagree by {gap:e} at {lambda}")));
    }
    Ok(first)
}

/// Number of nodes on the fixed Talbot contour.
pub const TALBOT_NODES: usize = 32;

/// Fixed-Talbot inversion of a transform `F` at `t > 0` with contour scale
/// `r`: `s(theta) = r theta (cot theta + i)`.
fn talbot(t: f64, r: f64, f: &dyn Fn(Complex64) -> Option<Complex64>) -> Option<f64> {
    let m = TALBOT_NODES;
    let mut acc = 0.5 * (f(Complex64::new(r, 0.0))? * (r * t).exp()).re;
    for k in 1..m {
        let theta = k as f64 * std::f64::consts::PI / m as f64;
        let cot = theta.cos() / theta.sin();
        let s = Complex64::new(r * theta * cot, r * theta);
        let sigma = theta + (theta * cot - 1.0) * cot;
        let term = (s * t).exp() * f(s)? * Complex64::new(1.0, sigma);
        acc += term.re;
    }
    let v = acc * r / m as f64;
    v.is_finite().then_some(v)
}

fn talbot_retry(t: f64, f: &dyn Fn(Complex64) -> Option<Complex64>) -> Result<f64> {
    let base = 2.0 * TALBOT_NODES as f64 / (5.0 * t);
    for shift in [1.0, 1.07, 1.19, 1.31] {
        if let Some(v) = talbot(t, base * shift, f) {
            return Ok(v);
        }
    }
    Err(Error::Contour(format!("transform is singular on every contour tried at t = {t}")))
}

/// `S(t)` at the requested times by numerical inversion of `H`, entrywise
/// for dense models and modewise for spectral ones.
pub fn invert_laplace_oracle(a: &OperatorModel, kernel: &Kernel, t_list: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    kernel.validate()?;
    if let Some(t) = t_list.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Invalid(format!("inversion times must be positive, got {t}")));
    }
    let d = a.dim();
    t_list
        .iter()
        .map(|&t| match a {
            OperatorModel::Spectral(eig) => {
                let mut out = DMatrix::zeros(d, d);
                for (k, &l) in eig.iter().enumerate() {
                    let h = |s: Complex64| {
                        let v = (s - s * kernel.laplace_continued(s) * l).inv();
                        v.is_finite().then_some(v)
                    };
                    out[(k, k)] = talbot_retry(t, &h)?;
                }
                Ok(out)
            }
            OperatorModel::Dense(m) => {
                let am = m.map(|v| Complex64::new(v, 0.0));
                let eye = DMatrix::<Complex64>::identity(d, d);
                let mut out = DMatrix::zeros(d, d);
                for r in 0..d {
                    for c in 0..d {
                        let h = |s: Complex64| {
                            let la = s * kernel.laplace_continued(s);
                            let inv = (&eye * s - &am * la).try_inverse()?;
                            let v = inv[(r, c)];
                            v.is_finite().then_some(v)
                        };
                        out[(r, c)] = talbot_retry(t, &h)?;
                    }
                }
                Ok(out)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemigroupBoundReport {
    pub n: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub w: f64,
    pub holds: bool,
    /// Largest `|e^{t A_n}| / (M e^{2wt})` over the grid and where it occurs.
    pub worst_ratio: f64,
    pub worst_t: f64,
}

/// Checks `|e^{t A_n}| <= M e^{2wt}` on the grid.
pub fn semigroup_bound_check(y: &YosidaOperator, m: f64, w: f64, grid: Grid) -> Result<SemigroupBoundReport> {
    if !(y.n > 2.0 * y.base.growth_bound()) {
        return Err(Error::Precondition(format!("Yosida index needs n > 2w, got n = {}", y.n)));
    }
    let mut worst = (f64::NEG_INFINITY, 0.0);
    for i in 0..=grid.n {
        let t = grid.t(i);
        let norm = match &y.approx {
            OperatorModel::Spectral(e) => e.iter().map(|l| (l * t).exp()).fold(0.0, f64::max),
            OperatorModel::Dense(am) => matrix_norm2(&(am * t).exp()),
        };
        let ratio = norm / (m * (2.0 * w * t).exp());
        if ratio > worst.0 {
            worst = (ratio, t);
        }
    }
    Ok(SemigroupBoundReport {
        n: y.n,
        m,
        w,
        holds: worst.0 <= 1.0 + 1e-9,
        worst_ratio: worst.0,
        worst_t: worst.1,
    })
}
