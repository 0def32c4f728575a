//! Linear Volterra equations of the second kind `u = f + K (a * u)` on a
//! uniform grid, and complete-positivity checks built on them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::kernel::{Kernel, ProductWeights};
use crate::operator::{OperatorModel, Vector};

/// Default tolerance for negative dips in the positivity check.
pub const DEFAULT_CP_TOL: f64 = 1e-6;

/// How finely a scalar mode `s + mu (a * s) = 1` is resolved internally.
///
/// Stiff modes (large `mu`, or kernels whose transform decays slowly) vary on
/// a time scale `1/lambda*` with `a^(lambda*) = 1/mu`. Each reporting step
/// is split into `m` internal steps so that `dt/m * lambda* <= z_target`,
/// with `m` clamped to `[min_substeps, max_nodes / n]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubstepPolicy {
    pub min_substeps: usize,
    pub z_target: f64,
    pub max_nodes: usize,
}

impl Default for SubstepPolicy {
    fn default() -> Self {
        SubstepPolicy { min_substeps: 1, z_target: 0.01, max_nodes: 65536 }
    }
}

impl SubstepPolicy {
    /// No internal refinement at all.
    pub fn none() -> Self {
        SubstepPolicy { min_substeps: 1, z_target: f64::INFINITY, max_nodes: 0 }
    }

    pub fn substeps_for_rate(&self, rate: f64, grid: Grid) -> usize {
        let lo = self.min_substeps.max(1);
        let hi = (self.max_nodes / grid.n).max(lo);
        let want = (grid.dt * rate / self.z_target).ceil();
        if !want.is_finite() || want <= lo as f64 {
            lo
        } else {
            (want as usize).min(hi)
        }
    }

    pub fn substeps(&self, a: &Kernel, mu: f64, grid: Grid) -> usize {
        self.substeps_for_rate(a.characteristic_rate(mu), grid)
    }
}

/// `sum_k x[k] y[k]` with four interleaved accumulators (fixed order).
#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0; 4];
    let mut xc = x.chunks_exact(4);
    let mut yc = y.chunks_exact(4);
    for (a, b) in (&mut xc).zip(&mut yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut tail = 0.0;
    for (a, b) in xc.remainder().iter().zip(yc.remainder()) {
        tail += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Weights laid out for fast history sums: `rev[k] = omega_{n-1-k}`.
pub(crate) struct History<'a> {
    pub w: &'a ProductWeights,
    rev: Vec<f64>,
}

impl<'a> History<'a> {
    pub fn new(w: &'a ProductWeights) -> Self {
        let rev = (0..w.n).rev().map(|k| w.omega(k)).collect();
        History { w, rev }
    }

    /// `sum_{j<i} w[i][j] u_j` for `i >= 1`.
    #[inline]
    pub fn sum(&self, u: &[f64], i: usize) -> f64 {
        let n = self.w.n;
        self.w.left_node_weight(i - 1) * u[0] + dot(&self.rev[n - i..n - 1], &u[1..i])
    }

    /// `sum_{c<i} omega_{i-c} v_c`: the history of the cell-average scheme.
    #[inline]
    pub fn cell_sum(&self, v: &[f64], i: usize) -> f64 {
        let n = self.w.n;
        dot(&self.rev[n - 1 - i..n - 1], &v[..i])
    }
}

fn step_denominator(w: &ProductWeights, kappa: f64) -> Result<f64> {
    let d = 1.0 - kappa * w.diagonal();
    if d.abs() <= 1e-14 * (1.0 + (kappa * w.diagonal()).abs()) {
        return Err(Error::StepSingular { t: w.dt });
    }
    Ok(d)
}

/// Forward stepping of the scalar equation `u = f + kappa (a * u)`.
pub(crate) fn step_scalar(w: &ProductWeights, kappa: f64, f: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(f.len(), w.n + 1);
    let denom = step_denominator(w, kappa)?;
    let hist = History::new(w);
    let mut u = Vec::with_capacity(w.n + 1);
    u.push(f[0]);
    for i in 1..=w.n {
        let next = (f[i] + kappa * hist.sum(&u, i)) / denom;
        u.push(next);
    }
    Ok(u)
}

/// `s + mu (a * s) = 1` on the grid of `w`.
pub(crate) fn step_s(w: &ProductWeights, mu: f64) -> Result<Vec<f64>> {
    if mu == 0.0 {
        return Ok(vec![1.0; w.n + 1]);
    }
    step_scalar(w, -mu, &vec![1.0; w.n + 1])
}

/// `r + mu (a * r) = a`. Kernels finite at the origin are solved nodally;
/// for kernels singular at 0 the unknown is replaced by its cell averages
/// (whose double-integral weights coincide with the product weights) and
/// node values are averages of the adjacent cells.
pub(crate) fn step_r(a: &Kernel, w: &ProductWeights, mu: f64) -> Result<Vec<f64>> {
    let n = w.n;
    let h = w.dt;
    if !a.singular_at_zero() {
        let f: Vec<f64> = (0..=n).map(|i| a.eval_unchecked(i as f64 * h)).collect();
        if mu == 0.0 {
            return Ok(f);
        }
        return step_scalar(w, -mu, &f);
    }
    let denom = 1.0 + mu * w.diagonal();
    if denom.abs() <= 1e-14 {
        return Err(Error::StepSingular { t: h });
    }
    let hist = History::new(w);
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        let src = w.cell_mass(i) / h;
        let c = if i == 0 { src / denom } else { (src - mu * hist.cell_sum(&cells, i)) / denom };
        cells.push(c);
    }
    let mut nodes = Vec::with_capacity(n + 1);
    nodes.push(cells[0]);
    for i in 1..n {
        nodes.push(0.5 * (cells[i - 1] + cells[i]));
    }
    nodes.push(cells[n - 1]);
    Ok(nodes)
}

/// Forward stepping of `U = F + K (a * U)` for matrix-valued unknowns with a
/// dense coefficient `K` (`d x d`), `F_i` of shape `d x c`.
pub(crate) fn step_dense(
    w: &ProductWeights,
    k: &DMatrix<f64>,
    f: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let d = k.nrows();
    let c = f[0].ncols();
    let sys = DMatrix::identity(d, d) - k * w.diagonal();
    let lu = sys.lu();
    if lu.try_inverse().is_none() {
        return Err(Error::StepSingular { t: w.dt });
    }
    let block = d * c;
    let mut flat: Vec<f64> = Vec::with_capacity((w.n + 1) * block);
    flat.extend_from_slice(f[0].as_slice());
    let mut out = Vec::with_capacity(w.n + 1);
    out.push(f[0].clone());
    let mut acc = vec![0.0; block];
    for i in 1..=w.n {
        let b = w.left_node_weight(i - 1);
        for (a, u) in acc.iter_mut().zip(&flat[..block]) {
            *a = b * u;
        }
        for j in 1..i {
            let om = w.omega(i - j);
            let uj = &flat[j * block..(j + 1) * block];
            for (a, u) in acc.iter_mut().zip(uj) {
                *a += om * u;
            }
        }
        let hist = DMatrix::from_column_slice(d, c, &acc);
        let rhs = &f[i] + k * hist;
        let ui = lu.solve(&rhs).ok_or(Error::StepSingular { t: i as f64 * w.dt })?;
        if ui.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepSingular { t: i as f64 * w.dt });
        }
        flat.extend_from_slice(ui.as_slice());
        out.push(ui);
    }
    Ok(out)
}

/// Solves `u = f + kappa (a * u)` for scalar `u`.
pub fn solve_scalar(a: &Kernel, kappa: f64, f: &GridFunction<f64>) -> Result<GridFunction<f64>> {
    let w = a.moment_weights(f.grid.dt, f.grid.n)?;
    let u = step_scalar(&w, kappa, &f.values)?;
    GridFunction::new(f.grid, u)
}

/// Solves `u = f + K (a * u)` for vector-valued `u`.
pub fn solve_second_kind(
    a: &Kernel,
    k: &OperatorModel,
    f: &GridFunction<Vector>,
) -> Result<GridFunction<Vector>> {
    let d = k.dim();
    if let Some(bad) = f.values.iter().find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }
    let w = a.moment_weights(f.grid.dt, f.grid.n)?;
    let values = match k {
        OperatorModel::Spectral(eig) => {
            let mut cols = Vec::with_capacity(d);
            for (m, &lam) in eig.iter().enumerate() {
                let fm: Vec<f64> = f.values.iter().map(|v| v[m]).collect();
                cols.push(step_scalar(&w, lam, &fm)?);
            }
            (0..=f.grid.n).map(|i| DVector::from_fn(d, |m, _| cols[m][i])).collect()
        }
        OperatorModel::Dense(km) => {
            let fm: Vec<DMatrix<f64>> =
                f.values.iter().map(|v| DMatrix::from_column_slice(d, 1, v.as_slice())).collect();
            step_dense(&w, km, &fm)?
                .into_iter()
                .map(|m| DVector::from_column_slice(m.as_slice()))
                .collect()
        }
    };
    GridFunction::new(f.grid, values)
}

/// Largest nodal defect of the discrete equation `u_i = f_i + kappa sum_j w[i][j] u_j`.
pub fn discrete_residual(a: &Kernel, kappa: f64, f: &GridFunction<f64>, u: &GridFunction<f64>) -> Result<f64> {
    let w = a.moment_weights(f.grid.dt, f.grid.n)?;
    let mut worst: f64 = 0.0;
    for i in 0..=f.grid.n {
        let conv: f64 = (0..=i).map(|j| w.weight(i, j) * u.values[j]).sum();
        worst = worst.max((u.values[i] - f.values[i] - kappa * conv).abs());
    }
    Ok(worst)
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::Invalid(format!("mu must be finite and >= 0, got {mu}")));
    }
    Ok(())
}

/// Solution of `s + mu (a * s) = 1`.
pub fn solve_s(a: &Kernel, mu: f64, grid: Grid) -> Result<GridFunction<f64>> {
    check_mu(mu)?;
    let w = a.moment_weights(grid.dt, grid.n)?;
    GridFunction::new(grid, step_s(&w, mu)?)
}

/// Solution of `r + mu (a * r) = a`. For kernels singular at 0 the value at
/// `t_0` is the average over the first cell.
pub fn solve_r(a: &Kernel, mu: f64, grid: Grid) -> Result<GridFunction<f64>> {
    check_mu(mu)?;
    let w = a.moment_weights(grid.dt, grid.n)?;
    GridFunction::new(grid, step_r(a, &w, mu)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

/// Positivity data for one value of `mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpEntry {
    pub mu: f64,
    pub min_s: f64,
    pub min_r: f64,
    /// Where the smaller of the two minima is attained.
    pub argmin_t: f64,
    /// First node where `s` or `r` drops below `-tol`.
    pub first_violation_t: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpReport {
    pub kernel: Kernel,
    pub mu: Vec<f64>,
    pub entries: Vec<CpEntry>,
    pub verdict: Verdict,
    pub tol: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
}

/// Solves for `s` and `r` at every `mu` and checks they stay above `-tol`.
/// Only the listed `mu` values are certified. Stiff values of `mu` are
/// solved on a refined grid (see [`SubstepPolicy`]) and checked at every
/// internal node.
pub fn check_complete_positivity(
    a: &Kernel,
    mu_list: &[f64],
    grid: Grid,
    tol: Option<f64>,
) -> Result<CpReport> {
    check_complete_positivity_with(a, mu_list, grid, tol, SubstepPolicy::default())
}

pub fn check_complete_positivity_with(
    a: &Kernel,
    mu_list: &[f64],
    grid: Grid,
    tol: Option<f64>,
    policy: SubstepPolicy,
) -> Result<CpReport> {
    if mu_list.is_empty() {
        return Err(Error::Invalid("mu list is empty".into()));
    }
    for &mu in mu_list {
        check_mu(mu)?;
    }
    let tol = tol.unwrap_or(DEFAULT_CP_TOL);
    // r is only meaningful on the open grid when a(0+) is infinite.
    let r_start = usize::from(a.singular_at_zero());
    let mut cache: Vec<(usize, ProductWeights)> = Vec::new();
    let mut entries = Vec::with_capacity(mu_list.len());
    for &mu in mu_list {
        let m = policy.substeps(a, mu, grid);
        let fine = grid.refine(m);
        if !cache.iter().any(|(k, _)| *k == m) {
            cache.push((m, a.moment_weights(fine.dt, fine.n)?));
        }
        let w = &cache.iter().find(|(k, _)| *k == m).expect("cached").1;
        let s = step_s(w, mu)?;
        let r = step_r(a, w, mu)?;
        let (min_s, is) = argmin(&s, 0);
        let (min_r, ir) = argmin(&r, r_start);
        let argmin_t = fine.t(if min_s <= min_r { is } else { ir });
        let first = (0..=fine.n)
            .find(|&i| s[i] < -tol || (i >= r_start && r[i] < -tol))
            .map(|i| fine.t(i));
        entries.push(CpEntry {
            mu,
            min_s,
            min_r,
            argmin_t,
            first_violation_t: first,
            verdict: Verdict::from_bool(first.is_none()),
        });
    }
    let verdict = Verdict::from_bool(entries.iter().all(|e| e.verdict.passed()));
    Ok(CpReport {
        kernel: a.clone(),
        mu: mu_list.to_vec(),
        entries,
        verdict,
        tol,
        dt: grid.dt,
        t_end: grid.t_end(),
    })
}

fn argmin(v: &[f64], start: usize) -> (f64, usize) {
    let mut best = (f64::INFINITY, start);
    for (i, &x) in v.iter().enumerate().skip(start) {
        if x < best.0 {
            best = (x, i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{E, FRAC_PI_4};

    fn grid(t: f64, dt: f64) -> Grid {
        Grid::with_horizon(t, dt).unwrap()
    }

    #[test]
    fn exponential_decay() {
        let g = grid(1.0, 1e-3);
        let f = GridFunction::from_fn(g, |_| 1.0);
        let u = solve_scalar(&Kernel::Constant, -1.0, &f).unwrap();
        assert_abs_diff_eq!(*u.last(), (-1.0f64).exp(), epsilon = 1e-6);
        assert!(discrete_residual(&Kernel::Constant, -1.0, &f, &u).unwrap() <= 1e-12);
    }

    #[test]
    fn cosine_from_linear_kernel() {
        let g = Grid::new(FRAC_PI_4 / 1000.0, 1000).unwrap();
        let f = GridFunction::from_fn(g, |_| 1.0);
        let u = solve_scalar(&Kernel::Linear, -4.0, &f).unwrap();
        assert_abs_diff_eq!(*u.last(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn s_examples() {
        let g = grid(1.0, 1e-3);
        let s = solve_s(&Kernel::power_law(0.5, 0.0).unwrap(), 0.0, g).unwrap();
        assert!(s.values.iter().all(|&v| v == 1.0));
        let s = solve_s(&Kernel::Constant, 1.0, g).unwrap();
        assert_eq!(s.values[0], 1.0);
        assert_abs_diff_eq!(*s.last(), 1.0 / E, epsilon = 1e-6);
        // s' + 2s = 1, s(0) = 1
        let s = solve_s(&Kernel::exponential(1.0).unwrap(), 1.0, g).unwrap();
        let exact = 0.5 * (1.0 + (-2.0f64).exp());
        assert_abs_diff_eq!(*s.last(), exact, epsilon = 1e-6);
    }

    #[test]
    fn r_examples() {
        let g = grid(1.0, 1e-3);
        let r = solve_r(&Kernel::Constant, 1.0, g).unwrap();
        assert_abs_diff_eq!(*r.last(), 1.0 / E, epsilon = 1e-6);
        let k = Kernel::exponential(2.0).unwrap();
        let r = solve_r(&k, 0.0, g).unwrap();
        for (i, v) in r.values.iter().enumerate() {
            assert_eq!(*v, k.eval(g.t(i)).unwrap());
        }
        let g = Grid::new(FRAC_PI_4 / 1000.0, 1000).unwrap();
        let r = solve_r(&Kernel::Linear, 4.0, g).unwrap();
        assert_abs_diff_eq!(*r.last(), 0.5, epsilon = 1e-6);
    }

    #[test]
    fn zero_coefficient_returns_forcing() {
        let g = grid(1.0, 0.01);
        let f = GridFunction::from_fn(g, |t| (3.0 * t).sin() + t * t);
        let u = solve_scalar(&Kernel::power_law(0.3, 1.0).unwrap(), 0.0, &f).unwrap();
        assert_eq!(u.values, f.values);
    }

    #[test]
    fn vector_equation_matches_modes() {
        let g = grid(1.0, 0.01);
        let k = OperatorModel::spectral(vec![-1.0, -3.0]).unwrap();
        let f = GridFunction::from_fn(g, |_| DVector::from_vec(vec![1.0, 2.0]));
        let u = solve_second_kind(&Kernel::Constant, &k, &f).unwrap();
        let dense = OperatorModel::dense(k.to_matrix()).unwrap();
        let v = solve_second_kind(&Kernel::Constant, &dense, &f).unwrap();
        for (a, b) in u.values.iter().zip(&v.values) {
            assert!((a - b).amax() < 1e-13);
        }
        assert_abs_diff_eq!(u.last()[1], 2.0 * (-3.0f64).exp(), epsilon = 1e-4);
        let bad = GridFunction::from_fn(g, |_| DVector::from_vec(vec![1.0]));
        assert!(matches!(solve_second_kind(&Kernel::Constant, &k, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn singular_step_is_reported() {
        // 1 - kappa * dt/2 = 0
        let g = grid(1.0, 0.1);
        let f = GridFunction::from_fn(g, |_| 1.0);
        assert!(matches!(solve_scalar(&Kernel::Constant, 20.0, &f), Err(Error::StepSingular { .. })));
    }

    #[test]
    fn cp_examples() {
        let g = grid(2.0, 1e-3);
        let rep = check_complete_positivity(&Kernel::Constant, &[0.0, 1.0, 10.0], g, None).unwrap();
        assert!(rep.verdict.passed());
        let rep = check_complete_positivity(&Kernel::Linear, &[4.0], g, None).unwrap();
        assert!(!rep.verdict.passed());
        let t = rep.entries[0].first_violation_t.unwrap();
        assert!((t - FRAC_PI_4).abs() < 0.02, "{t}");
        let json = serde_json::to_value(&rep).unwrap();
        for key in ["kernel", "mu", "verdict", "tol", "dt", "T"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
