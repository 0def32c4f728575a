//! Kernel models `a in L^1_loc(R_+)` and their product-integration weights.

use std::sync::LazyLock;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_lr, ln_gamma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    /// `a(t) = 1`
    Constant,
    /// `a(t) = t`
    Linear,
    /// `a(t) = exp(-gamma t)`
    Exponential { gamma: f64 },
    /// `a(t) = exp(-eta t) t^(beta - 1) / Gamma(beta)`
    PowerLaw {
        beta: f64,
        #[serde(default)]
        eta: f64,
    },
    /// `a(t) = sum_i w_i a_i(t)`
    Mixture { terms: Vec<(f64, Kernel)> },
}

impl Kernel {
    pub fn power_law(beta: f64, eta: f64) -> Result<Kernel> {
        let k = Kernel::PowerLaw { beta, eta };
        k.validate()?;
        Ok(k)
    }

    pub fn exponential(gamma: f64) -> Result<Kernel> {
        let k = Kernel::Exponential { gamma };
        k.validate()?;
        Ok(k)
    }

    pub fn mixture(terms: Vec<(f64, Kernel)>) -> Result<Kernel> {
        let k = Kernel::Mixture { terms };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Constant | Kernel::Linear => Ok(()),
            Kernel::Exponential { gamma } => {
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(Error::Invalid(format!("exponential kernel needs gamma > 0, got {gamma}")));
                }
                Ok(())
            }
            Kernel::PowerLaw { beta, eta } => {
                if !(*beta > 0.0 && *beta < 2.0) {
                    return Err(Error::Invalid(format!("power-law kernel needs 0 < beta < 2, got {beta}")));
                }
                if !(eta.is_finite() && *eta >= 0.0) {
                    return Err(Error::Invalid(format!("power-law kernel needs eta >= 0, got {eta}")));
                }
                Ok(())
            }
            Kernel::Mixture { terms } => {
                if terms.is_empty() {
                    return Err(Error::Invalid("mixture needs at least one term".into()));
                }
                if self.depth() > 2 {
                    return Err(Error::Invalid("mixture nesting depth exceeds 2".into()));
                }
                for (w, k) in terms {
                    if !(w.is_finite() && *w > 0.0) {
                        return Err(Error::Invalid(format!("mixture weights must be positive, got {w}")));
                    }
                    k.validate()?;
                }
                Ok(())
            }
        }
    }

    fn depth(&self) -> usize {
        match self {
            Kernel::Mixture { terms } => 1 + terms.iter().map(|(_, k)| k.depth()).max().unwrap_or(0),
            _ => 0,
        }
    }

    /// True if `a(t)` blows up as `t -> 0+`.
    pub fn singular_at_zero(&self) -> bool {
        match self {
            Kernel::PowerLaw { beta, .. } => *beta < 1.0,
            Kernel::Mixture { terms } => terms.iter().any(|(_, k)| k.singular_at_zero()),
            _ => false,
        }
    }

    /// Bounded variation on compact intervals.
    pub fn is_bv(&self) -> bool {
        !self.singular_at_zero()
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        if t < 0.0 || !t.is_finite() {
            return Err(Error::Domain(format!("kernel evaluated at t = {t}")));
        }
        if t == 0.0 && self.singular_at_zero() {
            return Err(Error::Domain("singular kernel evaluated at t = 0".into()));
        }
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> f64 {
        match self {
            Kernel::Constant => 1.0,
            Kernel::Linear => t,
            Kernel::Exponential { gamma } => (-gamma * t).exp(),
            Kernel::PowerLaw { beta, eta } => {
                if *beta == 1.0 {
                    (-eta * t).exp()
                } else if t == 0.0 {
                    // beta > 1
                    0.0
                } else {
                    (-eta * t + (beta - 1.0) * t.ln() - ln_gamma(*beta)).exp()
                }
            }
            Kernel::Mixture { terms } => terms.iter().map(|(w, k)| w * k.eval_unchecked(t)).sum(),
        }
    }

    /// Left edge of the half-plane where the Laplace integral converges.
    pub fn abscissa(&self) -> f64 {
        match self {
            Kernel::Constant | Kernel::Linear => 0.0,
            Kernel::Exponential { gamma } => -gamma,
            Kernel::PowerLaw { eta, .. } => -eta,
            Kernel::Mixture { terms } => {
                terms.iter().map(|(_, k)| k.abscissa()).fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    /// Laplace transform `a^(lambda)` for `Re lambda` beyond the abscissa.
    pub fn laplace(&self, lambda: Complex64) -> Result<Complex64> {
        if !(lambda.re > self.abscissa()) {
            return Err(Error::Domain(format!(
                "Laplace transform requested at Re lambda = {} <= abscissa {}",
                lambda.re,
                self.abscissa()
            )));
        }
        Ok(self.laplace_continued(lambda))
    }

    /// Analytic continuation of the transform (principal branch), used on
    /// inversion contours that leave the half-plane of convergence.
    pub(crate) fn laplace_continued(&self, lambda: Complex64) -> Complex64 {
        match self {
            Kernel::Constant => lambda.inv(),
            Kernel::Linear => (lambda * lambda).inv(),
            Kernel::Exponential { gamma } => (lambda + gamma).inv(),
            Kernel::PowerLaw { beta, eta } => (lambda + eta).powf(-beta),
            Kernel::Mixture { terms } => {
                terms.iter().map(|(w, k)| k.laplace_continued(lambda) * w).sum()
            }
        }
    }

    pub fn laplace_real(&self, lambda: f64) -> Result<f64> {
        Ok(self.laplace(Complex64::new(lambda, 0.0))?.re)
    }

    /// Pointwise derivative for kernels of bounded variation.
    pub fn derivative_eval(&self, t: f64) -> Result<f64> {
        if !self.is_bv() {
            return Err(Error::KernelNotBv(format!("{self:?} is singular at 0")));
        }
        if !(t > 0.0) {
            return Err(Error::Domain(format!("derivative requested at t = {t}")));
        }
        Ok(match self {
            Kernel::Constant => 0.0,
            Kernel::Linear => 1.0,
            Kernel::Exponential { gamma } => -gamma * (-gamma * t).exp(),
            Kernel::PowerLaw { beta, eta } => {
                let a = self.eval_unchecked(t);
                a * ((beta - 1.0) / t - eta)
            }
            Kernel::Mixture { terms } => {
                let mut acc = 0.0;
                for (w, k) in terms {
                    acc += w * k.derivative_eval(t)?;
                }
                acc
            }
        })
    }

    /// Moments of the kernel over `[c h, (c+1) h]`:
    /// `(int a(u) du, int a(u) (u - c h)/h du)`.
    pub fn cell_moments(&self, c: usize, h: f64) -> (f64, f64) {
        let u0 = c as f64 * h;
        match self {
            Kernel::Constant => (h, 0.5 * h),
            Kernel::Linear => (h * h * (c as f64 + 0.5), h * h * (0.5 * c as f64 + 1.0 / 3.0)),
            Kernel::Exponential { gamma } => {
                let x = gamma * h;
                let head = (-gamma * u0).exp();
                (head * h * one_minus_exp_over(x), head * h * ramp_exp(x))
            }
            Kernel::PowerLaw { beta, eta } => {
                if c == 0 {
                    let g = gamma(*beta);
                    let m0 = lower_moment(*beta, *eta, h);
                    let m1 = lower_moment(beta + 1.0, *eta, h);
                    (m0 / g, m1 / (h * g))
                } else {
                    gauss_legendre(u0, u0 + h, |u| {
                        let a = self.eval_unchecked(u);
                        (a, a * (u - u0) / h)
                    })
                }
            }
            Kernel::Mixture { terms } => terms.iter().fold((0.0, 0.0), |acc, (w, k)| {
                let (m, f) = k.cell_moments(c, h);
                (acc.0 + w * m, acc.1 + w * f)
            }),
        }
    }

    /// Product-integration weights on the uniform grid `t_i = i dt`,
    /// `i = 0..=n`, for piecewise-linear interpolation of the integrand.
    pub fn moment_weights(&self, dt: f64, n: usize) -> Result<ProductWeights> {
        if !(dt > 0.0) || n == 0 {
            return Err(Error::Invalid(format!("moment weights need dt > 0, n >= 1 (dt={dt}, n={n})")));
        }
        let (mass, first): (Vec<f64>, Vec<f64>) = (0..n).map(|c| self.cell_moments(c, dt)).unzip();
        Ok(ProductWeights::from_moments(dt, mass, first))
    }

    /// Rate `lambda*` with `a^(lambda*) = 1/mu`: the time scale on which the
    /// scalar resolvent `s + mu a*s = 1` varies. Zero when no such rate
    /// exists to the right of the origin.
    pub fn characteristic_rate(&self, mu: f64) -> f64 {
        if !(mu > 0.0) {
            return 0.0;
        }
        let target = 1.0 / mu;
        let ahat = |l: f64| self.laplace_continued(Complex64::new(l, 0.0)).re;
        let lo0 = self.abscissa().max(0.0);
        let mut lo = if lo0 == 0.0 { 1e-12 } else { lo0 * (1.0 + 1e-12) + 1e-12 };
        if ahat(lo) <= target {
            return 0.0;
        }
        let mut hi = (2.0 * lo).max(1.0);
        while ahat(hi) > target {
            hi *= 2.0;
            if hi > 1e300 {
                return hi;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ahat(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// `(1 - e^{-x}) / x`
fn one_minus_exp_over(x: f64) -> f64 {
    if x < 1e-8 {
        1.0 - 0.5 * x
    } else {
        -(-x).exp_m1() / x
    }
}

/// `int_0^1 e^{-x v} v dv = (1 - e^{-x}(1 + x)) / x^2`
fn ramp_exp(x: f64) -> f64 {
    if x < 0.5 {
        // sum_k (-x)^k / (k! (k + 2))
        let mut term = 1.0;
        let mut acc = 0.5;
        for k in 1..40 {
            term *= -x / k as f64;
            let add = term / (k as f64 + 2.0);
            acc += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        acc
    } else {
        (1.0 - (-x).exp() * (1.0 + x)) / (x * x)
    }
}

/// `int_0^h u^{s-1} e^{-eta u} du` for `s > 0`.
fn lower_moment(s: f64, eta: f64, h: f64) -> f64 {
    let x = eta * h;
    if x == 0.0 {
        return h.powf(s) / s;
    }
    if x <= 1.0 {
        let hs = h.powf(s);
        let mut term = 1.0;
        let mut acc = 1.0 / s;
        for k in 1..60 {
            term *= -x / k as f64;
            let add = term / (k as f64 + s);
            acc += add;
            if add.abs() < 1e-18 * acc.abs() {
                break;
            }
        }
        hs * acc
    } else {
        eta.powf(-s) * gamma(s) * gamma_lr(s, x)
    }
}

const GL_POINTS: usize = 20;

static GL_RULE: LazyLock<(Vec<f64>, Vec<f64>)> = LazyLock::new(|| legendre_rule(GL_POINTS));

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub(crate) fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gauss_legendre(lo: f64, hi: f64, f: impl Fn(f64) -> (f64, f64)) -> (f64, f64) {
    let (nodes, weights) = &*GL_RULE;
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut acc = (0.0, 0.0);
    for (x, w) in nodes.iter().zip(weights) {
        let (a, b) = f(mid + half * x);
        acc.0 += w * a;
        acc.1 += w * b;
    }
    (acc.0 * half, acc.1 * half)
}

/// Product-integration weights for `int_0^{t_i} a(t_i - s) u(s) ds` with `u`
/// piecewise linear on a uniform grid.
///
/// With `A_c = int_{ch}^{(c+1)h} a` and `B_c = int_{ch}^{(c+1)h} a(u)(u-ch)/h du`
/// the weight of node `j` in row `i` is `B_{i-1}` for `j = 0` and
/// `omega_{i-j}` for `j >= 1`, where `omega_0 = A_0 - B_0` and
/// `omega_k = B_{k-1} + A_k - B_k`. Only `O(n)` numbers are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductWeights {
    pub dt: f64,
    pub n: usize,
    mass: Vec<f64>,
    first: Vec<f64>,
    omega: Vec<f64>,
}

impl ProductWeights {
    fn from_moments(dt: f64, mass: Vec<f64>, first: Vec<f64>) -> Self {
        let n = mass.len();
        let omega = (0..n)
            .map(|k| {
                if k == 0 {
                    mass[0] - first[0]
                } else {
                    first[k - 1] + mass[k] - first[k]
                }
            })
            .collect();
        ProductWeights { dt, n, mass, first, omega }
    }

    /// `w[i][j]`.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j <= i && i <= self.n);
        if i == 0 {
            0.0
        } else if j == 0 {
            self.first[i - 1]
        } else {
            self.omega[i - j]
        }
    }

    /// Self-weight of the newest node, `w[i][i]` for `i >= 1`.
    #[inline]
    pub fn diagonal(&self) -> f64 {
        self.omega[0]
    }

    /// Weight of the left node of lag cell `c` (`B_c`). Used by schemes that
    /// put a jump at the left end of a cell.
    #[inline]
    pub fn left_node_weight(&self, c: usize) -> f64 {
        self.first[c]
    }

    #[inline]
    pub(crate) fn omega(&self, k: usize) -> f64 {
        self.omega[k]
    }

    /// Exact integral of the kernel over cell `c`.
    pub fn cell_mass(&self, c: usize) -> f64 {
        self.mass[c]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..=i).map(|j| self.weight(i, j)).collect()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        crate::grid::pairwise_sum(&self.mass[..i])
    }

    /// Full lower-triangular table `w[i][j]`, `0 <= j <= i <= n`.
    pub fn table(&self) -> Vec<Vec<f64>> {
        (0..=self.n).map(|i| self.row(i)).collect()
    }
}
