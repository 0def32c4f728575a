use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t_i = i * dt`, `i = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dt: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(dt: f64, n: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Invalid(format!("grid step must be positive, got {dt}")));
        }
        if n == 0 {
            return Err(Error::Invalid("grid needs at least one step".into()));
        }
        Ok(Grid { dt, n })
    }

    /// Grid covering `[0, t_end]` with step `dt`. `t_end / dt` must be an
    /// integer up to rounding.
    pub fn with_horizon(t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::Invalid(format!("horizon must be positive, got {t_end}")));
        }
        let steps = t_end / dt;
        let n = steps.round();
        if (steps - n).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::Invalid(format!(
                "horizon {t_end} is not a multiple of the step {dt}"
            )));
        }
        Grid::new(dt, n as usize)
    }

    /// Accepts an explicit list of nodes and rejects anything that is not a
    /// uniform grid starting at zero.
    pub fn from_times(times: &[f64]) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::NonUniformGrid("fewer than two nodes".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::NonUniformGrid(format!("first node is {}, not 0", times[0])));
        }
        let dt = times[1] - times[0];
        for (i, &t) in times.iter().enumerate() {
            let expected = i as f64 * dt;
            if (t - expected).abs() > 1e-9 * dt.max(expected.abs()) {
                return Err(Error::NonUniformGrid(format!(
                    "node {i} is {t}, expected {expected}"
                )));
            }
        }
        Grid::new(dt, times.len() - 1)
    }

    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.t(self.n)
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.t(i)).collect()
    }

    /// The grid with `factor` times as many steps over the same horizon.
    pub fn refine(&self, factor: usize) -> Grid {
        Grid { dt: self.dt / factor as f64, n: self.n * factor }
    }

    /// The grid keeping every `factor`-th node. `n` must be divisible.
    pub fn coarsen(&self, factor: usize) -> Result<Grid> {
        if factor == 0 || self.n % factor != 0 {
            return Err(Error::Invalid(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.n
            )));
        }
        Ok(Grid { dt: self.dt * factor as f64, n: self.n / factor })
    }

    /// Node index closest to `t`, clamped to the grid.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.n)
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.n == other.n && (self.dt - other.dt).abs() <= 1e-12 * self.dt
    }
}

/// Values sampled on a uniform grid, one per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction<T> {
    pub grid: Grid,
    pub values: Vec<T>,
}

impl<T> GridFunction<T> {
    pub fn new(grid: Grid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: values.len() });
        }
        Ok(GridFunction { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> T) -> Self {
        let values = (0..=grid.n).map(|i| f(grid.t(i))).collect();
        GridFunction { grid, values }
    }

    pub fn at(&self, i: usize) -> &T {
        &self.values[i]
    }

    pub fn last(&self) -> &T {
        &self.values[self.grid.n]
    }
}

impl GridFunction<f64> {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_with_index(&self) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, &v) in self.values.iter().enumerate() {
            if v < best.0 {
                best = (v, i);
            }
        }
        best
    }
}

/// Pairwise (cascade) summation; the result does not depend on how the
/// caller partitioned the work, only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error (sample std / sqrt(P)) with pairwise sums.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let p = xs.len();
    if p == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(xs) / p as f64;
    if p == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (p as f64 - 1.0);
    (mean, (var / p as f64).sqrt())
}
