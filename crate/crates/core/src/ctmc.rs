//! Generator of the impatience chain and its stationary distribution.
//!
//! From state `n` the chain jumps to `n + e_k` at rate `lambda_k` and to
//! `n - e_k` at rate `n_k mu_k / |n| + n_k mu_0`. On a [`TruncatedSpace`]
//! arrivals at the top level are rejected and the diagonal is adjusted so
//! every row still sums to zero.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::format::sig;
use crate::model::CellModel;
use crate::statespace::{StateVector, TruncatedSpace};

/// Default stopping tolerance on `||pi Q||_inf`.
pub const DEFAULT_STATIONARY_TOLERANCE: f64 = 1e-10;
/// Default sweep budget for [`stationary_distribution`].
pub const DEFAULT_MAX_SWEEPS: usize = 200_000;

/// Non-null off-diagonal rates out of `state`: arrivals first (class order),
/// then departures (class order).
pub fn transition_rates(model: &CellModel, state: &StateVector) -> Vec<(StateVector, f64)> {
    let k = model.num_classes();
    let mut out = Vec::with_capacity(2 * k);
    for (class, &rate) in model.class_arrival_rates().iter().enumerate() {
        if rate > 0.0 {
            out.push((state.plus(class), rate));
        }
    }
    for class in 0..k {
        if let Some(target) = state.minus(class) {
            out.push((target, departure_rate(model, state, class)));
        }
    }
    out
}

/// `n_k mu_k / |n| + n_k mu_0`; zero when `n_k = 0`.
pub fn departure_rate(model: &CellModel, state: &StateVector, class: usize) -> f64 {
    let n_k = state.count(class) as f64;
    if n_k == 0.0 {
        return 0.0;
    }
    n_k * model.service_rates()[class] / state.level() as f64 + n_k * model.impatience_rate()
}

/// Sparse generator over a [`TruncatedSpace`], stored by rows and by columns.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    size: usize,
    row_ptr: Vec<usize>,
    row_cols: Vec<usize>,
    row_rates: Vec<f64>,
    col_ptr: Vec<usize>,
    col_rows: Vec<usize>,
    col_rates: Vec<f64>,
    /// Total exit rate of each state (`-q(n, n)`).
    exit: Vec<f64>,
}

impl GeneratorMatrix {
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Off-diagonal entries `(column, rate)` of `row`.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[row]..self.row_ptr[row + 1];
        self.row_cols[r.clone()]
            .iter()
            .copied()
            .zip(self.row_rates[r].iter().copied())
    }

    /// Off-diagonal entries `(row, rate)` of `column`.
    pub fn column(&self, col: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_ptr[col]..self.col_ptr[col + 1];
        self.col_rows[r.clone()]
            .iter()
            .copied()
            .zip(self.col_rates[r].iter().copied())
    }

    /// `q(n, n)`.
    pub fn diagonal(&self, row: usize) -> f64 {
        -self.exit[row]
    }

    /// Largest exit rate, the natural uniformization constant.
    pub fn max_exit_rate(&self) -> f64 {
        self.exit.iter().copied().fold(0.0, f64::max)
    }

    /// `||x Q||_inf` for a row vector `x`.
    pub fn left_residual(&self, x: &[f64]) -> f64 {
        (0..self.size)
            .map(|j| {
                let inflow: f64 = self.column(j).map(|(i, q)| x[i] * q).sum();
                (inflow - x[j] * self.exit[j]).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Assembles the truncated generator.
pub fn build_generator(model: &CellModel, space: &TruncatedSpace) -> GeneratorMatrix {
    assert_eq!(model.num_classes(), space.num_classes());
    let size = space.len();
    let top = space.max_level();
    let mut row_ptr = Vec::with_capacity(size + 1);
    let mut row_cols = Vec::new();
    let mut row_rates = Vec::new();
    let mut exit = Vec::with_capacity(size);
    row_ptr.push(0);
    for state in space.states() {
        let mut total = 0.0;
        for (target, rate) in transition_rates(model, &state) {
            if target.level() > top {
                continue;
            }
            row_cols.push(space.rank_unchecked(&target));
            row_rates.push(rate);
            total += rate;
        }
        exit.push(total);
        row_ptr.push(row_cols.len());
    }

    // Transpose for column sweeps.
    let mut counts = vec![0usize; size + 1];
    for &c in &row_cols {
        counts[c + 1] += 1;
    }
    for i in 0..size {
        counts[i + 1] += counts[i];
    }
    let col_ptr = counts.clone();
    let mut fill = counts;
    let mut col_rows = vec![0usize; row_cols.len()];
    let mut col_rates = vec![0.0; row_cols.len()];
    for row in 0..size {
        for e in row_ptr[row]..row_ptr[row + 1] {
            let c = row_cols[e];
            col_rows[fill[c]] = row;
            col_rates[fill[c]] = row_rates[e];
            fill[c] += 1;
        }
    }

    GeneratorMatrix {
        size,
        row_ptr,
        row_cols,
        row_rates,
        col_ptr,
        col_rows,
        col_rates,
        exit,
    }
}

/// Probability vector `pi` with `pi Q = 0` on the truncated space.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    probabilities: Vec<f64>,
    residual: f64,
    sweeps: usize,
}

impl StationaryDistribution {
    /// Wraps an arbitrary probability vector; `residual` is left at NaN.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        Self {
            probabilities,
            residual: f64::NAN,
            sweeps: 0,
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn get(&self, index: usize) -> f64 {
        self.probabilities[index]
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// `||pi Q||_inf` reached by the solver.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    /// Probability mass on the states of `level`.
    pub fn level_mass(&self, space: &TruncatedSpace, level: usize) -> f64 {
        self.probabilities[space.level_range(level)].iter().sum()
    }
}

/// Gauss-Seidel sweeps on `pi Q = 0` in state index order.
///
/// A sweep updates `pi_j <- sum_i pi_i q(i, j) / (-q(j, j))`, which is the
/// Gauss-Seidel step of the uniformized chain `I + Q / Lambda` for any
/// uniformization constant. The vector is renormalized after every sweep;
/// the solve stops once `||pi Q||_inf <= tol`.
pub fn stationary_distribution(
    generator: &GeneratorMatrix,
    tol: f64,
    max_sweeps: usize,
) -> Result<StationaryDistribution> {
    let n = generator.len();
    if n == 1 {
        return Ok(StationaryDistribution {
            probabilities: vec![1.0],
            residual: 0.0,
            sweeps: 0,
        });
    }
    let mut pi = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        for j in 0..n {
            gs_update(generator, &mut pi, j);
        }
        // Backward half-sweep: symmetric Gauss-Seidel moves mass both up
        // and down the levels in one iteration.
        for j in (0..n).rev() {
            gs_update(generator, &mut pi, j);
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        residual = generator.left_residual(&pi);
        if residual <= tol {
            return Ok(StationaryDistribution {
                probabilities: pi,
                residual,
                sweeps: sweep,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_sweeps,
        residual,
    })
}

fn gs_update(generator: &GeneratorMatrix, pi: &mut [f64], j: usize) {
    // Absorbing states (only the empty state when lambda = 0) keep their mass.
    if generator.exit[j] > 0.0 {
        let inflow: f64 = generator.column(j).map(|(i, q)| pi[i] * q).sum();
        pi[j] = inflow / generator.exit[j];
    }
}

/// `E[n_k]` for every class.
pub fn mean_population(dist: &StationaryDistribution, space: &TruncatedSpace) -> Vec<f64> {
    let mut means = vec![0.0; space.num_classes()];
    for (state, &p) in space.states().zip(dist.probabilities()) {
        for (m, &c) in means.iter_mut().zip(state.counts()) {
            *m += p * c as f64;
        }
    }
    means
}

/// `E[|n|]`.
pub fn mean_total_population(dist: &StationaryDistribution, space: &TruncatedSpace) -> f64 {
    mean_population(dist, space).iter().sum()
}

/// Stationary rate of flows leaving the system (completions plus
/// renegings).
pub fn departure_throughput(
    model: &CellModel,
    dist: &StationaryDistribution,
    space: &TruncatedSpace,
) -> f64 {
    space
        .states()
        .zip(dist.probabilities())
        .map(|(s, &p)| {
            p * (0..model.num_classes())
                .map(|k| departure_rate(model, &s, k))
                .sum::<f64>()
        })
        .sum()
}

/// Writes `pi` as CSV with header `n_1,...,n_K,probability`.
pub fn write_stationary_csv<W: Write>(
    mut out: W,
    space: &TruncatedSpace,
    dist: &StationaryDistribution,
) -> io::Result<()> {
    let header: Vec<String> = (1..=space.num_classes())
        .map(|k| format!("n_{k}"))
        .collect();
    writeln!(out, "{},probability", header.join(","))?;
    for (state, &p) in space.states().zip(dist.probabilities()) {
        let counts: Vec<String> = state.counts().iter().map(u32::to_string).collect();
        writeln!(out, "{},{}", counts.join(","), sig(p))?;
    }
    Ok(())
}
