//! Occupancy vectors and the truncated state space.
//!
//! States are indexed level by level (`|n| = 0, 1, ..., max_level`) and, within
//! a level, in reverse-lexicographic order: `n_1` descending, then `n_2`
//! descending, and so on. For `K = 3`, level 2 reads
//! `(2,0,0) (1,1,0) (1,0,1) (0,2,0) (0,1,1) (0,0,2)`.
//!
//! Stationary vectors and reneging fields are exchanged between modules by
//! this index, so the order is part of the public contract.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CellModel;

/// Lower bound on the truncation level returned by [`choose_truncation`].
pub const MIN_TRUNCATION_LEVEL: usize = 10;

/// Occupancy tuple `(n_1, ..., n_K)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<u32>", into = "Vec<u32>")]
pub struct StateVector {
    counts: Vec<u32>,
    level: usize,
}

impl StateVector {
    pub fn new(counts: Vec<u32>) -> Self {
        let level = counts.iter().map(|&c| c as usize).sum();
        Self { counts, level }
    }

    pub fn zeros(classes: usize) -> Self {
        Self::new(vec![0; classes])
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count(&self, k: usize) -> u32 {
        self.counts[k]
    }

    /// `|n|`.
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// `n + e_k`.
    pub fn plus(&self, k: usize) -> Self {
        let mut counts = self.counts.clone();
        counts[k] += 1;
        Self {
            counts,
            level: self.level + 1,
        }
    }

    /// `n - e_k`, or `None` when `n_k = 0`.
    pub fn minus(&self, k: usize) -> Option<Self> {
        if self.counts[k] == 0 {
            return None;
        }
        let mut counts = self.counts.clone();
        counts[k] -= 1;
        Some(Self {
            counts,
            level: self.level - 1,
        })
    }

    /// Successor in the global enumeration order.
    fn advance(&mut self) {
        let k = self.counts.len();
        if let Some(i) = (0..k.saturating_sub(1)).rev().find(|&i| self.counts[i] > 0) {
            let tail: u32 = self.counts[i + 1..].iter().sum();
            self.counts[i] -= 1;
            self.counts[i + 1] = tail + 1;
            for c in &mut self.counts[i + 2..] {
                *c = 0;
            }
        } else {
            self.level += 1;
            self.counts.iter_mut().for_each(|c| *c = 0);
            self.counts[0] = self.level as u32;
        }
    }
}

impl From<Vec<u32>> for StateVector {
    fn from(counts: Vec<u32>) -> Self {
        Self::new(counts)
    }
}

impl From<StateVector> for Vec<u32> {
    fn from(state: StateVector) -> Self {
        state.counts
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.counts.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// `|S_n| = C(n + K - 1, n)`, the number of `K`-tuples summing to `n`.
pub fn level_size(level: usize, classes: usize) -> Result<u64> {
    binomial(level + classes - 1, level).ok_or(Error::Overflow { level, classes })
}

fn binomial(n: usize, k: usize) -> Option<u64> {
    let k = k.min(n.checked_sub(k)?);
    let mut acc: u128 = 1;
    for i in 1..=k as u128 {
        // acc = C(n - k + i - 1, i - 1) here, so the division is exact.
        acc = acc.checked_mul(n as u128 - k as u128 + i)? / i;
    }
    u64::try_from(acc).ok()
}

/// All states of level `level`, in enumeration order.
pub fn enumerate_level(level: usize, classes: usize) -> Vec<StateVector> {
    assert!(classes >= 1, "at least one class");
    let mut state = StateVector::zeros(classes);
    state.counts[0] = level as u32;
    state.level = level;
    let mut out = Vec::new();
    while state.level == level {
        out.push(state.clone());
        state.advance();
    }
    out
}

/// States with `|n| <= max_level`, ranked level by level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncatedSpace {
    classes: usize,
    max_level: usize,
    /// `offsets[n]` is the index of the first state of level `n`;
    /// `offsets[max_level + 1]` is the size.
    offsets: Vec<usize>,
    /// `compositions[j][r]`: number of `j`-tuples summing to `r`.
    compositions: Vec<Vec<usize>>,
}

impl TruncatedSpace {
    pub fn new(classes: usize, max_level: usize) -> Result<Self> {
        assert!(classes >= 1, "at least one class");
        let overflow = Error::Overflow {
            level: max_level,
            classes,
        };
        // The whole space has C(N + K, K) states; refuse anything that does
        // not fit an index.
        let total = binomial(max_level + classes, classes).ok_or(overflow.clone())?;
        usize::try_from(total).map_err(|_| overflow.clone())?;

        let mut compositions = vec![vec![0usize; max_level + 1]; classes + 1];
        compositions[0][0] = 1;
        for (j, row) in compositions.iter_mut().enumerate().skip(1) {
            for (r, slot) in row.iter_mut().enumerate() {
                *slot = level_size(r, j)? as usize;
            }
        }
        let mut offsets = Vec::with_capacity(max_level + 2);
        let mut acc = 0usize;
        offsets.push(0);
        for size in &compositions[classes] {
            acc += size;
            offsets.push(acc);
        }
        Ok(Self {
            classes,
            max_level,
            offsets,
            compositions,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn len(&self) -> usize {
        self.offsets[self.max_level + 1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index range of the states of `level`.
    pub fn level_range(&self, level: usize) -> Range<usize> {
        self.offsets[level]..self.offsets[level + 1]
    }

    pub fn contains(&self, state: &StateVector) -> bool {
        state.num_classes() == self.classes && state.level() <= self.max_level
    }

    /// Global index of `state`.
    pub fn rank(&self, state: &StateVector) -> Result<usize> {
        if state.num_classes() != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.classes,
                got: state.num_classes(),
            });
        }
        if state.level() > self.max_level {
            return Err(Error::OutOfSpace {
                level: state.level(),
                max_level: self.max_level,
            });
        }
        Ok(self.rank_unchecked(state))
    }

    pub(crate) fn rank_unchecked(&self, state: &StateVector) -> usize {
        let mut index = self.offsets[state.level()];
        let mut remaining = state.level();
        for (i, &c) in state.counts()[..self.classes - 1].iter().enumerate() {
            let c = c as usize;
            let rest = self.classes - i - 1;
            // States whose component i exceeds c come first.
            index += (0..remaining - c)
                .map(|r| self.compositions[rest][r])
                .sum::<usize>();
            remaining -= c;
        }
        index
    }

    /// Inverse of [`rank`](Self::rank).
    pub fn unrank(&self, index: usize) -> Result<StateVector> {
        if index >= self.len() {
            return Err(Error::OutOfSpace {
                level: self.max_level + 1,
                max_level: self.max_level,
            });
        }
        let level = self.offsets.partition_point(|&o| o <= index) - 1;
        let mut pos = index - self.offsets[level];
        let mut remaining = level;
        let mut counts = vec![0u32; self.classes];
        for (i, slot) in counts[..self.classes - 1].iter_mut().enumerate() {
            let rest = self.classes - i - 1;
            let mut a = remaining;
            loop {
                let block = self.compositions[rest][remaining - a];
                if pos < block {
                    break;
                }
                pos -= block;
                a -= 1;
            }
            *slot = a as u32;
            remaining -= a;
        }
        counts[self.classes - 1] = remaining as u32;
        Ok(StateVector::new(counts))
    }

    /// Every state, in index order.
    pub fn states(&self) -> StateIter {
        StateIter {
            next: StateVector::zeros(self.classes),
            remaining: self.len(),
        }
    }
}

/// Iterator over a [`TruncatedSpace`] in index order.
#[derive(Debug, Clone)]
pub struct StateIter {
    next: StateVector,
    remaining: usize,
}

impl Iterator for StateIter {
    type Item = StateVector;

    fn next(&mut self) -> Option<StateVector> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let out = self.next.clone();
        if self.remaining > 0 {
            self.next.advance();
        }
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for StateIter {}

/// Truncation level for the exact solvers.
///
/// The total population is stochastically dominated by an M/M/inf queue with
/// arrival rate `lambda` and service rate `mu_0`, whose stationary law is
/// Poisson(`lambda / mu_0`). Returns the smallest `N` with
/// `P(Poisson > N) < tail_mass_bound`, but never less than
/// [`MIN_TRUNCATION_LEVEL`]. Without impatience (stable baseline) the
/// population is geometric(`rho`) and the same rule applies to its tail.
pub fn choose_truncation(model: &CellModel, tail_mass_bound: f64) -> usize {
    assert!(
        tail_mass_bound > 0.0 && tail_mass_bound < 1.0,
        "tail mass bound must lie in (0, 1)"
    );
    let n = if model.impatience_rate() > 0.0 {
        poisson_tail_level(
            model.arrival_rate() / model.impatience_rate(),
            tail_mass_bound,
        )
    } else {
        geometric_tail_level(model.load(), tail_mass_bound)
    };
    n.max(MIN_TRUNCATION_LEVEL)
}

fn poisson_tail_level(mean: f64, bound: f64) -> usize {
    if mean == 0.0 {
        return 0;
    }
    // Tabulate the pmf well past the mean and sum tails from the top, so
    // small tails are not lost to cancellation in 1 - cdf.
    let horizon = (mean + 40.0 * mean.sqrt() + 100.0).ceil() as usize;
    let ln_mean = mean.ln();
    let mut ln_fact = 0.0;
    let pmf: Vec<f64> = (0..=horizon)
        .map(|k| {
            if k > 0 {
                ln_fact += (k as f64).ln();
            }
            (k as f64 * ln_mean - mean - ln_fact).exp()
        })
        .collect();
    let mut tail = 0.0;
    let mut level = horizon;
    // tail = P(X > level) as we walk down.
    for k in (0..=horizon).rev() {
        if tail + pmf[k] >= bound {
            level = k;
            break;
        }
        tail += pmf[k];
        if k == 0 {
            level = 0;
        }
    }
    level
}

fn geometric_tail_level(rho: f64, bound: f64) -> usize {
    if rho == 0.0 {
        return 0;
    }
    // P(|n| > N) = rho^(N+1).
    let mut level = 0usize;
    let mut tail = rho;
    while tail >= bound {
        tail *= rho;
        level += 1;
    }
    level
}
