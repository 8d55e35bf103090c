//! Reneging probabilities of a tagged arrival and exact QoE perturbation.
//!
//! `P_k(n)` is the probability that a class-`k` flow arriving to state `n`
//! abandons before completing. Conditioning on the first event after the
//! arrival gives `P_k = M_k P_k + u_k` with
//!
//! ```text
//! Lambda_k(n) = lambda + sum_l (n_l + [l = k]) mu_l / (|n| + 1) + (|n| + 1) mu_0
//! u_k(n)      = mu_0 / Lambda_k(n)
//! M_k(n, n + e_j) = lambda_j / Lambda_k(n)
//! M_k(n, n - e_j) = (n_j mu_j / (|n| + 1) + n_j mu_0) / Lambda_k(n)
//! ```
//!
//! `M_k` is non-negative and `0 <= P_k <= 1`, so on a truncated space two
//! monotone solves bracket the infinite-space solution: arrivals that would
//! leave the space are scored 0 (lower) or 1 (upper). Sweeps started from 0
//! (resp. 1) stay below (resp. above) the truth at every iterate.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::ctmc::{self, StationaryDistribution};
use crate::error::{Error, Result};
use crate::format::sig;
use crate::model::CellModel;
use crate::statespace::{choose_truncation, StateVector, TruncatedSpace};

/// Which value is substituted for `P_k` outside the truncated space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Score escaping paths as "never reneges".
    Lower,
    /// Score escaping paths as "always reneges".
    Upper,
}

/// The sparse system `x = M_k x + u_k` restricted to a truncated space.
#[derive(Debug, Clone)]
pub struct FieldOperator {
    class: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    source: Vec<f64>,
    /// Total `M_k` weight of transitions leaving the space.
    escape: Vec<f64>,
}

impl FieldOperator {
    pub fn new(model: &CellModel, space: &TruncatedSpace, class: usize) -> Result<Self> {
        model.check_class(class)?;
        assert_eq!(model.num_classes(), space.num_classes());
        let mu = model.service_rates();
        let mu0 = model.impatience_rate();
        let lambda = model.arrival_rate();
        let arrivals = model.class_arrival_rates();
        let top = space.max_level();

        let mut row_ptr = Vec::with_capacity(space.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut source = Vec::with_capacity(space.len());
        let mut escape = Vec::with_capacity(space.len());
        row_ptr.push(0);
        for state in space.states() {
            let occupied = (state.level() + 1) as f64;
            let service: f64 = state
                .counts()
                .iter()
                .zip(mu)
                .enumerate()
                .map(|(l, (&n_l, &mu_l))| (n_l as f64 + f64::from(l == class)) * mu_l)
                .sum::<f64>()
                / occupied;
            let total = lambda + service + occupied * mu0;

            let mut out = 0.0;
            for (j, &lambda_j) in arrivals.iter().enumerate() {
                if lambda_j == 0.0 {
                    continue;
                }
                if state.level() < top {
                    cols.push(space.rank_unchecked(&state.plus(j)));
                    weights.push(lambda_j / total);
                } else {
                    out += lambda_j / total;
                }
            }
            for (j, &mu_j) in mu.iter().enumerate() {
                if let Some(target) = state.minus(j) {
                    let n_j = state.count(j) as f64;
                    cols.push(space.rank_unchecked(&target));
                    weights.push((n_j * mu_j / occupied + n_j * mu0) / total);
                }
            }
            row_ptr.push(cols.len());
            source.push(mu0 / total);
            escape.push(out);
        }
        Ok(Self {
            class,
            row_ptr,
            cols,
            weights,
            source,
            escape,
        })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// `u_k`.
    pub fn source(&self) -> &[f64] {
        &self.source
    }

    /// `u_k` plus the boundary substitution.
    pub fn rhs(&self, boundary: Boundary) -> Vec<f64> {
        match boundary {
            Boundary::Lower => self.source.clone(),
            Boundary::Upper => self
                .source
                .iter()
                .zip(&self.escape)
                .map(|(u, e)| u + e)
                .collect(),
        }
    }

    fn row_dot(&self, row: usize, x: &[f64]) -> f64 {
        let r = self.row_ptr[row]..self.row_ptr[row + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(&c, &w)| w * x[c])
            .sum()
    }

    /// `M_k x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| self.row_dot(i, x)).collect()
    }

    /// One symmetric Gauss-Seidel sweep of `x <- M_k x + rhs`; returns the
    /// largest change.
    fn sweep(&self, x: &mut [f64], rhs: &[f64]) -> f64 {
        let mut change: f64 = 0.0;
        let n = self.len();
        for i in (0..n).chain((0..n).rev()) {
            let next = self.row_dot(i, x) + rhs[i];
            change = change.max((next - x[i]).abs());
            x[i] = next;
        }
        change
    }
}

/// Sweep budget and stopping rule for the field solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOptions {
    /// Largest admissible bracket width on the certified levels.
    pub tolerance: f64,
    /// Levels `0..=certified_level` are held to `tolerance`; higher levels
    /// act as a guard band and keep their (wider) brackets.
    pub certified_level: usize,
    /// Sweeps stop once neither bound moves by more than this.
    pub sweep_tolerance: f64,
    pub max_sweeps: usize,
}

impl FieldOptions {
    pub fn new(tolerance: f64, certified_level: usize) -> Self {
        Self {
            tolerance,
            certified_level,
            sweep_tolerance: 1e-15,
            max_sweeps: 1_000_000,
        }
    }
}

/// Lower and upper bounds on `P_k(n)` over a truncated space.
#[derive(Debug, Clone, PartialEq)]
pub struct RenegingField {
    class: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    certified_level: usize,
    gap: f64,
    sweeps: usize,
}

impl RenegingField {
    pub fn class(&self) -> usize {
        self.class
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn midpoint(&self, index: usize) -> f64 {
        0.5 * (self.lower[index] + self.upper[index])
    }

    pub fn bracket(&self, index: usize) -> (f64, f64) {
        (self.lower[index], self.upper[index])
    }

    /// Largest `upper - lower` over levels `0..=certified_level`.
    pub fn gap(&self) -> f64 {
        self.gap
    }

    pub fn certified_level(&self) -> usize {
        self.certified_level
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }
}

fn certified_gap(space: &TruncatedSpace, lower: &[f64], upper: &[f64], level: usize) -> f64 {
    let end = space.level_range(level.min(space.max_level())).end;
    lower[..end]
        .iter()
        .zip(&upper[..end])
        .map(|(l, u)| u - l)
        .fold(0.0, f64::max)
}

/// Brackets `P_k` on `space` by monotone Gauss-Seidel sweeps from 0 and 1.
pub fn solve_reneging_field(
    model: &CellModel,
    space: &TruncatedSpace,
    class: usize,
    options: &FieldOptions,
) -> Result<RenegingField> {
    let op = FieldOperator::new(model, space, class)?;
    let n = op.len();
    if model.impatience_rate() == 0.0 {
        // Nobody ever reneges.
        return Ok(RenegingField {
            class,
            lower: vec![0.0; n],
            upper: vec![0.0; n],
            certified_level: options.certified_level,
            gap: 0.0,
            sweeps: 0,
        });
    }
    let rhs_lower = op.rhs(Boundary::Lower);
    let rhs_upper = op.rhs(Boundary::Upper);
    let mut lower = vec![0.0; n];
    let mut upper = vec![1.0; n];
    let mut sweeps = 0;
    let mut settled = false;
    while sweeps < options.max_sweeps {
        sweeps += 1;
        let dl = op.sweep(&mut lower, &rhs_lower);
        let du = op.sweep(&mut upper, &rhs_upper);
        if dl.max(du) <= options.sweep_tolerance {
            settled = true;
            break;
        }
    }
    // Rounding can leave the bounds a few ulps outside [0, 1] or crossed.
    for (l, u) in lower.iter_mut().zip(upper.iter_mut()) {
        *l = l.clamp(0.0, 1.0);
        *u = u.clamp(*l, 1.0);
    }
    let gap = certified_gap(space, &lower, &upper, options.certified_level);
    if gap > options.tolerance {
        return Err(if settled {
            Error::GapTooLarge {
                gap,
                tolerance: options.tolerance,
                max_level: space.max_level(),
            }
        } else {
            Error::Convergence {
                iterations: sweeps,
                residual: gap,
            }
        });
    }
    Ok(RenegingField {
        class,
        lower,
        upper,
        certified_level: options.certified_level,
        gap,
        sweeps,
    })
}

/// Partial sums of `sum_r M_k^r (u_k + boundary)`, summed until the next
/// term is below `tol` everywhere.
#[derive(Debug, Clone)]
pub struct NeumannSeries<'a> {
    op: &'a FieldOperator,
    term: Vec<f64>,
    sum: Vec<f64>,
    terms: usize,
}

impl<'a> NeumannSeries<'a> {
    pub fn new(op: &'a FieldOperator, boundary: Boundary) -> Self {
        let term = op.rhs(boundary);
        Self {
            op,
            sum: vec![0.0; term.len()],
            term,
            terms: 0,
        }
    }

    /// Adds the next term; returns its largest entry.
    pub fn step(&mut self) -> f64 {
        for (s, t) in self.sum.iter_mut().zip(&self.term) {
            *s += t;
        }
        let size = self.term.iter().copied().fold(0.0, f64::max);
        self.term = self.op.apply(&self.term);
        self.terms += 1;
        size
    }

    pub fn partial_sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn terms(&self) -> usize {
        self.terms
    }

    /// Sums until the pending term is below `tol`.
    pub fn sum_to(mut self, tol: f64, max_terms: usize) -> Result<Vec<f64>> {
        while self.terms < max_terms {
            self.step();
            let pending = self.term.iter().copied().fold(0.0, f64::max);
            if pending <= tol {
                return Ok(self.sum);
            }
        }
        Err(Error::Convergence {
            iterations: max_terms,
            residual: self.term.iter().copied().fold(0.0, f64::max),
        })
    }
}

/// Sums the Neumann series of the field with the given boundary.
pub fn neumann_field(
    model: &CellModel,
    space: &TruncatedSpace,
    class: usize,
    boundary: Boundary,
    tol: f64,
    max_terms: usize,
) -> Result<Vec<f64>> {
    let op = FieldOperator::new(model, space, class)?;
    NeumannSeries::new(&op, boundary).sum_to(tol, max_terms)
}

/// `Pcal_k` with its truncation bracket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenegingProbability {
    pub class: usize,
    /// `pi . P_k` using bracket midpoints.
    pub value: f64,
    /// `pi . lower`.
    pub lower: f64,
    /// `pi . upper`.
    pub upper: f64,
    /// `pi . u_k`: probability that reneging is the very first event after
    /// the arrival. Reported for comparison only.
    pub pi_dot_source: f64,
}

impl RenegingProbability {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Per-arrival reneging probability of the field's class, averaged under
/// `pi` (Poisson arrivals see the stationary distribution).
pub fn reneging_probability(
    model: &CellModel,
    space: &TruncatedSpace,
    pi: &StationaryDistribution,
    field: &RenegingField,
) -> Result<RenegingProbability> {
    let op = FieldOperator::new(model, space, field.class())?;
    let p = pi.probabilities();
    let dot = |v: &[f64]| -> f64 { p.iter().zip(v).map(|(a, b)| a * b).sum() };
    let lower = dot(field.lower());
    let upper = dot(field.upper());
    Ok(RenegingProbability {
        class: field.class(),
        value: 0.5 * (lower + upper),
        lower,
        upper,
        pi_dot_source: dot(op.source()),
    })
}

/// Point value and interval of a perturbation metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `Gamma_k(n) = sum_j p_j (P_j(n + e_k) - P_j(n))`.
///
/// `fields` holds one field per class, in class order.
pub fn perturbation_state(
    fields: &[RenegingField],
    model: &CellModel,
    space: &TruncatedSpace,
    state: &StateVector,
    k: usize,
) -> Result<Perturbation> {
    model.check_class(k)?;
    model.check_state(state)?;
    assert_eq!(fields.len(), model.num_classes(), "one field per class");
    let next = state.plus(k);
    let here = space.rank(state)?;
    let there = space.rank(&next)?;
    let mut out = Perturbation {
        value: 0.0,
        lower: 0.0,
        upper: 0.0,
    };
    for (field, p_j) in fields.iter().zip(model.weights()) {
        out.value += p_j * (field.midpoint(there) - field.midpoint(here));
        out.lower += p_j * (field.lower[there] - field.upper[here]);
        out.upper += p_j * (field.upper[there] - field.lower[here]);
    }
    Ok(out)
}

/// `Gamma-hat_k = sum_n Gamma_k(n) pi(n)` over states below the top level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanPerturbation {
    pub class: usize,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// Stationary mass of the top level, left out of the average.
    pub excluded_mass: f64,
}

pub fn perturbation_mean(
    fields: &[RenegingField],
    pi: &StationaryDistribution,
    model: &CellModel,
    space: &TruncatedSpace,
    k: usize,
) -> Result<MeanPerturbation> {
    model.check_class(k)?;
    let top = space.max_level();
    let mut out = MeanPerturbation {
        class: k,
        value: 0.0,
        lower: 0.0,
        upper: 0.0,
        excluded_mass: pi.level_mass(space, top),
    };
    for (state, &p) in space.states().zip(pi.probabilities()) {
        if state.level() == top {
            break;
        }
        let g = perturbation_state(fields, model, space, &state, k)?;
        out.value += p * g.value;
        out.lower += p * g.lower;
        out.upper += p * g.upper;
    }
    Ok(out)
}

/// Writes all fields as CSV: `n_1..n_K`, then `P_k_lower,P_k_upper` per class.
pub fn write_fields_csv<W: Write>(
    mut out: W,
    space: &TruncatedSpace,
    fields: &[RenegingField],
) -> io::Result<()> {
    let mut header: Vec<String> = (1..=space.num_classes())
        .map(|k| format!("n_{k}"))
        .collect();
    for f in fields {
        header.push(format!("P_{}_lower", f.class() + 1));
        header.push(format!("P_{}_upper", f.class() + 1));
    }
    writeln!(out, "{}", header.join(","))?;
    for (i, state) in space.states().enumerate() {
        let mut row: Vec<String> = state.counts().iter().map(u32::to_string).collect();
        for f in fields {
            row.push(sig(f.lower[i]));
            row.push(sig(f.upper[i]));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Settings for [`ExactAnalysis::run`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactOptions {
    /// Poisson tail bound that fixes the certified level.
    pub tail_mass_bound: f64,
    /// Required bracket width on the certified levels.
    pub field_tolerance: f64,
    pub stationary_tolerance: f64,
    pub max_sweeps: usize,
    /// Extra levels solved above the certified level.
    pub guard_levels: usize,
    /// Levels added per escalation when the bracket is too wide.
    pub escalation_step: usize,
    pub max_escalations: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self {
            tail_mass_bound: 1e-9,
            field_tolerance: 1e-6,
            stationary_tolerance: ctmc::DEFAULT_STATIONARY_TOLERANCE,
            max_sweeps: ctmc::DEFAULT_MAX_SWEEPS,
            guard_levels: 10,
            escalation_step: 5,
            max_escalations: 8,
        }
    }
}

/// Stationary distribution, all reneging fields and the derived per-class
/// probabilities on one truncated space.
#[derive(Debug, Clone)]
pub struct ExactAnalysis {
    model: CellModel,
    space: TruncatedSpace,
    stationary: StationaryDistribution,
    fields: Vec<RenegingField>,
    probabilities: Vec<RenegingProbability>,
}

/// Both sides of `sum_k lambda_k Pcal_k = mu_0 E[|n|]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBalance {
    /// `sum_k lambda_k (pi . P_k)`.
    pub reneging_flow: f64,
    /// `sum_k lambda_k (pi . u_k)`.
    pub first_event_flow: f64,
    /// `mu_0 E[|n|]`.
    pub impatience_flow: f64,
    /// `sum_k lambda_k` times the bracket width of `pi . P_k`.
    pub bracket_width: f64,
}

impl RateBalance {
    pub fn reneging_error(&self) -> f64 {
        (self.reneging_flow - self.impatience_flow).abs()
    }

    pub fn first_event_error(&self) -> f64 {
        (self.first_event_flow - self.impatience_flow).abs()
    }
}

impl ExactAnalysis {
    /// Picks the truncation, solves every field (escalating the guard band
    /// until the brackets meet the tolerance) and the stationary law.
    pub fn run(model: &CellModel, options: &ExactOptions) -> Result<Self> {
        let certified = choose_truncation(model, options.tail_mass_bound);
        let mut max_level = certified + options.guard_levels;
        let field_options = FieldOptions {
            max_sweeps: options.max_sweeps,
            ..FieldOptions::new(options.field_tolerance, certified)
        };
        let mut escalations = 0;
        let (space, fields) = loop {
            let space = TruncatedSpace::new(model.num_classes(), max_level)?;
            let solved: Result<Vec<_>> = (0..model.num_classes())
                .into_par_iter()
                .map(|k| solve_reneging_field(model, &space, k, &field_options))
                .collect();
            match solved {
                Ok(fields) => break (space, fields),
                Err(Error::GapTooLarge { .. }) if escalations < options.max_escalations => {
                    escalations += 1;
                    max_level += options.escalation_step;
                }
                Err(e) => return Err(e),
            }
        };
        Self::on_space(model, space, fields, options)
    }

    /// Solves everything on a fixed space, with levels
    /// `0..=certified_level` held to the field tolerance.
    pub fn on_fixed_space(
        model: &CellModel,
        space: TruncatedSpace,
        certified_level: usize,
        options: &ExactOptions,
    ) -> Result<Self> {
        let field_options = FieldOptions {
            max_sweeps: options.max_sweeps,
            ..FieldOptions::new(options.field_tolerance, certified_level)
        };
        let fields = (0..model.num_classes())
            .into_par_iter()
            .map(|k| solve_reneging_field(model, &space, k, &field_options))
            .collect::<Result<Vec<_>>>()?;
        Self::on_space(model, space, fields, options)
    }

    fn on_space(
        model: &CellModel,
        space: TruncatedSpace,
        fields: Vec<RenegingField>,
        options: &ExactOptions,
    ) -> Result<Self> {
        let generator = ctmc::build_generator(model, &space);
        let stationary = ctmc::stationary_distribution(
            &generator,
            options.stationary_tolerance,
            options.max_sweeps,
        )?;
        let probabilities = fields
            .iter()
            .map(|f| reneging_probability(model, &space, &stationary, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: model.clone(),
            space,
            stationary,
            fields,
            probabilities,
        })
    }

    pub fn model(&self) -> &CellModel {
        &self.model
    }

    pub fn space(&self) -> &TruncatedSpace {
        &self.space
    }

    pub fn stationary(&self) -> &StationaryDistribution {
        &self.stationary
    }

    pub fn fields(&self) -> &[RenegingField] {
        &self.fields
    }

    pub fn reneging_probabilities(&self) -> &[RenegingProbability] {
        &self.probabilities
    }

    /// Levels held to the field tolerance.
    pub fn certified_level(&self) -> usize {
        self.fields.first().map_or(0, |f| f.certified_level())
    }

    pub fn mean_population(&self) -> Vec<f64> {
        ctmc::mean_population(&self.stationary, &self.space)
    }

    pub fn perturbation_state(&self, state: &StateVector, k: usize) -> Result<Perturbation> {
        perturbation_state(&self.fields, &self.model, &self.space, state, k)
    }

    pub fn perturbation_mean(&self, k: usize) -> Result<MeanPerturbation> {
        perturbation_mean(&self.fields, &self.stationary, &self.model, &self.space, k)
    }

    pub fn rate_balance(&self) -> RateBalance {
        let lambdas = self.model.class_arrival_rates();
        let mut out = RateBalance {
            reneging_flow: 0.0,
            first_event_flow: 0.0,
            impatience_flow: self.model.impatience_rate()
                * ctmc::mean_total_population(&self.stationary, &self.space),
            bracket_width: 0.0,
        };
        for (p, &l) in self.probabilities.iter().zip(lambdas) {
            out.reneging_flow += l * p.value;
            out.first_event_flow += l * p.pi_dot_source;
            out.bracket_width += l * p.width();
        }
        out
    }
}
