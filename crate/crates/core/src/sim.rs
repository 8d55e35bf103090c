//! Seeded simulation of the impatience chain.
//!
//! Every timer in the model is exponential, so the simulator walks the jump
//! chain directly: hold for an exponential time with the total event rate,
//! then pick arrival (`lambda_k`), completion (`n_k mu_k / |n|`) or
//! abandonment (`n_k mu_0`) in proportion to its rate. Nothing here reads
//! the analytic solvers, which keeps it usable as their oracle.
//!
//! Replication `r` draws from `ChaCha8Rng::seed_from_u64(seed + r)`, so
//! results do not depend on how replications are spread over threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CellModel;
use crate::statespace::StateVector;

/// Tagged-customer experiment: inject one class-`class` flow into
/// `initial_state` and follow it until it leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedMode {
    pub class: usize,
    pub initial_state: StateVector,
    pub trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Simulated seconds discarded before measuring.
    pub warmup: f64,
    /// Simulated seconds measured per replication.
    pub duration: f64,
    pub replications: usize,
    #[serde(default)]
    pub tagged: Option<TaggedMode>,
}

impl SimConfig {
    pub fn new(seed: u64, warmup: f64, duration: f64, replications: usize) -> Self {
        Self {
            seed,
            warmup,
            duration,
            replications,
            tagged: None,
        }
    }

    /// Warmup of ten relaxation times, `10 * max(1/mu_0, |n|/lambda)`, with
    /// `|n|` the fluid population `S / mu_0` (or the M/M/inf bound
    /// `lambda / mu_0` outside overload).
    pub fn default_warmup(model: &CellModel) -> f64 {
        let mu0 = model.impatience_rate();
        let lambda = model.arrival_rate();
        if mu0 == 0.0 {
            // Stable cell without impatience: relaxation ~ 1 / (mu_K (1 - rho)).
            let edge = *model.service_rates().last().expect("non-empty");
            return 10.0 / (edge * (1.0 - model.load()));
        }
        let population = crate::fluid::solve_fixed_point(model)
            .map(|s| s / mu0)
            .unwrap_or(lambda / mu0);
        let drain = if lambda > 0.0 {
            population / lambda
        } else {
            0.0
        };
        10.0 * (1.0 / mu0).max(drain)
    }

    fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::NonPositiveParameter {
                name: "duration",
                value: self.duration,
            });
        }
        if !(self.warmup >= 0.0) {
            return Err(Error::NegativeParameter {
                name: "warmup",
                value: self.warmup,
            });
        }
        if self.replications == 0 {
            return Err(Error::NonPositiveParameter {
                name: "replications",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Raw counts and time averages of one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub replication: usize,
    /// Whole-run counts (warmup included), for flow conservation.
    pub arrivals: Vec<u64>,
    pub completions: Vec<u64>,
    pub renegings: Vec<u64>,
    pub final_state: Vec<u32>,
    /// Counts inside the measurement window.
    pub window_arrivals: Vec<u64>,
    pub window_completions: Vec<u64>,
    pub window_renegings: Vec<u64>,
    /// Time-averaged `n_k` over the window.
    pub mean_population: Vec<f64>,
    /// Fraction of window time spent at each total population.
    pub level_time: Vec<f64>,
    /// Fraction of window arrivals that saw each total population.
    pub level_seen_by_arrivals: Vec<f64>,
}

impl ReplicationResult {
    /// `arrivals = completions + renegings + in system at the end`, per class.
    pub fn flow_conserved(&self) -> bool {
        (0..self.arrivals.len()).all(|k| {
            self.arrivals[k] == self.completions[k] + self.renegings[k] + self.final_state[k] as u64
        })
    }

    /// Window renegings over window arrivals, per class.
    pub fn reneging_fraction(&self, k: usize) -> Option<f64> {
        let a = self.window_arrivals[k];
        (a > 0).then(|| self.window_renegings[k] as f64 / a as f64)
    }
}

#[derive(Clone, Copy)]
enum Event {
    Arrival(usize),
    Completion(usize),
    Reneging(usize),
}

fn exp_sample(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

/// Draws the next event of the untagged process in `counts`.
fn next_event(
    model: &CellModel,
    counts: &[u32],
    level: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, Event) {
    let mu = model.service_rates();
    let mu0 = model.impatience_rate();
    let lambda = model.arrival_rate();
    let share = if level > 0 { 1.0 / level as f64 } else { 0.0 };
    let service: f64 = counts
        .iter()
        .zip(mu)
        .map(|(&n, &m)| n as f64 * m)
        .sum::<f64>()
        * share;
    let total = lambda + service + level as f64 * mu0;
    let dt = exp_sample(rng, total);
    let mut pick = rng.random::<f64>() * total;
    for (k, &l) in model.class_arrival_rates().iter().enumerate() {
        if pick < l {
            return (dt, Event::Arrival(k));
        }
        pick -= l;
    }
    for (k, (&n, &m)) in counts.iter().zip(mu).enumerate() {
        let r = n as f64 * m * share;
        if pick < r {
            return (dt, Event::Completion(k));
        }
        pick -= r;
    }
    // Remaining mass is abandonment; fall back on the last occupied class
    // if rounding leaves `pick` past the end.
    let mut last = 0;
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        last = k;
        let r = n as f64 * mu0;
        if pick < r {
            return (dt, Event::Reneging(k));
        }
        pick -= r;
    }
    (dt, Event::Reneging(last))
}

/// Runs replication `replication` of the steady-state experiment from an
/// empty cell.
pub fn run_replication(
    model: &CellModel,
    config: &SimConfig,
    replication: usize,
) -> ReplicationResult {
    let k = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(replication as u64));
    let mut counts = vec![0u32; k];
    let mut level = 0usize;
    let mut r = ReplicationResult {
        replication,
        arrivals: vec![0; k],
        completions: vec![0; k],
        renegings: vec![0; k],
        final_state: vec![0; k],
        window_arrivals: vec![0; k],
        window_completions: vec![0; k],
        window_renegings: vec![0; k],
        mean_population: vec![0.0; k],
        level_time: Vec::new(),
        level_seen_by_arrivals: Vec::new(),
    };
    let start = config.warmup;
    let end = config.warmup + config.duration;
    let mut seen = Vec::<u64>::new();
    let mut t = 0.0;
    loop {
        let (dt, event) = next_event(model, &counts, level, &mut rng);
        let next_t = t + dt;
        // Time-weighted accumulation of the current state over the window.
        let overlap = next_t.min(end) - t.max(start);
        if overlap > 0.0 {
            for (m, &n) in r.mean_population.iter_mut().zip(&counts) {
                *m += n as f64 * overlap;
            }
            if r.level_time.len() <= level {
                r.level_time.resize(level + 1, 0.0);
            }
            r.level_time[level] += overlap;
        }
        if next_t >= end {
            break;
        }
        t = next_t;
        let in_window = t >= start;
        match event {
            Event::Arrival(c) => {
                r.arrivals[c] += 1;
                if in_window {
                    r.window_arrivals[c] += 1;
                    if seen.len() <= level {
                        seen.resize(level + 1, 0);
                    }
                    seen[level] += 1;
                }
                counts[c] += 1;
                level += 1;
            }
            Event::Completion(c) => {
                r.completions[c] += 1;
                if in_window {
                    r.window_completions[c] += 1;
                }
                counts[c] -= 1;
                level -= 1;
            }
            Event::Reneging(c) => {
                r.renegings[c] += 1;
                if in_window {
                    r.window_renegings[c] += 1;
                }
                counts[c] -= 1;
                level -= 1;
            }
        }
    }
    r.final_state = counts;
    r.mean_population
        .iter_mut()
        .for_each(|m| *m /= config.duration);
    r.level_time.iter_mut().for_each(|x| *x /= config.duration);
    let total_seen: u64 = seen.iter().sum();
    r.level_seen_by_arrivals = seen
        .iter()
        .map(|&s| {
            if total_seen > 0 {
                s as f64 / total_seen as f64
            } else {
                0.0
            }
        })
        .collect();
    r
}

/// Mean and standard error across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    /// `None` with fewer than two samples.
    pub standard_error: Option<f64>,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = pairwise_sum(samples) / n as f64;
        let standard_error = (n >= 2).then(|| {
            let dev: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
            (pairwise_sum(&dev) / (n - 1) as f64 / n as f64).sqrt()
        });
        Self {
            mean,
            standard_error,
            samples: n,
        }
    }

    /// `mean +- 1.96 SE`.
    pub fn confidence_interval(&self) -> Option<(f64, f64)> {
        self.standard_error
            .map(|se| (self.mean - 1.96 * se, self.mean + 1.96 * se))
    }

    /// Whether `value` lies within `z` standard errors of the mean.
    pub fn covers(&self, value: f64, z: f64) -> bool {
        match self.standard_error {
            Some(se) => (value - self.mean).abs() <= z * se,
            None => false,
        }
    }
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Aggregated steady-state estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEstimates {
    /// Per class, fraction of window arrivals that abandoned.
    pub reneging: Vec<Estimate>,
    /// Per class, time-averaged `n_k`.
    pub mean_population: Vec<Estimate>,
    /// Time-averaged `|n|`.
    pub mean_total_population: Estimate,
    /// Abandonments per second over the window.
    pub reneging_rate: Estimate,
    /// Time fraction at each `|n|`, averaged over replications.
    pub level_distribution: Vec<f64>,
    /// Arrival-seen distribution of `|n|`, averaged over replications.
    pub arrival_level_distribution: Vec<f64>,
    /// Whole-run counts summed over replications.
    pub arrivals: Vec<u64>,
    pub completions: Vec<u64>,
    pub renegings: Vec<u64>,
    pub in_system_at_end: Vec<u64>,
    /// Arrivals inside the measurement windows.
    pub window_arrivals: Vec<u64>,
    /// Every replication satisfied per-class flow conservation.
    pub flow_conserved: bool,
    pub tagged: Option<TaggedEstimate>,
}

impl SimEstimates {
    /// Chi-square statistic of the arrival-seen level histogram against
    /// the time-averaged one (advisory).
    pub fn pasta_chi_square(&self) -> f64 {
        let total_arrivals: u64 = self.window_arrivals.iter().sum();
        let n = total_arrivals as f64;
        self.level_distribution
            .iter()
            .enumerate()
            .filter(|(_, &p)| p * n >= 5.0)
            .map(|(i, &p)| {
                let q = self
                    .arrival_level_distribution
                    .get(i)
                    .copied()
                    .unwrap_or(0.0);
                n * (q - p) * (q - p) / p
            })
            .sum()
    }
}

fn aggregate(model: &CellModel, config: &SimConfig, reps: &[ReplicationResult]) -> SimEstimates {
    let k = model.num_classes();
    let column = |f: &dyn Fn(&ReplicationResult) -> Option<f64>| -> Estimate {
        let xs: Vec<f64> = reps.iter().filter_map(f).collect();
        Estimate::from_samples(&xs)
    };
    let reneging = (0..k)
        .map(|c| column(&|r| r.reneging_fraction(c)))
        .collect();
    let mean_population = (0..k)
        .map(|c| column(&|r| Some(r.mean_population[c])))
        .collect();
    let mean_total_population = column(&|r| Some(r.mean_population.iter().sum()));
    let reneging_rate =
        column(&|r| Some(r.window_renegings.iter().sum::<u64>() as f64 / config.duration));
    let average_hist = |get: &dyn Fn(&ReplicationResult) -> &Vec<f64>| -> Vec<f64> {
        let len = reps.iter().map(|r| get(r).len()).max().unwrap_or(0);
        (0..len)
            .map(|i| {
                let xs: Vec<f64> = reps
                    .iter()
                    .map(|r| get(r).get(i).copied().unwrap_or(0.0))
                    .collect();
                pairwise_sum(&xs) / reps.len() as f64
            })
            .collect()
    };
    let sum_counts = |get: &dyn Fn(&ReplicationResult) -> Vec<u64>| -> Vec<u64> {
        reps.iter().fold(vec![0; k], |mut acc, r| {
            for (a, b) in acc.iter_mut().zip(get(r)) {
                *a += b;
            }
            acc
        })
    };
    SimEstimates {
        reneging,
        mean_population,
        mean_total_population,
        reneging_rate,
        level_distribution: average_hist(&|r| &r.level_time),
        arrival_level_distribution: average_hist(&|r| &r.level_seen_by_arrivals),
        arrivals: sum_counts(&|r| r.arrivals.clone()),
        window_arrivals: sum_counts(&|r| r.window_arrivals.clone()),
        completions: sum_counts(&|r| r.completions.clone()),
        renegings: sum_counts(&|r| r.renegings.clone()),
        in_system_at_end: sum_counts(&|r| r.final_state.iter().map(|&x| x as u64).collect()),
        flow_conserved: reps.iter().all(ReplicationResult::flow_conserved),
        tagged: None,
    }
}

/// Runs every configured replication (in parallel) and the tagged
/// experiment when one is configured.
pub fn simulate(model: &CellModel, config: &SimConfig) -> Result<SimEstimates> {
    config.validate()?;
    let reps: Vec<ReplicationResult> = (0..config.replications)
        .into_par_iter()
        .map(|r| run_replication(model, config, r))
        .collect();
    let mut estimates = aggregate(model, config, &reps);
    if let Some(mode) = &config.tagged {
        estimates.tagged = Some(tagged_customer(model, config.seed, mode)?);
    }
    Ok(estimates)
}

/// Like [`simulate`], but insists on at least two replications so every
/// estimate carries a standard error.
pub fn replicate(model: &CellModel, config: &SimConfig) -> Result<SimEstimates> {
    if config.replications < 2 {
        return Err(Error::Config(format!(
            "replicate needs at least 2 replications, got {}",
            config.replications
        )));
    }
    simulate(model, config)
}

/// Outcome of a tagged-customer experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaggedEstimate {
    pub class: usize,
    pub trials: u64,
    pub renegings: u64,
    pub probability: f64,
    pub standard_error: f64,
}

impl TaggedEstimate {
    pub fn covers(&self, value: f64, z: f64) -> bool {
        (value - self.probability).abs() <= z * self.standard_error
    }
}

/// Follows one tagged flow per trial; returns `true` when it abandons.
fn tagged_trial(model: &CellModel, class: usize, start: &[u32], rng: &mut ChaCha8Rng) -> bool {
    let mu = model.service_rates();
    let mu0 = model.impatience_rate();
    let lambda = model.arrival_rate();
    let arrivals = model.class_arrival_rates();
    let mut counts = start.to_vec();
    let mut others: usize = counts.iter().map(|&c| c as usize).sum();
    loop {
        let share = 1.0 / (others + 1) as f64;
        let tagged_done = mu[class] * share;
        let service: f64 = counts
            .iter()
            .zip(mu)
            .map(|(&n, &m)| n as f64 * m)
            .sum::<f64>()
            * share;
        let total = lambda + service + others as f64 * mu0 + tagged_done + mu0;
        let mut pick = rng.random::<f64>() * total;
        if pick < mu0 {
            return true;
        }
        pick -= mu0;
        if pick < tagged_done {
            return false;
        }
        pick -= tagged_done;
        if pick < lambda {
            let mut j = 0;
            while j + 1 < arrivals.len() && pick >= arrivals[j] {
                pick -= arrivals[j];
                j += 1;
            }
            counts[j] += 1;
            others += 1;
            continue;
        }
        pick -= lambda;
        // Some other flow leaves (completion or abandonment).
        let mut chosen = None;
        for (j, (&n, &m)) in counts.iter().zip(mu).enumerate() {
            let r = n as f64 * (m * share + mu0);
            if n > 0 {
                chosen = Some(j);
            }
            if pick < r {
                break;
            }
            pick -= r;
        }
        if let Some(j) = chosen {
            counts[j] -= 1;
            others -= 1;
        }
    }
}

/// Estimates `P_k(n)` by following `mode.trials` tagged arrivals; trial `i`
/// uses seed `seed + i`.
pub fn tagged_customer(model: &CellModel, seed: u64, mode: &TaggedMode) -> Result<TaggedEstimate> {
    model.check_class(mode.class)?;
    model.check_state(&mode.initial_state)?;
    if mode.trials == 0 {
        return Err(Error::NonPositiveParameter {
            name: "trials",
            value: 0.0,
        });
    }
    let start = mode.initial_state.counts();
    let renegings: u64 = (0..mode.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            u64::from(tagged_trial(model, mode.class, start, &mut rng))
        })
        .sum();
    let p = renegings as f64 / mode.trials as f64;
    Ok(TaggedEstimate {
        class: mode.class,
        trials: mode.trials,
        renegings,
        probability: p,
        standard_error: (p * (1.0 - p) / mode.trials as f64).sqrt(),
    })
}
