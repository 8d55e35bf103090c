//! Cell and traffic parameterization shared by every solver.
//!
//! Class `k` has throughput `c_k` and weight `p_k` (its share of the Poisson
//! arrival stream). With mean flow volume `E(sigma)`, a lone class-`k` flow
//! completes at rate `mu_k = c_k / E(sigma)`; class arrivals are
//! `lambda_k = lambda * p_k` and loads `rho_k = lambda_k / mu_k`.
//!
//! Volumes and throughputs only enter through their ratio, so any consistent
//! pair of units works (Mbit and Mbit/s, Mbyte and Mbyte/s, ...).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statespace::StateVector;

/// Tolerance on `sum p_k = 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// One radio condition: throughput and share of the offered traffic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub throughput: f64,
    pub weight: f64,
}

impl ClassProfile {
    pub fn new(throughput: f64, weight: f64) -> Self {
        Self { throughput, weight }
    }
}

/// Which of the optional model checks to enforce.
///
/// The default is the full validation. Relaxing `strict_ordering` admits
/// classes with equal throughput (label-symmetry experiments), and
/// `allow_no_impatience` admits `mu_0 = 0` as long as the cell is stable
/// without impatience (`rho < 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validation {
    pub strict_ordering: bool,
    pub allow_no_impatience: bool,
}

impl Default for Validation {
    fn default() -> Self {
        Self {
            strict_ordering: true,
            allow_no_impatience: false,
        }
    }
}

impl Validation {
    pub fn relaxed() -> Self {
        Self {
            strict_ordering: false,
            allow_no_impatience: true,
        }
    }
}

/// Validated cell parameters with derived per-class rates.
///
/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CellModel {
    classes: Vec<ClassProfile>,
    mean_flow_volume: f64,
    arrival_rate: f64,
    impatience_rate: f64,
    validation: Validation,
    service_rates: Vec<f64>,
    class_arrival_rates: Vec<f64>,
    class_loads: Vec<f64>,
    load: f64,
}

/// Builds a fully validated [`CellModel`].
pub fn build_cell_model(
    classes: &[ClassProfile],
    mean_flow_volume: f64,
    arrival_rate: f64,
    impatience_rate: f64,
) -> Result<CellModel> {
    CellModel::new(classes, mean_flow_volume, arrival_rate, impatience_rate)
}

impl CellModel {
    pub fn new(
        classes: &[ClassProfile],
        mean_flow_volume: f64,
        arrival_rate: f64,
        impatience_rate: f64,
    ) -> Result<Self> {
        Self::with_validation(
            classes,
            mean_flow_volume,
            arrival_rate,
            impatience_rate,
            Validation::default(),
        )
    }

    pub fn with_validation(
        classes: &[ClassProfile],
        mean_flow_volume: f64,
        arrival_rate: f64,
        impatience_rate: f64,
        validation: Validation,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::EmptyModel);
        }
        positive("mean_flow_volume", mean_flow_volume)?;
        if !(arrival_rate >= 0.0) || !arrival_rate.is_finite() {
            return Err(Error::NegativeParameter {
                name: "arrival_rate",
                value: arrival_rate,
            });
        }
        for class in classes {
            positive("throughput", class.throughput)?;
            positive("weight", class.weight)?;
            if class.weight > 1.0 {
                return Err(Error::WeightSum { sum: class.weight });
            }
        }
        let sum: f64 = classes.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::WeightSum { sum });
        }
        for (index, pair) in classes.windows(2).enumerate() {
            let (previous, value) = (pair[0].throughput, pair[1].throughput);
            let violates = if validation.strict_ordering {
                value >= previous
            } else {
                value > previous
            };
            if violates {
                return Err(Error::Ordering {
                    index: index + 1,
                    previous,
                    value,
                });
            }
        }

        let service_rates: Vec<f64> = classes
            .iter()
            .map(|c| c.throughput / mean_flow_volume)
            .collect();
        let class_arrival_rates: Vec<f64> =
            classes.iter().map(|c| arrival_rate * c.weight).collect();
        let class_loads: Vec<f64> = class_arrival_rates
            .iter()
            .zip(&service_rates)
            .map(|(l, m)| l / m)
            .collect();
        let load = class_loads.iter().sum();

        let edge_rate = *service_rates.last().expect("non-empty");
        if impatience_rate == 0.0 && validation.allow_no_impatience {
            if load >= 1.0 {
                return Err(Error::Instability { rho: load });
            }
        } else {
            positive("impatience_rate", impatience_rate)?;
            if impatience_rate >= edge_rate {
                return Err(Error::Impatience {
                    impatience: impatience_rate,
                    edge_rate,
                });
            }
        }

        Ok(Self {
            classes: classes.to_vec(),
            mean_flow_volume,
            arrival_rate,
            impatience_rate,
            validation,
            service_rates,
            class_arrival_rates,
            class_loads,
            load,
        })
    }

    /// Same cell with a different total arrival rate.
    pub fn with_arrival_rate(&self, arrival_rate: f64) -> Result<Self> {
        Self::with_validation(
            &self.classes,
            self.mean_flow_volume,
            arrival_rate,
            self.impatience_rate,
            self.validation,
        )
    }

    /// Same cell with a different impatience rate.
    pub fn with_impatience_rate(&self, impatience_rate: f64) -> Result<Self> {
        Self::with_validation(
            &self.classes,
            self.mean_flow_volume,
            self.arrival_rate,
            impatience_rate,
            self.validation,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassProfile] {
        &self.classes
    }

    pub fn mean_flow_volume(&self) -> f64 {
        self.mean_flow_volume
    }

    pub fn arrival_rate(&self) -> f64 {
        self.arrival_rate
    }

    pub fn impatience_rate(&self) -> f64 {
        self.impatience_rate
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.classes.iter().map(|c| c.weight)
    }

    /// `mu_k`, one per class.
    pub fn service_rates(&self) -> &[f64] {
        &self.service_rates
    }

    /// `lambda_k = lambda * p_k`.
    pub fn class_arrival_rates(&self) -> &[f64] {
        &self.class_arrival_rates
    }

    /// `rho_k = lambda_k / mu_k`.
    pub fn class_loads(&self) -> &[f64] {
        &self.class_loads
    }

    /// Total offered load `rho`.
    pub fn load(&self) -> f64 {
        self.load
    }

    pub fn check_class(&self, k: usize) -> Result<()> {
        if k < self.num_classes() {
            Ok(())
        } else {
            Err(Error::UnknownClass {
                index: k,
                classes: self.num_classes(),
            })
        }
    }

    pub fn check_state(&self, state: &StateVector) -> Result<()> {
        if state.num_classes() == self.num_classes() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.num_classes(),
                got: state.num_classes(),
            })
        }
    }

    /// Stationary probability of `state` for the cell without impatience:
    /// `(1 - rho) * |n|!/n! * prod rho_k^n_k`.
    ///
    /// Only meaningful when `rho < 1`.
    pub fn product_form_probability(&self, state: &StateVector) -> Result<f64> {
        self.check_state(state)?;
        if self.load >= 1.0 {
            return Err(Error::Instability { rho: self.load });
        }
        let mut log_weight = 0.0;
        let mut seen = 0usize;
        for (&count, &rho_k) in state.counts().iter().zip(&self.class_loads) {
            let count = count as usize;
            if count == 0 {
                continue;
            }
            if rho_k == 0.0 {
                return Ok(0.0);
            }
            // Multinomial built class by class: C(seen + count, count).
            log_weight += ln_binomial(seen + count, count) + count as f64 * rho_k.ln();
            seen += count;
        }
        Ok((1.0 - self.load) * log_weight.exp())
    }
}

fn positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveParameter { name, value })
    }
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (1..=k)
        .map(|i| ((n - k + i) as f64).ln() - (i as f64).ln())
        .sum()
}
