//! Two-part tariffs driven by the QoE perturbation metric.
//!
//! A subscriber pays a flat access fee per billing period plus an elastic
//! per-Mbyte price `e_k = alpha * Gamma_k` that depends on their radio
//! class. The alternative flavor is a prepaid budget of congestion rights
//! that traffic decrements by `beta * Gamma_k` per Mbyte; an exhausted
//! budget means throttling.
//!
//! The default source of `Gamma_k` is the fluid metric, which does not
//! depend on the current cell state nor on the impatience rate. Prices can
//! be rebuilt whenever the operator re-estimates arrival rates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fluid::FluidSolution;
use crate::model::CellModel;
use crate::reneging::ExactAnalysis;
use crate::statespace::StateVector;

fn non_negative(name: &'static str, value: f64) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NegativeParameter { name, value })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tariff {
    /// Currency per billing period, independent of usage.
    pub flat_rate: f64,
    /// Currency per Mbyte per unit of perturbation.
    pub alpha: f64,
    /// `alpha * Gamma_k`, currency per Mbyte.
    pub prices_per_mbyte: Vec<f64>,
    pub throughputs: Vec<f64>,
    /// Fluid solution the prices were derived from.
    pub fluid: FluidSolution,
}

pub fn build_tariff(
    model: &CellModel,
    fluid: &FluidSolution,
    flat_rate: f64,
    alpha: f64,
) -> Result<Tariff> {
    non_negative("flat_rate", flat_rate)?;
    non_negative("alpha", alpha)?;
    if fluid.num_classes() != model.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: model.num_classes(),
            got: fluid.num_classes(),
        });
    }
    Ok(Tariff {
        flat_rate,
        alpha,
        prices_per_mbyte: fluid.perturbations.iter().map(|g| alpha * g).collect(),
        throughputs: model.classes().iter().map(|c| c.throughput).collect(),
        fluid: fluid.clone(),
    })
}

impl Tariff {
    pub fn num_classes(&self) -> usize {
        self.prices_per_mbyte.len()
    }

    fn check_class(&self, k: usize) -> Result<()> {
        if k < self.num_classes() {
            Ok(())
        } else {
            Err(Error::UnknownClass {
                index: k,
                classes: self.num_classes(),
            })
        }
    }
}

/// Elastic charge of one session: `e_k * volume`. The flat rate is billed
/// per period and never appears here.
pub fn bill_session(tariff: &Tariff, k: usize, volume_mbyte: f64) -> Result<f64> {
    tariff.check_class(k)?;
    non_negative("volume", volume_mbyte)?;
    Ok(tariff.prices_per_mbyte[k] * volume_mbyte)
}

/// Prepaid congestion rights of one subscriber. Updates must be serialized
/// per subscriber.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RightsBudget {
    pub remaining: f64,
    /// Rights per Mbyte per unit of perturbation.
    pub beta: f64,
}

impl RightsBudget {
    pub fn new(remaining: f64, beta: f64) -> Result<Self> {
        non_negative("remaining", remaining)?;
        non_negative("beta", beta)?;
        Ok(Self { remaining, beta })
    }

    pub fn exhausted(&self) -> bool {
        self.remaining == 0.0
    }
}

/// Charges `beta * Gamma_k * volume` against the budget, clamped at zero.
/// Returns the new budget and whether the subscriber is now throttled.
pub fn consume_rights(
    budget: &RightsBudget,
    fluid: &FluidSolution,
    k: usize,
    volume_mbyte: f64,
) -> Result<(RightsBudget, bool)> {
    if k >= fluid.num_classes() {
        return Err(Error::UnknownClass {
            index: k,
            classes: fluid.num_classes(),
        });
    }
    non_negative("volume", volume_mbyte)?;
    let charge = budget.beta * fluid.perturbations[k] * volume_mbyte;
    let remaining = (budget.remaining - charge).max(0.0);
    let next = RightsBudget {
        remaining,
        beta: budget.beta,
    };
    Ok((next, next.exhausted()))
}

/// Where the perturbation values of a price table come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NotificationMode {
    /// Fluid `Gamma_k`; ignores the current state.
    Fluid,
    /// Exact `Gamma_k(n)` at the current state.
    StateDependent,
}

/// Solved inputs available to [`price_table_notification`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PriceSources<'a> {
    pub fluid: Option<&'a FluidSolution>,
    pub exact: Option<&'a ExactAnalysis>,
}

/// One line of a price notification; classes are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriceEntry {
    pub class_index: usize,
    pub throughput: f64,
    pub gamma: f64,
    pub price_per_mbyte: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriceTable {
    pub mode: NotificationMode,
    pub entries: Vec<PriceEntry>,
}

/// Per-class perturbation and per-Mbyte price to push to subscribers.
pub fn price_table_notification(
    model: &CellModel,
    alpha: f64,
    mode: NotificationMode,
    current_state: &StateVector,
    sources: PriceSources<'_>,
) -> Result<PriceTable> {
    non_negative("alpha", alpha)?;
    let gammas: Vec<f64> = match mode {
        NotificationMode::Fluid => sources
            .fluid
            .ok_or_else(|| Error::Config("fluid mode needs a fluid solution".into()))?
            .perturbations
            .clone(),
        NotificationMode::StateDependent => {
            let exact = sources
                .exact
                .ok_or_else(|| Error::Config("state mode needs an exact analysis".into()))?;
            (0..model.num_classes())
                .map(|k| exact.perturbation_state(current_state, k).map(|g| g.value))
                .collect::<Result<_>>()?
        }
    };
    if gammas.len() != model.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: model.num_classes(),
            got: gammas.len(),
        });
    }
    let entries = gammas
        .iter()
        .zip(model.classes())
        .enumerate()
        .map(|(k, (&gamma, class))| PriceEntry {
            class_index: k + 1,
            throughput: class.throughput,
            gamma,
            price_per_mbyte: alpha * gamma,
        })
        .collect();
    Ok(PriceTable { mode, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassProfile, Validation};
    use crate::reneging::ExactOptions;
    use approx::assert_relative_eq;

    fn two_class(mu0: f64) -> CellModel {
        CellModel::new(
            &[
                ClassProfile::new(2.0, 2.0 / 3.0),
                ClassProfile::new(1.0, 1.0 / 3.0),
            ],
            1.0,
            3.0,
            mu0,
        )
        .unwrap()
    }

    fn fluid(m: &CellModel) -> FluidSolution {
        FluidSolution::solve(m).unwrap()
    }

    #[test]
    fn tariff_examples() {
        let m = two_class(0.5);
        let f = fluid(&m);
        let zero = build_tariff(&m, &f, 10.0, 0.0).unwrap();
        assert!(zero.prices_per_mbyte.iter().all(|&e| e == 0.0));

        let t = build_tariff(&m, &f, 10.0, 1.0).unwrap();
        assert_relative_eq!(t.prices_per_mbyte[0], 0.853_553_4, epsilon = 1e-7);
        assert_relative_eq!(t.prices_per_mbyte[1], 1.207_106_8, epsilon = 1e-7);

        let single = CellModel::new(&[ClassProfile::new(1.0, 1.0)], 1.0, 2.0, 0.5).unwrap();
        let t1 = build_tariff(&single, &fluid(&single), 10.0, 0.02).unwrap();
        assert_relative_eq!(t1.prices_per_mbyte[0], 0.02, epsilon = 1e-14);

        assert!(matches!(
            build_tariff(&m, &f, -1.0, 1.0),
            Err(Error::NegativeParameter {
                name: "flat_rate",
                ..
            })
        ));
        assert!(matches!(
            build_tariff(&m, &f, 1.0, -1.0),
            Err(Error::NegativeParameter { name: "alpha", .. })
        ));
    }

    #[test]
    fn bills() {
        let m = two_class(0.5);
        let t = build_tariff(&m, &fluid(&m), 10.0, 1.0).unwrap();
        assert_eq!(bill_session(&t, 0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(
            bill_session(&t, 1, 100.0).unwrap(),
            120.710_68,
            epsilon = 1e-5
        );
        assert!(bill_session(&t, 1, 50.0).unwrap() > bill_session(&t, 0, 50.0).unwrap());
        assert!(matches!(
            bill_session(&t, 2, 1.0),
            Err(Error::UnknownClass { .. })
        ));
        assert!(bill_session(&t, 0, -1.0).is_err());
    }

    #[test]
    fn rights() {
        let m = two_class(0.5);
        let f = fluid(&m);
        let free = RightsBudget::new(100.0, 0.0).unwrap();
        let (after, throttled) = consume_rights(&free, &f, 1, 1e6).unwrap();
        assert_eq!(after, free);
        assert!(!throttled);

        let b = RightsBudget::new(100.0, 1.0).unwrap();
        let (after, throttled) = consume_rights(&b, &f, 1, 50.0).unwrap();
        assert_relative_eq!(after.remaining, 39.644_66, epsilon = 1e-5);
        assert!(!throttled);

        let small = RightsBudget::new(10.0, 1.0).unwrap();
        let (after, throttled) = consume_rights(&small, &f, 1, 50.0).unwrap();
        assert_eq!(after.remaining, 0.0);
        assert!(throttled);
        assert!(consume_rights(&small, &f, 5, 1.0).is_err());
        assert!(RightsBudget::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn fluid_table_ignores_state() {
        let m = two_class(0.5);
        let f = fluid(&m);
        let sources = PriceSources {
            fluid: Some(&f),
            exact: None,
        };
        let a = price_table_notification(
            &m,
            1.0,
            NotificationMode::Fluid,
            &StateVector::new(vec![0, 0]),
            sources,
        )
        .unwrap();
        let b = price_table_notification(
            &m,
            1.0,
            NotificationMode::Fluid,
            &StateVector::new(vec![7, 3]),
            sources,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_relative_eq!(a.entries[0].gamma, 0.853_553_4, epsilon = 1e-7);
        assert_relative_eq!(a.entries[1].gamma, 1.207_106_8, epsilon = 1e-7);
        assert_eq!(a.entries[1].class_index, 2);
        let json = serde_json::to_value(&a).unwrap();
        let entry = &json["entries"][0];
        for key in ["class_index", "throughput", "gamma", "price_per_mbyte"] {
            assert!(entry.get(key).is_some(), "missing {key}");
        }
        assert!(price_table_notification(
            &m,
            1.0,
            NotificationMode::StateDependent,
            &StateVector::new(vec![0, 0]),
            sources
        )
        .is_err());
    }

    #[test]
    fn state_table_without_impatience_is_zero() {
        let m = CellModel::with_validation(
            &[ClassProfile::new(2.0, 0.5), ClassProfile::new(1.0, 0.5)],
            1.0,
            0.5,
            0.0,
            Validation::relaxed(),
        )
        .unwrap();
        let exact = ExactAnalysis::run(&m, &ExactOptions::default()).unwrap();
        let sources = PriceSources {
            fluid: None,
            exact: Some(&exact),
        };
        let t = price_table_notification(
            &m,
            3.0,
            NotificationMode::StateDependent,
            &StateVector::zeros(2),
            sources,
        )
        .unwrap();
        assert!(t
            .entries
            .iter()
            .all(|e| e.gamma == 0.0 && e.price_per_mbyte == 0.0));

        let top = exact.space().max_level() as u32;
        assert!(matches!(
            price_table_notification(
                &m,
                3.0,
                NotificationMode::StateDependent,
                &StateVector::new(vec![top, 0]),
                sources
            ),
            Err(Error::OutOfSpace { .. })
        ));
    }

    #[test]
    fn tariff_does_not_depend_on_impatience() {
        let reference = {
            let m = two_class(0.5);
            build_tariff(&m, &fluid(&m), 5.0, 2.0).unwrap()
        };
        for mu0 in [0.1, 0.25, 0.9] {
            let m = two_class(mu0);
            assert_eq!(build_tariff(&m, &fluid(&m), 5.0, 2.0).unwrap(), reference);
        }
    }
}
