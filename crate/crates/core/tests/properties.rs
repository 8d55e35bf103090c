use proptest::prelude::*;
use statrs::distribution::{Discrete, Poisson};

use reneging_lab::ctmc;
use reneging_lab::fluid::{self, FluidSolution};
use reneging_lab::model::Validation;
use reneging_lab::pricing::{self, RightsBudget};
use reneging_lab::reneging::{ExactAnalysis, ExactOptions};
use reneging_lab::sim::{self, SimConfig};
use reneging_lab::statespace::{enumerate_level, TruncatedSpace};
use reneging_lab::{CellModel, ClassProfile, StateVector};

fn reference(mu0: f64) -> CellModel {
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

/// Classes with decreasing throughputs and normalized weights.
fn classes_strategy() -> impl Strategy<Value = Vec<ClassProfile>> {
    (1usize..=5)
        .prop_flat_map(|k| {
            (
                prop::collection::vec(0.2f64..0.95, k),
                prop::collection::vec(0.05f64..1.0, k),
                1.0f64..30.0,
            )
        })
        .prop_map(|(ratios, raw, top)| {
            let total: f64 = raw.iter().sum();
            let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let k = weights.len();
            let head: f64 = weights[..k - 1].iter().sum();
            weights[k - 1] = 1.0 - head;
            let mut c = top;
            weights
                .into_iter()
                .zip(ratios)
                .map(|(w, r)| {
                    let p = ClassProfile::new(c, w);
                    c *= r;
                    p
                })
                .collect()
        })
}

/// Overloaded model with load in `[1.05, 20]`.
fn overloaded_strategy() -> impl Strategy<Value = CellModel> {
    (
        classes_strategy(),
        0.2f64..5.0,
        1.05f64..20.0,
        0.01f64..0.99,
    )
        .prop_map(|(classes, vol, rho, f)| {
            let per_unit: f64 = classes.iter().map(|c| c.weight * vol / c.throughput).sum();
            let edge = classes.last().unwrap().throughput / vol;
            CellModel::new(&classes, vol, rho / per_unit, f * edge).unwrap()
        })
}

fn balance(arrivals: &[f64], service: &[f64], s: f64) -> f64 {
    arrivals
        .iter()
        .zip(service)
        .map(|(l, m)| l / (m + s))
        .sum::<f64>()
        - 1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derived_rates_sum(m in overloaded_strategy()) {
        let total: f64 = m.class_arrival_rates().iter().sum();
        prop_assert!((total - m.arrival_rate()).abs() <= 1e-12 * m.arrival_rate().max(1.0));
        prop_assert!((m.weights().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fluid_identities(m in overloaded_strategy()) {
        let f = FluidSolution::solve(&m).unwrap();
        prop_assert!(balance(m.class_arrival_rates(), m.service_rates(), f.s).abs() <= 1e-12);
        prop_assert!((f.global_rate - f.s).abs() <= 1e-12 * f.s.max(1.0));
        prop_assert!(f.s > 0.0 && f.s < m.arrival_rate());
        for k in 0..m.num_classes() {
            prop_assert!(f.reneging_probabilities[k] > 0.0 && f.reneging_probabilities[k] < 1.0);
        }
        // Lower throughput, larger perturbation.
        for w in f.perturbations.windows(2) {
            prop_assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn fluid_gradient_and_chain_rule(m in overloaded_strategy()) {
        let f = FluidSolution::solve(&m).unwrap();
        let lambdas = m.class_arrival_rates();
        for k in 0..m.num_classes() {
            let h = 1e-5 * lambdas[k];
            let mut up = lambdas.to_vec();
            let mut down = lambdas.to_vec();
            up[k] += h;
            down[k] -= h;
            let fd = (fluid::fixed_point(&up, m.service_rates()).unwrap()
                - fluid::fixed_point(&down, m.service_rates()).unwrap())
                / (2.0 * h);
            prop_assert!((f.perturbations[k] - fd).abs() <= 1e-5 * fd.abs());
        }
        let lambda = m.arrival_rate();
        let h = 1e-5 * lambda;
        let s_up = FluidSolution::solve(&m.with_arrival_rate(lambda + h).unwrap()).unwrap().s;
        let s_down = FluidSolution::solve(&m.with_arrival_rate(lambda - h).unwrap()).unwrap().s;
        let fd = (s_up - s_down) / (2.0 * h);
        let chain: f64 = m.weights().zip(&f.perturbations).map(|(p, g)| p * g).sum();
        prop_assert!((chain - fd).abs() <= 1e-5 * fd.abs());
    }

    #[test]
    fn fluid_ignores_impatience(m in overloaded_strategy(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let edge = *m.service_rates().last().unwrap();
        let x = FluidSolution::solve(&m.with_impatience_rate(a * edge).unwrap()).unwrap();
        let y = FluidSolution::solve(&m.with_impatience_rate(b * edge).unwrap()).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn bills_monotone(m in overloaded_strategy(), alpha in 0.0f64..10.0, v1 in 0.0f64..1e3, v2 in 0.0f64..1e3) {
        let f = FluidSolution::solve(&m).unwrap();
        let t = pricing::build_tariff(&m, &f, 1.0, alpha).unwrap();
        let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
        for k in 0..m.num_classes() {
            prop_assert!(pricing::bill_session(&t, k, lo).unwrap() <= pricing::bill_session(&t, k, hi).unwrap());
        }
        for k in 1..m.num_classes() {
            prop_assert!(pricing::bill_session(&t, k, lo).unwrap() >= pricing::bill_session(&t, k - 1, lo).unwrap());
        }
    }

    #[test]
    fn rights_never_negative(
        m in overloaded_strategy(),
        budget in 0.0f64..100.0,
        beta in 0.0f64..3.0,
        volumes in prop::collection::vec(0.0f64..50.0, 1..20),
    ) {
        let f = FluidSolution::solve(&m).unwrap();
        let mut b = RightsBudget::new(budget, beta).unwrap();
        for (i, v) in volumes.iter().enumerate() {
            let (next, throttled) = pricing::consume_rights(&b, &f, i % m.num_classes(), *v).unwrap();
            prop_assert!(next.remaining >= 0.0);
            prop_assert!(next.remaining <= b.remaining);
            prop_assert_eq!(throttled, next.remaining == 0.0);
            b = next;
        }
    }
}

fn stable(classes: &[ClassProfile], lambda: f64) -> CellModel {
    CellModel::with_validation(classes, 1.0, lambda, 0.0, Validation::relaxed()).unwrap()
}

fn stable_models() -> Vec<CellModel> {
    vec![
        stable(&[ClassProfile::new(1.0, 1.0)], 0.6),
        stable(
            &[ClassProfile::new(2.0, 0.5), ClassProfile::new(1.0, 0.5)],
            0.8,
        ),
        stable(
            &[
                ClassProfile::new(3.0, 0.2),
                ClassProfile::new(2.0, 0.3),
                ClassProfile::new(1.0, 0.5),
            ],
            1.0,
        ),
    ]
}

#[test]
fn product_form_sums_to_one() {
    for m in stable_models() {
        let rho = m.load();
        let mut n = 0;
        while rho.powi(n as i32) / (1.0 - rho) >= 1e-10 {
            n += 1;
        }
        let total: f64 = (0..=n)
            .flat_map(|l| enumerate_level(l, m.num_classes()))
            .map(|s| m.product_form_probability(&s).unwrap())
            .sum();
        assert!((total - 1.0).abs() <= 1e-8, "{total}");
    }
}

#[test]
fn product_form_level_marginal_is_geometric() {
    for m in stable_models() {
        let rho = m.load();
        for level in 0..=30 {
            let mass: f64 = enumerate_level(level, m.num_classes())
                .iter()
                .map(|s| m.product_form_probability(s).unwrap())
                .sum();
            let geometric = (1.0 - rho) * rho.powi(level as i32);
            assert!(
                (mass - geometric).abs() <= 1e-12 * geometric.max(1e-300) + 1e-15,
                "{level}"
            );
        }
    }
}

#[test]
fn chain_without_impatience_has_product_form() {
    for m in stable_models() {
        let a = ExactAnalysis::run(&m, &ExactOptions::default()).unwrap();
        let mut worst: f64 = 0.0;
        for (i, s) in a.space().states().enumerate() {
            let exact = m.product_form_probability(&s).unwrap();
            worst = worst.max((a.stationary().get(i) - exact).abs());
        }
        assert!(worst <= 1e-8, "{worst}");
    }
}

#[test]
fn single_class_is_birth_death() {
    let (lambda, mu, mu0) = (2.0, 1.0, 0.5);
    let m = CellModel::new(&[ClassProfile::new(mu, 1.0)], 1.0, lambda, mu0).unwrap();
    let a = ExactAnalysis::run(&m, &ExactOptions::default()).unwrap();
    let mut w = vec![1.0f64];
    for n in 1..300 {
        let prev = w[n - 1];
        w.push(prev * lambda / (mu + n as f64 * mu0));
    }
    let z: f64 = w.iter().sum();
    for (n, p) in a.stationary().probabilities().iter().enumerate() {
        assert!((p - w[n] / z).abs() <= 1e-9, "{n}");
    }
}

#[test]
fn population_dominated_by_infinite_server_bound() {
    // Every flow leaves at rate at least mu_0, so E|n| <= lambda / mu_0, and
    // the bound is the Poisson mean of the M/M/inf coupling.
    for m in [reference(0.5), reference(0.2), reference(0.9)] {
        let a = ExactAnalysis::run(&m, &ExactOptions::default()).unwrap();
        let mean: f64 = a.mean_population().iter().sum();
        let bound = m.arrival_rate() / m.impatience_rate();
        assert!(mean <= bound + 1e-8, "{mean} > {bound}");
        let poisson = Poisson::new(bound).unwrap();
        let top = a.space().max_level() as u64;
        assert!(poisson.pmf(top) < 1e-6);
    }
}

#[test]
fn overloaded_chain_converges() {
    let m = reference(0.5);
    assert!((m.load() - 2.0).abs() < 1e-12);
    let a = ExactAnalysis::run(&m, &ExactOptions::default()).unwrap();
    assert!(a.stationary().residual() <= 1e-10);
}

#[test]
fn departures_balance_admitted_arrivals() {
    for m in [
        reference(0.5),
        CellModel::new(&[ClassProfile::new(1.0, 1.0)], 1.0, 2.0, 0.5).unwrap(),
    ] {
        let a = ExactAnalysis::run(&m, &ExactOptions::default()).unwrap();
        let space = a.space();
        let out = ctmc::departure_throughput(&m, a.stationary(), space);
        let blocked = a.stationary().level_mass(space, space.max_level());
        let admitted = m.arrival_rate() * (1.0 - blocked);
        assert!((out - admitted).abs() <= 1e-6, "{out} vs {admitted}");
    }
}

#[test]
fn truncation_insensitivity() {
    let m = reference(0.5);
    let opts = ExactOptions::default();
    let a = ExactAnalysis::run(&m, &opts).unwrap();
    let bigger = TruncatedSpace::new(2, a.space().max_level() + 5).unwrap();
    let b = ExactAnalysis::on_fixed_space(&m, bigger, a.certified_level(), &opts).unwrap();
    for (x, y) in a.mean_population().iter().zip(b.mean_population()) {
        assert!((x - y).abs() < 1e-6);
    }
    for (x, y) in a
        .reneging_probabilities()
        .iter()
        .zip(b.reneging_probabilities())
    {
        assert!((x.value - y.value).abs() < 1e-6);
    }
    for k in 0..2 {
        let x = a.perturbation_mean(k).unwrap().value;
        let y = b.perturbation_mean(k).unwrap().value;
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn exact_approaches_fluid_under_heavy_load() {
    // rho = 2 and lambda / mu_0 = 60.
    let m = reference(0.05);
    let a = ExactAnalysis::run(&m, &ExactOptions::default()).unwrap();
    let f = FluidSolution::solve(&m).unwrap();
    for (p, pt) in a
        .reneging_probabilities()
        .iter()
        .zip(&f.reneging_probabilities)
    {
        assert!((p.value - pt).abs() <= 0.10 * pt, "{} vs {}", p.value, pt);
    }
}

#[test]
fn simulated_reneging_rate_matches_population() {
    let m = reference(0.5);
    let cfg = SimConfig::new(5, SimConfig::default_warmup(&m), 2_000.0, 20);
    let est = sim::replicate(&m, &cfg).unwrap();
    let rate = est.reneging_rate;
    let pop = est.mean_total_population;
    let slack =
        3.0 * (rate.standard_error.unwrap() + m.impatience_rate() * pop.standard_error.unwrap());
    assert!((rate.mean - m.impatience_rate() * pop.mean).abs() <= slack);
    assert!(est.flow_conserved);
}

#[test]
fn perturbation_state_matches_bracket_differences() {
    let m = reference(0.5);
    let a = ExactAnalysis::run(&m, &ExactOptions::default()).unwrap();
    let n = StateVector::new(vec![2, 1]);
    for k in 0..2 {
        let g = a.perturbation_state(&n, k).unwrap();
        assert!(g.lower <= g.value && g.value <= g.upper);
        assert!(g.upper - g.lower < 1e-5);
    }
}
