//! Fluid approximation of an overloaded cell.
//!
//! In overload (`rho > 1`) the scaled occupancy settles where the global
//! impatience rate `S` solves
//!
//! ```text
//! sum_k lambda_k / (mu_k + S) = 1.
//! ```
//!
//! Class `k` then reneges with probability `S / (mu_k + S)`, the global
//! impatience rate `R = sum_k lambda_k P_k` equals `S`, and the QoE
//! perturbation of class `k` is the sensitivity
//!
//! ```text
//! Gamma_k = dS / dlambda_k = 1 / ((mu_k + S) * sum_j lambda_j / (mu_j + S)^2).
//! ```
//!
//! None of these involve `mu_0`.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::format::sig;
use crate::model::CellModel;

/// Target for `|sum_k lambda_k / (mu_k + S) - 1|`.
pub const FIXED_POINT_TOLERANCE: f64 = 1e-12;

fn balance(arrivals: &[f64], service: &[f64], s: f64) -> f64 {
    arrivals
        .iter()
        .zip(service)
        .map(|(l, m)| l / (m + s))
        .sum::<f64>()
        - 1.0
}

fn balance_slope(arrivals: &[f64], service: &[f64], s: f64) -> f64 {
    -arrivals
        .iter()
        .zip(service)
        .map(|(l, m)| l / ((m + s) * (m + s)))
        .sum::<f64>()
}

/// Positive root of `sum_k arrivals_k / (service_k + S) = 1`.
///
/// The left side decreases strictly in `S`, equals `rho` at `S = 0` and is
/// below 1 at `S = sum_k arrivals_k`, so bisection on that interval always
/// brackets the root; Newton steps then polish it.
pub fn fixed_point(arrivals: &[f64], service: &[f64]) -> Result<f64> {
    let rho: f64 = arrivals.iter().zip(service).map(|(l, m)| l / m).sum();
    if !(rho > 1.0) {
        return Err(Error::NotOverloaded { rho });
    }
    let (mut lo, mut hi) = (0.0_f64, arrivals.iter().sum::<f64>());
    for _ in 0..200 {
        if hi - lo <= 1e-3 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if balance(arrivals, service, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut s = 0.5 * (lo + hi);
    let mut best = (balance(arrivals, service, s).abs(), s);
    for _ in 0..100 {
        let f = balance(arrivals, service, s);
        if f.abs() < best.0 {
            best = (f.abs(), s);
        }
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let mut next = s - f / balance_slope(arrivals, service, s);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == s {
            break;
        }
        s = next;
    }
    let residual = best.0;
    if residual > FIXED_POINT_TOLERANCE {
        return Err(Error::Convergence {
            iterations: 300,
            residual,
        });
    }
    Ok(best.1)
}

/// `S` for the cell's class arrival and service rates.
pub fn solve_fixed_point(model: &CellModel) -> Result<f64> {
    fixed_point(model.class_arrival_rates(), model.service_rates())
}

/// `S / (mu_k + S)`.
pub fn fluid_reneging_prob(model: &CellModel, s: f64, k: usize) -> f64 {
    s / (model.service_rates()[k] + s)
}

/// `sum_j lambda_j S / (mu_j + S)`.
pub fn global_impatience_rate(model: &CellModel, s: f64) -> f64 {
    (0..model.num_classes())
        .map(|j| model.class_arrival_rates()[j] * fluid_reneging_prob(model, s, j))
        .sum()
}

/// `Gamma_k`, the sensitivity of `S` to `lambda_k`.
pub fn qoe_perturbation(model: &CellModel, s: f64, k: usize) -> f64 {
    perturbation_from_rates(model.class_arrival_rates(), model.service_rates(), s, k)
}

fn perturbation_from_rates(arrivals: &[f64], service: &[f64], s: f64, k: usize) -> f64 {
    1.0 / ((service[k] + s) * -balance_slope(arrivals, service, s))
}

/// Fluid equilibrium and the metrics derived from it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluidSolution {
    /// Global impatience rate `S` (flows per second).
    pub s: f64,
    /// `|sum_k lambda_k / (mu_k + S) - 1|` at the returned `S`.
    pub residual: f64,
    pub reneging_probabilities: Vec<f64>,
    /// `sum_k lambda_k P_k`; equals `S`.
    pub global_rate: f64,
    pub perturbations: Vec<f64>,
}

impl FluidSolution {
    pub fn solve(model: &CellModel) -> Result<Self> {
        let s = solve_fixed_point(model)?;
        let k = model.num_classes();
        Ok(Self {
            s,
            residual: balance(model.class_arrival_rates(), model.service_rates(), s).abs(),
            reneging_probabilities: (0..k).map(|j| fluid_reneging_prob(model, s, j)).collect(),
            global_rate: global_impatience_rate(model, s),
            perturbations: (0..k).map(|j| qoe_perturbation(model, s, j)).collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.perturbations.len()
    }
}

/// Analytic perturbation against a central difference of `S` in `lambda_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityCheck {
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

pub fn perturbation_sensitivity_check(
    model: &CellModel,
    k: usize,
    h: f64,
) -> Result<SensitivityCheck> {
    model.check_class(k)?;
    let service = model.service_rates();
    let mut arrivals = model.class_arrival_rates().to_vec();
    let base = arrivals[k];
    if h <= 0.0 || h > base {
        return Err(Error::NonPositiveParameter {
            name: "step",
            value: h,
        });
    }
    let analytic = perturbation_from_rates(&arrivals, service, fixed_point(&arrivals, service)?, k);
    arrivals[k] = base + h;
    let up = fixed_point(&arrivals, service)?;
    arrivals[k] = base - h;
    let down = fixed_point(&arrivals, service)?;
    let finite_difference = (up - down) / (2.0 * h);
    Ok(SensitivityCheck {
        analytic,
        finite_difference,
        relative_error: ((finite_difference - analytic) / analytic).abs(),
    })
}

/// One overloaded grid point of a load sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub arrival_rate: f64,
    pub load: f64,
    pub s: f64,
    pub reneging_probabilities: Vec<f64>,
    pub perturbations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepDiagnostics {
    /// At every row, a class with lower throughput has a strictly larger
    /// perturbation (ties allowed only between equal throughputs).
    pub ordering_preserved: bool,
    /// Per class, `(max - min) / max` of the perturbation over the rows.
    pub relative_variation: Vec<f64>,
    /// Whether the cell-edge perturbation is non-increasing along the grid.
    pub edge_impact_shrinks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Grid points that were not overloaded, with their load.
    pub skipped: Vec<(f64, f64)>,
    pub diagnostics: SweepDiagnostics,
}

/// Fluid metrics along a grid of total arrival rates, everything else
/// taken from `template`.
pub fn load_sweep(template: &CellModel, arrival_rates: &[f64]) -> Result<SweepTable> {
    if arrival_rates.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let outcomes: Vec<Result<std::result::Result<SweepRow, (f64, f64)>>> = arrival_rates
        .par_iter()
        .map(|&lambda| {
            let model = template.with_arrival_rate(lambda)?;
            match FluidSolution::solve(&model) {
                Ok(sol) => Ok(Ok(SweepRow {
                    arrival_rate: lambda,
                    load: model.load(),
                    s: sol.s,
                    reneging_probabilities: sol.reneging_probabilities,
                    perturbations: sol.perturbations,
                })),
                Err(Error::NotOverloaded { rho }) => Ok(Err((lambda, rho))),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome? {
            Ok(row) => rows.push(row),
            Err(point) => skipped.push(point),
        }
    }
    let diagnostics = diagnose(template.service_rates(), &rows);
    Ok(SweepTable {
        rows,
        skipped,
        diagnostics,
    })
}

fn diagnose(service: &[f64], rows: &[SweepRow]) -> SweepDiagnostics {
    let k = service.len();
    let ordering_preserved = rows.iter().all(|row| {
        (0..k).all(|i| {
            (i + 1..k).all(|j| {
                let (gi, gj) = (row.perturbations[i], row.perturbations[j]);
                if service[i] > service[j] {
                    gi < gj
                } else {
                    gi <= gj
                }
            })
        })
    });
    let relative_variation = (0..k)
        .map(|c| {
            let (min, max) = rows
                .iter()
                .map(|r| r.perturbations[c])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), g| {
                    (lo.min(g), hi.max(g))
                });
            if rows.is_empty() {
                0.0
            } else {
                (max - min) / max
            }
        })
        .collect();
    let edge_impact_shrinks = rows
        .windows(2)
        .all(|w| w[1].perturbations[k - 1] <= w[0].perturbations[k - 1]);
    SweepDiagnostics {
        ordering_preserved,
        relative_variation,
        edge_impact_shrinks,
    }
}

/// Wide table: `lambda,S,P_tilde_1..K,Gamma_tilde_1..K`.
pub fn write_sweep_csv<W: Write>(mut out: W, table: &SweepTable, classes: usize) -> io::Result<()> {
    let mut header = vec!["lambda".to_string(), "S".to_string()];
    header.extend((1..=classes).map(|k| format!("P_tilde_{k}")));
    header.extend((1..=classes).map(|k| format!("Gamma_tilde_{k}")));
    writeln!(out, "{}", header.join(","))?;
    for row in &table.rows {
        let mut cells = vec![sig(row.arrival_rate), sig(row.s)];
        cells.extend(row.reneging_probabilities.iter().map(|&x| sig(x)));
        cells.extend(row.perturbations.iter().map(|&x| sig(x)));
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Long table for plotting: `lambda,class_index,gamma_tilde,p_tilde,S`, one
/// row per grid point and class (classes numbered from 1).
pub fn emit_sweep_plotdata<W: Write>(mut out: W, table: &SweepTable) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let io_err = |e: io::Error| Error::Config(format!("write failed: {e}"));
    writeln!(out, "lambda,class_index,gamma_tilde,p_tilde,S").map_err(io_err)?;
    for row in &table.rows {
        for (k, (g, p)) in row
            .perturbations
            .iter()
            .zip(&row.reneging_probabilities)
            .enumerate()
        {
            writeln!(
                out,
                "{},{},{},{},{}",
                sig(row.arrival_rate),
                k + 1,
                sig(*g),
                sig(*p),
                sig(row.s)
            )
            .map_err(io_err)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClassProfile;
    use approx::assert_relative_eq;

    fn single(lambda: f64) -> CellModel {
        CellModel::new(&[ClassProfile::new(1.0, 1.0)], 1.0, lambda, 0.5).unwrap()
    }

    fn two_class() -> CellModel {
        CellModel::new(
            &[
                ClassProfile::new(2.0, 2.0 / 3.0),
                ClassProfile::new(1.0, 1.0 / 3.0),
            ],
            1.0,
            3.0,
            0.5,
        )
        .unwrap()
    }

    /// Positive root of the two-class quadratic
    /// `S^2 + S (m1 + m2 - l1 - l2) + (m1 m2 - l1 m2 - l2 m1) = 0`.
    fn quadratic_root(l1: f64, l2: f64, m1: f64, m2: f64) -> f64 {
        let b = m1 + m2 - l1 - l2;
        let c = m1 * m2 - l1 * m2 - l2 * m1;
        (-b + (b * b - 4.0 * c).sqrt()) / 2.0
    }

    #[test]
    fn single_class_is_linear() {
        let m = single(2.0);
        let s = solve_fixed_point(&m).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        assert_relative_eq!(fluid_reneging_prob(&m, s, 0), 0.5, epsilon = 1e-12);
        assert_relative_eq!(qoe_perturbation(&m, s, 0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(global_impatience_rate(&m, s), s, epsilon = 1e-12);
    }

    #[test]
    fn two_class_reference() {
        let m = two_class();
        let oracle = quadratic_root(2.0, 1.0, 2.0, 1.0);
        assert_relative_eq!(oracle, std::f64::consts::SQRT_2, epsilon = 1e-14);
        let sol = FluidSolution::solve(&m).unwrap();
        assert!((sol.s - oracle).abs() <= 1e-10);
        assert!(sol.residual <= FIXED_POINT_TOLERANCE);
        assert_relative_eq!(sol.reneging_probabilities[0], 0.414_213_6, epsilon = 1e-7);
        assert_relative_eq!(sol.reneging_probabilities[1], 0.585_786_4, epsilon = 1e-7);
        assert!((sol.global_rate - sol.s).abs() <= 1e-12);

        // Central difference of the closed-form root.
        let h = 1e-6;
        let d1 = (quadratic_root(2.0 + h, 1.0, 2.0, 1.0) - quadratic_root(2.0 - h, 1.0, 2.0, 1.0))
            / (2.0 * h);
        let d2 = (quadratic_root(2.0, 1.0 + h, 2.0, 1.0) - quadratic_root(2.0, 1.0 - h, 2.0, 1.0))
            / (2.0 * h);
        assert_relative_eq!(sol.perturbations[0], d1, max_relative = 1e-6);
        assert_relative_eq!(sol.perturbations[1], d2, max_relative = 1e-6);
        assert_relative_eq!(sol.perturbations[0], 0.853_553_4, epsilon = 1e-7);
        assert_relative_eq!(sol.perturbations[1], 1.207_106_8, epsilon = 1e-7);
    }

    #[test]
    fn underload_is_rejected() {
        assert!(matches!(
            solve_fixed_point(&single(0.5)),
            Err(Error::NotOverloaded { rho }) if rho == 0.5
        ));
    }

    #[test]
    fn impatience_rate_does_not_enter() {
        let base = two_class();
        let reference = FluidSolution::solve(&base).unwrap();
        for factor in [0.1, 0.5, 0.999] {
            let m = base.with_impatience_rate(factor * 1.0).unwrap();
            assert_eq!(FluidSolution::solve(&m).unwrap(), reference);
        }
    }

    #[test]
    fn sensitivity_checks() {
        let c = perturbation_sensitivity_check(&single(2.0), 0, 1e-6).unwrap();
        assert!(c.relative_error <= 1e-6);
        for k in 0..2 {
            let c = perturbation_sensitivity_check(&two_class(), k, 1e-6).unwrap();
            assert!(c.relative_error <= 1e-5, "{c:?}");
        }
        // Second order: shrinking h by 100 shrinks the error by ~1e4.
        let coarse = perturbation_sensitivity_check(&two_class(), 1, 1e-2).unwrap();
        let fine = perturbation_sensitivity_check(&two_class(), 1, 1e-4).unwrap();
        let ratio = coarse.relative_error / fine.relative_error;
        assert!(ratio > 3e3 && ratio < 3e4, "ratio {ratio}");

        // Step that pushes the cell out of overload.
        let near = single(1.05);
        assert!(matches!(
            perturbation_sensitivity_check(&near, 0, 0.1),
            Err(Error::NotOverloaded { .. })
        ));
    }

    #[test]
    fn single_class_sweep_is_flat_at_one() {
        let t = load_sweep(&single(2.0), &[1.5, 2.0, 4.0]).unwrap();
        assert_eq!(t.rows.len(), 3);
        for row in &t.rows {
            assert_relative_eq!(row.perturbations[0], 1.0, epsilon = 1e-12);
        }
        let mut buf = Vec::new();
        emit_sweep_plotdata(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "lambda,class_index,gamma_tilde,p_tilde,S");
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split(',').nth(2) == Some("1")));
    }

    #[test]
    fn sweep_skips_underloaded_points() {
        let t = load_sweep(&two_class(), &[1.0, 3.0, 6.0]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.skipped.len(), 1);
        assert!(t.diagnostics.ordering_preserved);
        assert!(matches!(
            load_sweep(&two_class(), &[]),
            Err(Error::EmptyGrid)
        ));
        let empty = load_sweep(&two_class(), &[0.5]).unwrap();
        assert!(matches!(
            emit_sweep_plotdata(Vec::new(), &empty),
            Err(Error::EmptyGrid)
        ));
    }

    #[test]
    fn wide_csv_header() {
        let t = load_sweep(&two_class(), &[3.0]).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &t, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "lambda,S,P_tilde_1,P_tilde_2,Gamma_tilde_1,Gamma_tilde_2"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("3,1.41421356,"));
    }
}
