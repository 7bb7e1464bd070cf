//! VCG allocation and payments.
//!
//! The allocation minimizes the reported social cost. EV `n` pays the energy
//! cost of its own profile plus the change it causes in the reported costs
//! (EV cost and energy) of everybody else:
//!
//! ```text
//! m_n = e_n(x̃) + Σ_{j≠n} [c_j(x̃_j) + e_j(x̃_j) − c_j(x_j⁻ⁿ) − e_j(x_j⁻ⁿ)]
//! ```
//!
//! where `x⁻ⁿ` is the optimum with EV `n` removed. Utilities are
//! quasi-linear, `−c_n(true type) − m_n`.

use serde::{Deserialize, Serialize};

use crate::admm::ScheduleSolution;
use crate::error::{InputError, SolveError};
use crate::model::{self, Allocation, Ev, EvType, StationScenario};
use crate::solver::Solver;

/// Slack used for the individual-rationality flags.
pub const IR_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismOutcome {
    pub allocations: Vec<Allocation>,
    /// Positive means the EV pays the station.
    pub payments: Vec<f64>,
    pub utilities: Vec<f64>,
    pub outside_options: Vec<f64>,
    pub ir_satisfied: Vec<bool>,
    /// Payments collected minus energy bought for the fleet.
    pub station_budget: f64,
    /// Social cost of the allocation under the reported types.
    pub reported_social_cost: f64,
}

/// Utility of not connecting at all: leave on time with the initial charge.
pub fn outside_option_utility(ev: &Ev) -> f64 {
    -model::shortfall_cost(&ev.ty, ev.params.initial_soc)
}

fn warn_if_approximate(solver: &Solver) {
    if !solver.is_exact() {
        log::warn!(
            "VCG computed with the {} solver: welfare is only approximately maximized, \
             so truthfulness and individual rationality are not guaranteed",
            solver.name()
        );
    }
}

/// Allocation chosen for the reported types.
pub fn vcg_allocation(
    scenario: &StationScenario,
    reports: &[EvType],
    solver: &Solver,
) -> Result<ScheduleSolution, SolveError> {
    let reported = scenario.with_types(reports)?;
    solver.schedule(&reported)
}

/// Reported cost (EV cost plus energy) of every EV under `allocations`.
fn reported_costs(
    scenario: &StationScenario,
    allocations: &[Allocation],
) -> Result<Vec<f64>, InputError> {
    let dt = scenario.interval_hours;
    scenario
        .fleet
        .iter()
        .zip(allocations)
        .map(|(ev, a)| {
            Ok(model::ev_cost(ev, a, dt)? + model::energy_cost(&scenario.prices, &a.power_profile, dt)?)
        })
        .collect()
}

/// Optimal reported social cost without EV `n`; zero for an empty station.
fn leave_one_out_cost(reported: &StationScenario, n: usize, solver: &Solver) -> Result<f64, SolveError> {
    if reported.fleet.len() == 1 {
        return Ok(0.0);
    }
    let without = reported.without_ev(n);
    let sol = solver
        .schedule(&without)
        .map_err(|e| e.context(format!("leave-one-out solve without EV {n}")))?;
    Ok(sol.social_cost)
}

fn payment(
    reported: &StationScenario,
    allocations: &[Allocation],
    costs: &[f64],
    n: usize,
    without_n: f64,
) -> Result<f64, InputError> {
    let own_energy = model::energy_cost(
        &reported.prices,
        &allocations[n].power_profile,
        reported.interval_hours,
    )?;
    let others: f64 = costs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != n)
        .map(|(_, c)| c)
        .sum();
    Ok(own_energy + others - without_n)
}

fn check_index(scenario: &StationScenario, n: usize) -> Result<(), InputError> {
    if n >= scenario.fleet.len() {
        return Err(InputError::OutOfRange {
            what: "ev index",
            index: n,
            len: scenario.fleet.len(),
        });
    }
    Ok(())
}

/// VCG payment of EV `n`.
pub fn vcg_payment(
    scenario: &StationScenario,
    reports: &[EvType],
    n: usize,
    solver: &Solver,
) -> Result<f64, SolveError> {
    check_index(scenario, n)?;
    warn_if_approximate(solver);
    let reported = scenario.with_types(reports)?;
    let sol = solver.schedule(&reported)?;
    let costs = reported_costs(&reported, &sol.allocations)?;
    let without_n = leave_one_out_cost(&reported, n, solver)?;
    Ok(payment(&reported, &sol.allocations, &costs, n, without_n)?)
}

/// Full mechanism: one solve for the allocation and one per EV for the
/// payments.
pub fn run_vcg(
    scenario: &StationScenario,
    reports: &[EvType],
    solver: &Solver,
) -> Result<MechanismOutcome, SolveError> {
    warn_if_approximate(solver);
    let reported = scenario.with_types(reports)?;
    let sol = solver
        .schedule(&reported)
        .map_err(|e| e.context("VCG allocation"))?;
    let costs = reported_costs(&reported, &sol.allocations)?;
    let dt = scenario.interval_hours;

    let mut payments = Vec::with_capacity(scenario.fleet.len());
    let mut utilities = Vec::with_capacity(scenario.fleet.len());
    let mut outside_options = Vec::with_capacity(scenario.fleet.len());
    let mut energy_total = 0.0;
    for (n, ev) in scenario.fleet.iter().enumerate() {
        let without_n = leave_one_out_cost(&reported, n, solver)?;
        let m = payment(&reported, &sol.allocations, &costs, n, without_n)?;
        let a = &sol.allocations[n];
        energy_total += model::energy_cost(&scenario.prices, &a.power_profile, dt)?;
        utilities.push(-model::ev_cost(ev, a, dt)? - m);
        outside_options.push(outside_option_utility(ev));
        payments.push(m);
    }
    let ir_satisfied = utilities
        .iter()
        .zip(&outside_options)
        .map(|(u, o)| *u >= o - IR_TOL)
        .collect();
    Ok(MechanismOutcome {
        station_budget: payments.iter().sum::<f64>() - energy_total,
        reported_social_cost: sol.social_cost,
        allocations: sol.allocations,
        payments,
        utilities,
        outside_options,
        ir_satisfied,
    })
}

/// What the EV is charged in a misreport study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaymentRule {
    Vcg,
    /// No payment at all; the station absorbs the energy cost.
    None,
    /// The EV pays the market price of its own energy.
    EnergyAtCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisreportPoint {
    pub report: EvType,
    pub allocation: Allocation,
    pub payment: f64,
    /// True-type utility under the allocation induced by `report`.
    pub utility: f64,
}

/// Default report grid: desired time shifted by {−4, −2, 0, 2, 4} steps
/// (clipped to the horizon) times α scaled by {1/4, 1/2, 1, 2, 4}.
/// Duplicates from clipping are dropped.
pub fn default_report_grid(truth: &EvType, horizon: usize) -> Vec<EvType> {
    let mut grid: Vec<EvType> = Vec::with_capacity(25);
    for shift in [-4isize, -2, 0, 2, 4] {
        let tau = truth
            .desired_disconnect
            .saturating_add_signed(shift)
            .min(horizon);
        for scale in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let report = EvType {
                desired_disconnect: tau,
                temporal_inflexibility: truth.temporal_inflexibility * scale,
                ..truth.clone()
            };
            if !grid.contains(&report) {
                grid.push(report);
            }
        }
    }
    grid
}

/// Utility of EV `n` for each report in `grid`, the others reporting
/// truthfully.
pub fn misreport_sweep(
    scenario: &StationScenario,
    n: usize,
    grid: &[EvType],
    rule: PaymentRule,
    solver: &Solver,
) -> Result<Vec<MisreportPoint>, SolveError> {
    check_index(scenario, n)?;
    if grid.is_empty() {
        return Err(InputError::invalid("report_grid", "must be nonempty").into());
    }
    if rule == PaymentRule::Vcg {
        warn_if_approximate(solver);
    }
    let truth = &scenario.fleet[n];
    let dt = scenario.interval_hours;
    // Removing EV n makes its report irrelevant, so this is shared by the grid.
    let without_n = match rule {
        PaymentRule::Vcg => leave_one_out_cost(scenario, n, solver)?,
        _ => 0.0,
    };
    grid.iter()
        .map(|report| {
            let mut reported = scenario.clone();
            reported.fleet[n].ty = report.clone();
            reported.validate()?;
            let sol = solver
                .schedule(&reported)
                .map_err(|e| e.context(format!("misreport {report:?}")))?;
            let a = &sol.allocations[n];
            let energy = model::energy_cost(&scenario.prices, &a.power_profile, dt)?;
            let payment = match rule {
                PaymentRule::Vcg => {
                    let costs = reported_costs(&reported, &sol.allocations)?;
                    payment(&reported, &sol.allocations, &costs, n, without_n)?
                }
                PaymentRule::None => 0.0,
                PaymentRule::EnergyAtCost => energy,
            };
            Ok(MisreportPoint {
                report: report.clone(),
                utility: -model::ev_cost(truth, a, dt)? - payment,
                allocation: a.clone(),
                payment,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::ExactConfig;
    use crate::model::tests::leaf;
    use approx::assert_abs_diff_eq;

    fn station(fleet: Vec<Ev>, prices: Vec<f64>, bus: f64) -> StationScenario {
        StationScenario {
            horizon: prices.len(),
            interval_hours: 0.5,
            prices,
            bus_capacity: bus,
            fleet,
        }
    }

    #[test]
    fn outside_option_examples() {
        let mut ev = leaf(10.0, 10.0, 2);
        assert_eq!(outside_option_utility(&ev), 0.0);
        ev.ty.desired_soc = 12.0;
        assert_abs_diff_eq!(outside_option_utility(&ev), -40.0, epsilon = 1e-12);
        ev.ty.soc_inflexibility = 0.0;
        assert_eq!(outside_option_utility(&ev), 0.0);
    }

    #[test]
    fn single_ev_pays_its_energy() {
        let sc = station(vec![leaf(10.0, 16.0, 4)], vec![0.2, 0.1, 0.3, 0.15, 0.2, 0.2], 20.0);
        let out = run_vcg(&sc, &sc.types(), &Solver::exact()).unwrap();
        let e = model::energy_cost(&sc.prices, &out.allocations[0].power_profile, 0.5).unwrap();
        assert_abs_diff_eq!(out.payments[0], e, epsilon = 1e-12);
        assert_abs_diff_eq!(out.station_budget, 0.0, epsilon = 1e-12);
        let c = model::ev_cost(&sc.fleet[0], &out.allocations[0], 0.5).unwrap();
        assert_abs_diff_eq!(out.utilities[0], -c - e, epsilon = 1e-12);
    }

    #[test]
    fn two_ev_payments_match_hand_externality() {
        let sc = station(
            vec![leaf(5.0, 20.0, 4), leaf(5.0, 20.0, 4)],
            vec![0.2, 0.15, 0.18, 0.22, 0.2, 0.19],
            6.6,
        );
        let solver = Solver::exact();
        let out = run_vcg(&sc, &sc.types(), &solver).unwrap();
        for n in 0..2 {
            let other = 1 - n;
            let alone = solver.schedule(&sc.without_ev(n)).unwrap();
            let a = &out.allocations;
            let e = |k: usize| model::energy_cost(&sc.prices, &a[k].power_profile, 0.5).unwrap();
            let c = |k: usize| model::ev_cost(&sc.fleet[k], &a[k], 0.5).unwrap();
            let expect = e(n) + c(other) + e(other) - alone.social_cost;
            assert_abs_diff_eq!(out.payments[n], expect, epsilon = 1e-9);
            assert_abs_diff_eq!(
                vcg_payment(&sc, &sc.types(), n, &solver).unwrap(),
                out.payments[n],
                epsilon = 1e-9
            );
        }
        assert!(out.ir_satisfied.iter().all(|&ok| ok));
    }

    #[test]
    fn truthful_allocation_equals_plain_schedule() {
        let sc = station(vec![leaf(5.0, 20.0, 3), leaf(8.0, 18.0, 5)], vec![0.2; 6], 6.6);
        let solver = Solver::exact();
        let a = vcg_allocation(&sc, &sc.types(), &solver).unwrap();
        let b = solver.schedule(&sc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn very_inflexible_report_is_served_on_time() {
        let sc = station(vec![leaf(5.0, 25.0, 3), leaf(5.0, 25.0, 3)], vec![0.2; 6], 6.6);
        let mut reports = sc.types();
        reports[0].temporal_inflexibility = 1e6;
        let sol = vcg_allocation(&sc, &reports, &Solver::exact()).unwrap();
        assert_eq!(sol.allocations[0].disconnect_time, 3);
    }

    #[test]
    fn permuting_the_fleet_permutes_the_outcome() {
        let sc = station(vec![leaf(5.0, 20.0, 3), leaf(12.0, 18.0, 5)], vec![0.2, 0.1, 0.3, 0.2, 0.2, 0.2], 6.6);
        let mut swapped = sc.clone();
        swapped.fleet.swap(0, 1);
        let solver = Solver::exact();
        let a = run_vcg(&sc, &sc.types(), &solver).unwrap();
        let b = run_vcg(&swapped, &swapped.types(), &solver).unwrap();
        assert_abs_diff_eq!(a.payments[0], b.payments[1], epsilon = 1e-7);
        assert_abs_diff_eq!(a.payments[1], b.payments[0], epsilon = 1e-7);
        assert_eq!(a.allocations[0].disconnect_time, b.allocations[1].disconnect_time);
    }

    #[test]
    fn truth_only_grid_reproduces_run_vcg() {
        let sc = station(vec![leaf(5.0, 20.0, 3), leaf(8.0, 18.0, 5)], vec![0.2, 0.1, 0.3, 0.2, 0.2, 0.2], 6.6);
        let solver = Solver::exact();
        let out = run_vcg(&sc, &sc.types(), &solver).unwrap();
        let pts = misreport_sweep(&sc, 1, &[sc.fleet[1].ty.clone()], PaymentRule::Vcg, &solver).unwrap();
        assert_eq!(pts.len(), 1);
        assert_abs_diff_eq!(pts[0].utility, out.utilities[1], epsilon = 1e-12);
    }

    #[test]
    fn default_grid_has_25_points_and_clips() {
        let ty = leaf(5.0, 20.0, 6).ty;
        assert_eq!(default_report_grid(&ty, 12).len(), 25);
        let clipped = default_report_grid(&ty, 7);
        assert_eq!(clipped.len(), 20);
        assert!(clipped.iter().all(|r| r.desired_disconnect <= 7));
    }

    #[test]
    fn bad_index_is_an_input_error() {
        let sc = station(vec![leaf(5.0, 20.0, 3)], vec![0.2; 4], 6.6);
        let err = vcg_payment(&sc, &sc.types(), 3, &Solver::exact()).unwrap_err();
        assert!(err.is_input());
    }

    #[test]
    fn exact_config_round_trips_through_solver_json() {
        let s = Solver::Exact(ExactConfig { budget: 42, ..ExactConfig::default() });
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Solver>(&json).unwrap(), s);
    }
}
