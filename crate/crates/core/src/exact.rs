//! Exact scheduling for small fleets.
//!
//! For a fixed vector of disconnection times the joint problem over all
//! profiles is a convex QP. The exact optimum is the best of these QPs over
//! the product of the per-EV candidate sets, explored depth-first. A partial
//! assignment is cut when its delay penalties plus a lower bound on the rest
//! of the cost already exceed the incumbent. That lower bound is the larger
//! of two: the most revenue the allowed steps could ever earn, and the
//! non-delay cost at the latest candidate times (which can only be lower,
//! since a schedule padded with idle steps stays feasible).

use serde::{Deserialize, Serialize};

use crate::admm::{repair_bus, ScheduleSolution};
use crate::error::{InputError, SolveError};
use crate::formulation::{add_ev_block, linear_cost_lower_bounds, EvBlock};
use crate::model::{self, Allocation, StationScenario};
use crate::qp::{QpBuilder, QpSettings};

pub const DEFAULT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExactConfig {
    /// Largest number of disconnection-time combinations to enumerate.
    pub budget: u64,
    pub qp: QpSettings,
}

impl Default for ExactConfig {
    fn default() -> Self {
        ExactConfig {
            budget: DEFAULT_BUDGET,
            qp: QpSettings::default(),
        }
    }
}

/// Jointly optimal profiles for fixed disconnection times.
pub fn solve_joint_fixed_tau(
    scenario: &StationScenario,
    taus: &[usize],
    settings: &QpSettings,
) -> Result<(Vec<Allocation>, f64), SolveError> {
    if taus.len() != scenario.fleet.len() {
        return Err(InputError::LengthMismatch {
            what: "tau_vector",
            expected: scenario.fleet.len(),
            actual: taus.len(),
        }
        .into());
    }
    let horizon = scenario.horizon;
    if let Some(&bad) = taus.iter().find(|&&t| t > horizon) {
        return Err(InputError::OutOfRange {
            what: "tau",
            index: bad,
            len: horizon + 1,
        }
        .into());
    }
    let dt = scenario.interval_hours;
    let mut b = QpBuilder::new();
    let blocks: Vec<EvBlock> = scenario
        .fleet
        .iter()
        .zip(taus)
        .map(|(ev, &tau)| add_ev_block(&mut b, ev, tau, &scenario.prices, dt))
        .collect();

    for t in 0..horizon {
        let mut charge_reach = 0.0;
        let mut discharge_reach = 0.0;
        for (ev, block) in scenario.fleet.iter().zip(&blocks) {
            if block.is_active(t) {
                charge_reach += ev.params.max_charge_rate;
                discharge_reach += ev.params.max_discharge_rate;
            }
        }
        for (sign, reach) in [(1.0, charge_reach), (-1.0, discharge_reach)] {
            if reach > scenario.bus_capacity {
                let entries: Vec<(usize, f64)> =
                    blocks.iter().flat_map(|blk| blk.power_terms(t, sign)).collect();
                b.add_le(entries, scenario.bus_capacity);
            }
        }
    }

    let sol = b.build().solve(settings)?;
    let mut allocations: Vec<Allocation> = blocks
        .iter()
        .map(|blk| blk.allocation(&sol.x, horizon))
        .collect();
    for (ev, a) in scenario.fleet.iter().zip(allocations.iter_mut()) {
        model::clamp_profile(&ev.params, a, dt);
    }
    let allocations = repair_bus(scenario, &allocations);
    let cost = model::social_cost(scenario, &allocations)?;
    Ok((allocations, cost))
}

/// All disconnection times `0..=T` for every EV.
pub fn full_candidates(scenario: &StationScenario) -> Vec<Vec<usize>> {
    vec![(0..=scenario.horizon).collect(); scenario.fleet.len()]
}

/// Each EV pinned to its desired disconnection time.
pub fn pinned_candidates(scenario: &StationScenario) -> Vec<Vec<usize>> {
    scenario
        .fleet
        .iter()
        .map(|ev| vec![ev.ty.desired_disconnect])
        .collect()
}

struct Search<'a> {
    scenario: &'a StationScenario,
    settings: &'a QpSettings,
    /// `(tau, delay cost, linear cost bound)` per EV.
    candidates: Vec<Vec<(usize, f64, f64)>>,
    rest_delay: Vec<f64>,
    rest_linear: Vec<f64>,
    /// Non-delay cost at the latest candidate times.
    latest_rest: f64,
    taus: Vec<usize>,
    best: Option<(Vec<Allocation>, f64, Vec<(usize, usize)>)>,
    solves: usize,
}

fn tie_tol(v: f64) -> f64 {
    1e-9 * (1.0 + v.abs())
}

impl Search<'_> {
    fn delay_key(&self) -> Vec<(usize, usize)> {
        self.scenario
            .fleet
            .iter()
            .zip(&self.taus)
            .map(|(ev, &t)| (t.abs_diff(ev.ty.desired_disconnect), t))
            .collect()
    }

    fn visit(&mut self, depth: usize, delay: f64, linear: f64) -> Result<(), SolveError> {
        if depth == self.candidates.len() {
            let (allocs, cost) = solve_joint_fixed_tau(self.scenario, &self.taus, self.settings)
                .map_err(|e| e.context(format!("joint solve at tau={:?}", self.taus)))?;
            self.solves += 1;
            let key = self.delay_key();
            let replace = match &self.best {
                None => true,
                Some((_, best, best_key)) => {
                    cost < best - tie_tol(*best) || (cost <= best + tie_tol(*best) && key < *best_key)
                }
            };
            if replace {
                self.best = Some((allocs, cost, key));
            }
            return Ok(());
        }
        for i in 0..self.candidates[depth].len() {
            let (tau, d, l) = self.candidates[depth][i];
            let delay = delay + d;
            let linear = linear + l;
            let rest = (linear + self.rest_linear[depth + 1]).max(self.latest_rest);
            let bound = delay + self.rest_delay[depth + 1] + rest;
            if let Some((_, best, _)) = &self.best {
                if bound > best + tie_tol(*best) {
                    continue;
                }
            }
            self.taus[depth] = tau;
            self.visit(depth + 1, delay, linear)?;
        }
        Ok(())
    }
}

/// Exact optimum over the product of the candidate sets.
pub fn solve_exact(
    scenario: &StationScenario,
    candidates: &[Vec<usize>],
    config: &ExactConfig,
) -> Result<ScheduleSolution, SolveError> {
    scenario.validate()?;
    let n = scenario.fleet.len();
    if candidates.len() != n {
        return Err(InputError::LengthMismatch {
            what: "tau_candidates",
            expected: n,
            actual: candidates.len(),
        }
        .into());
    }
    let size = candidates
        .iter()
        .fold(1u128, |acc, c| acc.saturating_mul(c.len() as u128));
    if size > u128::from(config.budget) {
        return Err(SolveError::BudgetExceeded {
            size,
            budget: config.budget.into(),
        });
    }
    let dt = scenario.interval_hours;
    let mut ordered = Vec::with_capacity(n);
    for (k, (ev, cands)) in scenario.fleet.iter().zip(candidates).enumerate() {
        if cands.is_empty() {
            return Err(InputError::invalid(format!("tau_candidates[{k}]"), "must be nonempty").into());
        }
        if let Some(&bad) = cands.iter().find(|&&t| t > scenario.horizon) {
            return Err(InputError::OutOfRange {
                what: "tau",
                index: bad,
                len: scenario.horizon + 1,
            }
            .into());
        }
        let linear = linear_cost_lower_bounds(ev, &scenario.prices, dt);
        let mut c: Vec<usize> = cands.clone();
        c.sort_by_key(|&t| (t.abs_diff(ev.ty.desired_disconnect), t));
        c.dedup();
        ordered.push(
            c.into_iter()
                .map(|t| (t, model::delay_cost(&ev.ty, t, dt), linear[t]))
                .collect::<Vec<_>>(),
        );
    }
    let mut rest_delay = vec![0.0; n + 1];
    let mut rest_linear = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let min_of = |f: fn(&(usize, f64, f64)) -> f64| ordered[k].iter().map(f).fold(f64::INFINITY, f64::min);
        rest_delay[k] = rest_delay[k + 1] + min_of(|c| c.1);
        rest_linear[k] = rest_linear[k + 1] + min_of(|c| c.2);
    }

    let latest: Vec<usize> = ordered
        .iter()
        .map(|c| c.iter().map(|x| x.0).max().expect("nonempty"))
        .collect();
    let (latest_allocs, latest_cost) = solve_joint_fixed_tau(scenario, &latest, &config.qp)
        .map_err(|e| e.context(format!("joint solve at tau={latest:?}")))?;
    let latest_delay: f64 = scenario
        .fleet
        .iter()
        .zip(&latest)
        .map(|(ev, &t)| model::delay_cost(&ev.ty, t, dt))
        .sum();
    let latest_rest = latest_cost - latest_delay;

    let mut search = Search {
        scenario,
        settings: &config.qp,
        candidates: ordered,
        rest_delay,
        rest_linear,
        latest_rest: latest_rest - tie_tol(latest_rest),
        taus: latest.clone(),
        best: None,
        solves: 1,
    };
    let key = search.delay_key();
    search.best = Some((latest_allocs, latest_cost, key));
    search.visit(0, 0.0, 0.0)?;
    log::debug!("exact search solved {} joint QPs out of {size}", search.solves);
    let (allocations, social_cost, _) = search.best.expect("nonempty product always yields a leaf");
    Ok(ScheduleSolution {
        primal_residual: model::bus_residual(scenario, &allocations),
        sweeps_used: 0,
        converged: true,
        trace: Vec::new(),
        allocations,
        social_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::leaf;
    use crate::model::check_feasible;
    use crate::subproblem::{solve_fixed_tau, DualState, SubproblemContext};
    use approx::assert_abs_diff_eq;

    fn station(fleet: Vec<model::Ev>, prices: Vec<f64>, dt: f64, bus: f64) -> StationScenario {
        StationScenario {
            horizon: prices.len(),
            interval_hours: dt,
            prices,
            bus_capacity: bus,
            fleet,
        }
    }

    #[test]
    fn zero_taus_give_pure_penalty_cost() {
        let sc = station(vec![leaf(5.0, 15.0, 3), leaf(10.0, 12.0, 2)], vec![0.2; 4], 0.5, 8.0);
        let (a, cost) = solve_joint_fixed_tau(&sc, &[0, 0], &QpSettings::default()).unwrap();
        assert!(a.iter().all(|x| x.power_profile.iter().all(|u| *u == 0.0)));
        let expect = 31.0 * 1.5f64.powi(2) + 10.0 * 100.0 + 31.0 * 1.0 + 10.0 * 4.0;
        assert_abs_diff_eq!(cost, expect, epsilon = 1e-9);
    }

    #[test]
    fn single_ev_matches_subproblem() {
        let ev = leaf(8.0, 25.0, 5);
        let prices = vec![0.3, 0.1, 0.25, 0.05, 0.4, 0.2, 0.1];
        let sc = station(vec![ev.clone()], prices.clone(), 0.5, 20.0);
        let (a, cost) = solve_joint_fixed_tau(&sc, &[5], &QpSettings::default()).unwrap();
        let ctx = SubproblemContext {
            other_load: vec![0.0; 7],
            duals: DualState::zeros(7, 1.0),
            prices,
            interval_hours: 0.5,
            bus_capacity: 20.0,
        };
        let sub = solve_fixed_tau(&ev, 5, &ctx, &QpSettings::default()).unwrap();
        assert_abs_diff_eq!(cost, sub.objective, epsilon = 1e-7);
        for (x, y) in a[0].power_profile.iter().zip(&sub.allocation.power_profile) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-5);
        }
    }

    #[test]
    fn pinned_single_candidate_equals_fixed_solve() {
        let sc = station(vec![leaf(8.0, 25.0, 3)], vec![0.2; 6], 0.5, 20.0);
        let sol = solve_exact(&sc, &pinned_candidates(&sc), &ExactConfig::default()).unwrap();
        let (_, cost) = solve_joint_fixed_tau(&sc, &[3], &QpSettings::default()).unwrap();
        assert_eq!(sol.social_cost, cost);
    }

    #[test]
    fn uncongested_station_keeps_desired_times() {
        let sc = station(
            vec![leaf(20.0, 24.0, 3), leaf(15.0, 20.0, 4)],
            vec![0.2, 0.15, 0.18, 0.22, 0.2, 0.19],
            0.5,
            30.0,
        );
        let sol = solve_exact(&sc, &full_candidates(&sc), &ExactConfig::default()).unwrap();
        assert_eq!(sol.allocations[0].disconnect_time, 3);
        assert_eq!(sol.allocations[1].disconnect_time, 4);
        assert!(check_feasible(&sc, &sol.allocations, 1e-6).unwrap().is_feasible());
    }

    #[test]
    fn budget_guard_refuses_large_products() {
        let fleet = (0..3).map(|_| leaf(5.0, 10.0, 2)).collect();
        let sc = station(fleet, vec![0.2; 9], 0.5, 10.0);
        let cfg = ExactConfig {
            budget: 999,
            ..ExactConfig::default()
        };
        match solve_exact(&sc, &full_candidates(&sc), &cfg) {
            Err(SolveError::BudgetExceeded { size, budget }) => {
                assert_eq!(size, 1000);
                assert_eq!(budget, 999);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }
}
