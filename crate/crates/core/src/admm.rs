//! Gauss-Seidel ADMM over the fleet.
//!
//! The bus constraint `|Σ_n u_n[t]| ≤ C` is relaxed with multipliers
//! `λ_t ≥ 0`. Each sweep solves the EV subproblems in order, every EV seeing
//! the freshest profiles of its peers, then takes a projected dual ascent
//! step. The problem is mixed-integer, so the iteration is a heuristic:
//! every iterate is repaired to a bus-feasible schedule and the cheapest
//! repaired iterate is kept. At the end the power profiles are re-optimized
//! jointly for the disconnection times of the best few iterates, which only
//! touches the convex part of the problem.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{InputError, SolveError};
use crate::exact::solve_joint_fixed_tau;
use crate::model::{self, Allocation, StationScenario};
use crate::qp::QpSettings;
use crate::subproblem::{solve_ev_subproblem, tau_candidates, DualState, SubproblemContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    /// ν, in $·h/kW².
    pub penalty: f64,
    pub max_sweeps: usize,
    /// Bus overload (kW) below which an iterate counts as primal feasible.
    pub primal_tolerance: f64,
    /// Sweeps without improvement of the best cost before stopping.
    pub stall_window: usize,
    /// Relative decrease of the best cost that counts as an improvement.
    pub improvement_tol: f64,
    /// Give up after this many sweeps without improvement even if the raw
    /// iterate is still infeasible. The result is then not converged.
    pub patience: Option<usize>,
    /// Restrict disconnection candidates to `desired ± window`.
    pub tau_window: Option<usize>,
    /// Shuffle the sweep order with this seed instead of using fleet order.
    pub shuffle_seed: Option<u64>,
    /// Re-optimize the profiles jointly for the disconnection times of this
    /// many of the cheapest iterates (0 disables).
    pub polish: usize,
    /// Improving moves of the disconnection times accepted after polishing
    /// (0 disables).
    pub local_moves: usize,
    pub qp: QpSettings,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            penalty: 1.0,
            max_sweeps: 200,
            primal_tolerance: 1e-3,
            stall_window: 5,
            improvement_tol: 1e-5,
            patience: None,
            tau_window: None,
            shuffle_seed: None,
            polish: 3,
            local_moves: 20,
            qp: QpSettings::default(),
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<(), InputError> {
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return Err(InputError::invalid("penalty", "must be > 0"));
        }
        if self.max_sweeps == 0 {
            return Err(InputError::invalid("max_sweeps", "must be >= 1"));
        }
        if self.patience == Some(0) {
            return Err(InputError::invalid("patience", "must be >= 1"));
        }
        if !(self.primal_tolerance > 0.0) {
            return Err(InputError::invalid("primal_tolerance", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    /// Social cost of the raw (unrepaired) iterate.
    pub cost: f64,
    /// Bus overload of the raw iterate, kW.
    pub residual: f64,
    /// Best repaired cost found so far.
    pub best_cost: f64,
    /// Fixed-τ QP solves performed during the sweep.
    pub solves: usize,
}

/// A schedule for the whole fleet, from either solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSolution {
    pub allocations: Vec<Allocation>,
    pub social_cost: f64,
    /// Largest bus overload of `allocations`, kW.
    pub primal_residual: f64,
    pub sweeps_used: usize,
    pub converged: bool,
    pub trace: Vec<SweepRecord>,
}

/// Projected dual ascent: `λ_t ← [λ_t + ν(|load_t| − C)]₊`.
pub fn dual_update(
    duals: &DualState,
    total_load: &[f64],
    bus_capacity: f64,
) -> Result<DualState, InputError> {
    if total_load.len() != duals.multipliers.len() {
        return Err(InputError::LengthMismatch {
            what: "total_load",
            expected: duals.multipliers.len(),
            actual: total_load.len(),
        });
    }
    let nu = duals.penalty;
    Ok(DualState {
        multipliers: duals
            .multipliers
            .iter()
            .zip(total_load)
            .map(|(l, load)| (l + nu * (load.abs() - bus_capacity)).max(0.0))
            .collect(),
        penalty: nu,
    })
}

/// Makes a schedule bus-feasible while keeping every EV's own constraints.
///
/// Walks forward in time: each EV's step is first clamped to its rate and
/// SoC range given its current SoC, then, if the bus is overloaded, the
/// profiles on the overloading side are scaled down just enough to meet the
/// limit. Scaling toward zero keeps each SoC between its previous value and
/// an admissible one, so the SoC box stays satisfied.
pub fn repair_bus(scenario: &StationScenario, allocations: &[Allocation]) -> Vec<Allocation> {
    let dt = scenario.interval_hours;
    let cap = scenario.bus_capacity;
    let mut out = allocations.to_vec();
    let mut socs: Vec<f64> = scenario.fleet.iter().map(|ev| ev.params.initial_soc).collect();
    for t in 0..scenario.horizon {
        for (n, (ev, a)) in scenario.fleet.iter().zip(out.iter_mut()).enumerate() {
            let u = &mut a.power_profile[t];
            if t >= a.disconnect_time {
                *u = 0.0;
            } else {
                let (lo, hi) = model::step_bounds(&ev.params, socs[n], dt);
                *u = u.clamp(lo, hi);
            }
        }
        let pos: f64 = out.iter().map(|a| a.power_profile[t].max(0.0)).sum();
        let neg: f64 = out.iter().map(|a| (-a.power_profile[t]).max(0.0)).sum();
        if pos - neg > cap {
            let f = (cap + neg) / pos;
            out.iter_mut()
                .filter(|a| a.power_profile[t] > 0.0)
                .for_each(|a| a.power_profile[t] *= f);
        } else if neg - pos > cap {
            let f = (cap + pos) / neg;
            out.iter_mut()
                .filter(|a| a.power_profile[t] < 0.0)
                .for_each(|a| a.power_profile[t] *= f);
        }
        for (n, (ev, a)) in scenario.fleet.iter().zip(&out).enumerate() {
            socs[n] += ev.params.efficiency * dt * a.power_profile[t];
        }
    }
    out
}

fn total_load(allocations: &[Allocation], horizon: usize) -> Vec<f64> {
    let mut load = vec![0.0; horizon];
    for a in allocations {
        for (l, u) in load.iter_mut().zip(&a.power_profile) {
            *l += u;
        }
    }
    load
}

/// Disconnection-time vectors near `taus`: single-EV shifts of up to four
/// steps, then opposite shifts of two EVs by up to two steps each. Vectors
/// outside the candidate sets are skipped.
fn neighbourhood(taus: &[usize], candidates: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let shifted = |k: usize, d: isize| {
        taus[k]
            .checked_add_signed(d)
            .filter(|t| candidates[k].contains(t))
    };
    let mut out = Vec::new();
    for k in 0..taus.len() {
        for d in [-1, 1, -2, 2, -3, 3, -4, 4] {
            if let Some(t) = shifted(k, d) {
                let mut v = taus.to_vec();
                v[k] = t;
                out.push(v);
            }
        }
    }
    for i in 0..taus.len() {
        for j in 0..taus.len() {
            if i == j {
                continue;
            }
            for di in [1, 2] {
                for dj in [-1, -2] {
                    if let (Some(a), Some(b)) = (shifted(i, di), shifted(j, dj)) {
                        let mut v = taus.to_vec();
                        v[i] = a;
                        v[j] = b;
                        out.push(v);
                    }
                }
            }
        }
    }
    out
}

/// Runs the ADMM heuristic and returns the cheapest bus-feasible schedule
/// encountered.
pub fn run_admm(scenario: &StationScenario, config: &AdmmConfig) -> Result<ScheduleSolution, SolveError> {
    scenario.validate()?;
    config.validate()?;
    let horizon = scenario.horizon;
    let n_ev = scenario.fleet.len();
    let candidates: Vec<Vec<usize>> = scenario
        .fleet
        .iter()
        .map(|ev| tau_candidates(ev, horizon, config.tau_window))
        .collect();
    let mut rng = config.shuffle_seed.map(ChaCha8Rng::seed_from_u64);

    let mut duals = DualState::zeros(horizon, config.penalty);
    let mut current: Vec<Allocation> = scenario
        .fleet
        .iter()
        .map(|ev| Allocation::idle(horizon, ev.ty.desired_disconnect))
        .collect();
    let mut load = total_load(&current, horizon);

    let mut best: Option<(Vec<Allocation>, f64)> = None;
    // Cheapest repaired cost seen for each disconnection-time vector.
    let mut tau_costs: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut last_improvement = 0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut order: Vec<usize> = (0..n_ev).collect();

    for sweep in 1..=config.max_sweeps {
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
        }
        let previous = current.clone();
        let mut solves = 0;
        for &n in &order {
            let ev = &scenario.fleet[n];
            let other_load: Vec<f64> = load
                .iter()
                .zip(&current[n].power_profile)
                .map(|(l, u)| l - u)
                .collect();
            let ctx = SubproblemContext {
                other_load,
                duals: duals.clone(),
                prices: scenario.prices.clone(),
                interval_hours: scenario.interval_hours,
                bus_capacity: scenario.bus_capacity,
            };
            let sol = solve_ev_subproblem(ev, &ctx, &candidates[n], &config.qp)
                .map_err(|e| e.context(format!("sweep {sweep}, EV {n}")))?;
            solves += sol.solves;
            for (l, (new, old)) in load
                .iter_mut()
                .zip(sol.allocation.power_profile.iter().zip(&current[n].power_profile))
            {
                *l += new - old;
            }
            current[n] = sol.allocation;
        }
        // Recompute to avoid drift from incremental updates.
        load = total_load(&current, horizon);
        let residual = load
            .iter()
            .map(|l| (l.abs() - scenario.bus_capacity).max(0.0))
            .fold(0.0, f64::max);
        let raw_cost = model::social_cost(scenario, &current)?;
        let new_duals = dual_update(&duals, &load, scenario.bus_capacity)?;

        let repaired = repair_bus(scenario, &current);
        let repaired_cost = model::social_cost(scenario, &repaired)?;
        let taus: Vec<usize> = current.iter().map(|a| a.disconnect_time).collect();
        match tau_costs.iter_mut().find(|(t, _)| *t == taus) {
            Some(entry) => entry.1 = entry.1.min(repaired_cost),
            None => tau_costs.push((taus, repaired_cost)),
        }
        match &best {
            None => {
                best = Some((repaired, repaired_cost));
                last_improvement = sweep;
            }
            Some((_, c)) if repaired_cost < *c => {
                if repaired_cost < c - config.improvement_tol * c.abs().max(1.0) {
                    last_improvement = sweep;
                }
                best = Some((repaired, repaired_cost));
            }
            _ => {}
        }
        let best_cost = best.as_ref().map_or(f64::INFINITY, |b| b.1);
        trace.push(SweepRecord {
            sweep,
            cost: raw_cost,
            residual,
            best_cost,
            solves,
        });

        // Fixed point: the next sweep would see exactly the same inputs.
        let duals_fixed = new_duals
            .multipliers
            .iter()
            .zip(&duals.multipliers)
            .all(|(a, b)| (a - b).abs() <= 1e-12);
        let peers_fixed = rng.is_none() && {
            let mut tail_shift = vec![0.0; horizon];
            let mut ok = true;
            for &n in order.iter().rev() {
                if tail_shift.iter().any(|d: &f64| d.abs() > 1e-9) {
                    ok = false;
                    break;
                }
                for (d, (new, old)) in tail_shift
                    .iter_mut()
                    .zip(current[n].power_profile.iter().zip(&previous[n].power_profile))
                {
                    *d += new - old;
                }
            }
            ok
        };
        duals = new_duals;

        if residual <= config.primal_tolerance
            && ((duals_fixed && peers_fixed) || sweep - last_improvement >= config.stall_window)
        {
            converged = true;
            break;
        }
        if config.patience.is_some_and(|p| sweep - last_improvement >= p) {
            break;
        }
    }

    let (mut allocations, mut social_cost) = best.expect("max_sweeps >= 1");
    let joint_on = |sc: &StationScenario, taus: &[usize]| {
        solve_joint_fixed_tau(sc, taus, &config.qp)
            .map_err(|e| e.context(format!("polishing tau={taus:?}")))
    };
    let joint = |taus: &[usize]| joint_on(scenario, taus);
    tau_costs.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut polished_any = false;
    for (taus, _) in tau_costs.iter().take(config.polish) {
        let (polished, cost) = joint(taus)?;
        polished_any = true;
        if cost < social_cost {
            allocations = polished;
            social_cost = cost;
        }
    }

    if polished_any {
        let mut taus: Vec<usize> = allocations.iter().map(|a| a.disconnect_time).collect();
        // Two lower bounds on a trial's joint optimum, both separable over
        // EVs: drop the bus rows outright, or price them with the final
        // multipliers (signed by the direction of the incumbent's load).
        let dt = scenario.interval_hours;
        let best_load = total_load(&allocations, horizon);
        let shifted: Vec<f64> = (0..horizon)
            .map(|t| scenario.prices[t] + best_load[t].signum() * duals.multipliers[t] / dt)
            .collect();
        let priced_offset = scenario.bus_capacity * duals.multipliers.iter().sum::<f64>();
        let mut relaxed_cache: HashMap<(usize, usize, bool), f64> = HashMap::new();
        let mut relaxed = |k: usize, t: usize, priced: bool| {
            if let Some(&v) = relaxed_cache.get(&(k, t, priced)) {
                return Ok::<f64, SolveError>(v);
            }
            let alone = StationScenario {
                fleet: vec![scenario.fleet[k].clone()],
                bus_capacity: f64::INFINITY,
                prices: if priced { shifted.clone() } else { scenario.prices.clone() },
                ..scenario.clone()
            };
            let (_, v) = joint_on(&alone, &[t])?;
            relaxed_cache.insert((k, t, priced), v);
            Ok(v)
        };
        let use_priced = duals.multipliers.iter().any(|&l| l > 0.0);
        let mut moves = 0;
        let mut joint_solves = 0;
        while moves < config.local_moves {
            let mut improved = false;
            for trial in neighbourhood(&taus, &candidates) {
                let mut bound = 0.0;
                for (k, &t) in trial.iter().enumerate() {
                    bound += relaxed(k, t, false)?;
                }
                if use_priced && bound < social_cost {
                    let mut priced = -priced_offset;
                    for (k, &t) in trial.iter().enumerate() {
                        priced += relaxed(k, t, true)?;
                    }
                    bound = bound.max(priced);
                }
                if bound >= social_cost {
                    continue;
                }
                joint_solves += 1;
                let (alloc, cost) = joint(&trial)?;
                if cost < social_cost - 1e-9 * (1.0 + social_cost.abs()) {
                    allocations = alloc;
                    social_cost = cost;
                    taus = trial;
                    moves += 1;
                    improved = true;
                    break;
                }
            }
            if !improved {
                break;
            }
        }
        log::debug!("local search: {moves} moves accepted, {joint_solves} joint solves");
    }
    Ok(ScheduleSolution {
        primal_residual: model::bus_residual(scenario, &allocations),
        sweeps_used: trace.len(),
        converged,
        trace,
        allocations,
        social_cost,
    })
}
