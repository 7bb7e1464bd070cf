//! Per-EV step of the ADMM sweep.
//!
//! EV `n` minimizes its own cost plus energy cost plus the augmented
//! penalty on the relaxed bus constraint, given the load of its peers:
//!
//! ```text
//!   c_n(x) + <p, u> dt - (1/2ν) Σ λ_t²
//!          + (1/2ν) Σ [λ_t + ν(|u[t] + o[t]| - C)]_+²
//! ```
//!
//! For a fixed disconnection time this is a convex QP. The penalty uses one
//! epigraph slack per step, `m_t ≥ max(0, λ + ν(w + o - C), λ + ν(-w - o - C))`,
//! which equals the positive part of `λ + ν(|w + o| - C)`.

use serde::{Deserialize, Serialize};

use crate::error::{InputError, SolveError};
use crate::formulation::{add_ev_block, linear_cost_lower_bounds};
use crate::model::{self, Allocation, Ev};
use crate::qp::{QpBuilder, QpSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    /// One nonnegative multiplier per interval.
    pub multipliers: Vec<f64>,
    /// Penalty parameter ν > 0.
    pub penalty: f64,
}

impl DualState {
    pub fn zeros(horizon: usize, penalty: f64) -> Self {
        DualState {
            multipliers: vec![0.0; horizon],
            penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemContext {
    /// Σ_{j≠n} û_j[t], kW.
    pub other_load: Vec<f64>,
    pub duals: DualState,
    pub prices: Vec<f64>,
    pub interval_hours: f64,
    pub bus_capacity: f64,
}

impl SubproblemContext {
    fn validate(&self) -> Result<(), InputError> {
        let t = self.prices.len();
        if self.other_load.len() != t {
            return Err(InputError::LengthMismatch {
                what: "other_load",
                expected: t,
                actual: self.other_load.len(),
            });
        }
        if self.duals.multipliers.len() != t {
            return Err(InputError::LengthMismatch {
                what: "multipliers",
                expected: t,
                actual: self.duals.multipliers.len(),
            });
        }
        if !(self.duals.penalty > 0.0 && self.duals.penalty.is_finite()) {
            return Err(InputError::invalid("penalty", "must be > 0"));
        }
        Ok(())
    }

    fn penalty_term(&self, t: usize, power: f64) -> f64 {
        let nu = self.duals.penalty;
        let v = (self.duals.multipliers[t]
            + nu * ((power + self.other_load[t]).abs() - self.bus_capacity))
            .max(0.0);
        v * v / (2.0 * nu)
    }

    fn dual_constant(&self) -> f64 {
        self.duals.multipliers.iter().map(|l| l * l).sum::<f64>() / (2.0 * self.duals.penalty)
    }
}

/// Augmented cost of a candidate allocation, evaluated term by term.
pub fn augmented_cost(ev: &Ev, alloc: &Allocation, ctx: &SubproblemContext) -> f64 {
    let dt = ctx.interval_hours;
    let penalty: f64 = (0..ctx.prices.len())
        .map(|t| ctx.penalty_term(t, alloc.power_profile[t]))
        .sum();
    model::ev_cost_unchecked(ev, alloc, dt)
        + model::energy_cost_unchecked(&ctx.prices, &alloc.power_profile, dt)
        - ctx.dual_constant()
        + penalty
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedTauSolution {
    pub allocation: Allocation,
    /// Augmented cost at `allocation`.
    pub objective: f64,
    /// Charging part `u⁺` as returned by the QP, before the split is collapsed.
    pub charge_part: Vec<f64>,
    /// Discharging part `u⁻` as returned by the QP.
    pub discharge_part: Vec<f64>,
}

impl FixedTauSolution {
    /// `max_t min(u⁺[t], u⁻[t])`.
    pub fn complementarity(&self) -> f64 {
        self.charge_part
            .iter()
            .zip(&self.discharge_part)
            .map(|(a, b)| a.min(*b))
            .fold(0.0, f64::max)
    }
}

/// Best profile for EV `ev` when it disconnects at `tau`.
pub fn solve_fixed_tau(
    ev: &Ev,
    tau: usize,
    ctx: &SubproblemContext,
    settings: &QpSettings,
) -> Result<FixedTauSolution, SolveError> {
    ctx.validate()?;
    let horizon = ctx.prices.len();
    if tau > horizon {
        return Err(InputError::OutOfRange {
            what: "tau",
            index: tau,
            len: horizon + 1,
        }
        .into());
    }
    let dt = ctx.interval_hours;
    let nu = ctx.duals.penalty;
    let p = &ev.params;

    let mut b = QpBuilder::new();
    let block = add_ev_block(&mut b, ev, tau, &ctx.prices, dt);
    for t in 0..horizon {
        if !block.is_active(t) {
            continue;
        }
        let lambda = ctx.duals.multipliers[t];
        let o = ctx.other_load[t];
        let worst = (p.max_charge_rate + o).abs().max((o - p.max_discharge_rate).abs());
        let reach = lambda + nu * (worst - ctx.bus_capacity);
        if reach <= 0.0 {
            continue;
        }
        let m = b.add_var(0.0, 1.0 / (2.0 * nu), Some(0.0), None);
        for sign in [1.0, -1.0] {
            // λ + ν(±(w + o) - C) ≤ m
            let mut e: Vec<(usize, f64)> = block
                .power_terms(t, sign * nu)
                .into_iter()
                .collect();
            e.push((m, -1.0));
            b.add_le(e, -(lambda + nu * (sign * o - ctx.bus_capacity)));
        }
    }

    let sol = b.build().solve(settings)?;
    let (charge_part, discharge_part) = block.parts(&sol.x, horizon);
    let mut allocation = block.allocation(&sol.x, horizon);
    model::clamp_profile(p, &mut allocation, dt);
    let objective = augmented_cost(ev, &allocation, ctx);
    Ok(FixedTauSolution {
        allocation,
        objective,
        charge_part,
        discharge_part,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvSubproblemSolution {
    pub allocation: Allocation,
    pub objective: f64,
    /// Fixed-τ solves actually performed (the rest were pruned).
    pub solves: usize,
}

/// Candidate disconnection times `0..=horizon`, optionally restricted to a
/// window around the desired time.
pub fn tau_candidates(ev: &Ev, horizon: usize, window: Option<usize>) -> Vec<usize> {
    match window {
        None => (0..=horizon).collect(),
        Some(w) => {
            let d = ev.ty.desired_disconnect.min(horizon);
            (d.saturating_sub(w)..=(d + w).min(horizon)).collect()
        }
    }
}

fn tie_tol(v: f64) -> f64 {
    1e-9 * (1.0 + v.abs())
}

/// Minimizes the augmented cost over the given disconnection times.
///
/// Candidates are visited by increasing distance to the desired time, so
/// ties resolve toward the closest one (then the earlier). A candidate is
/// skipped when a lower bound on its objective already exceeds the incumbent.
pub fn solve_ev_subproblem(
    ev: &Ev,
    ctx: &SubproblemContext,
    candidates: &[usize],
    settings: &QpSettings,
) -> Result<EvSubproblemSolution, SolveError> {
    ctx.validate()?;
    if candidates.is_empty() {
        return Err(InputError::invalid("tau_candidates", "must be nonempty").into());
    }
    let horizon = ctx.prices.len();
    if let Some(&bad) = candidates.iter().find(|&&t| t > horizon) {
        return Err(InputError::OutOfRange {
            what: "tau",
            index: bad,
            len: horizon + 1,
        }
        .into());
    }
    let dt = ctx.interval_hours;
    let desired = ev.ty.desired_disconnect;
    let key = |t: usize| (t.abs_diff(desired), t);
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by_key(|&t| key(t));
    order.dedup();
    // Without the delay term the cost is nonincreasing in tau (a profile
    // padded with idle steps stays feasible at the same cost), so solving the
    // latest candidate first bounds every other one from below.
    let latest = *order.iter().max().expect("nonempty");
    order.retain(|&t| t != latest);
    order.insert(0, latest);

    // Penalty incurred after disconnection is fixed: u = 0 there.
    let mut tail = vec![0.0; horizon + 1];
    for t in (0..horizon).rev() {
        tail[t] = tail[t + 1] + ctx.penalty_term(t, 0.0);
    }
    let linear_lb = linear_cost_lower_bounds(ev, &ctx.prices, dt);
    let constant = ctx.dual_constant();

    let mut best: Option<(EvSubproblemSolution, (usize, usize))> = None;
    let mut rest_costs: Vec<(usize, f64)> = Vec::new();
    let mut solves = 0;
    for tau in order {
        let delay = model::delay_cost(&ev.ty, tau, dt);
        let known = rest_costs
            .iter()
            .filter(|(t, _)| *t >= tau)
            .map(|&(_, r)| r - tie_tol(r))
            .fold(f64::NEG_INFINITY, f64::max);
        let bound = delay + (linear_lb[tau] + tail[tau] - constant).max(known);
        if let Some((b, b_key)) = &best {
            let tol = tie_tol(b.objective);
            if bound > b.objective + tol || (bound >= b.objective - tol && key(tau) > *b_key) {
                continue;
            }
        }
        let sol = solve_fixed_tau(ev, tau, ctx, settings)
            .map_err(|e| e.context(format!("fixed-tau solve at tau={tau}")))?;
        solves += 1;
        rest_costs.push((tau, sol.objective - delay));
        let better = match &best {
            None => true,
            Some((b, b_key)) => {
                let tol = tie_tol(b.objective);
                sol.objective < b.objective - tol || (sol.objective <= b.objective + tol && key(tau) < *b_key)
            }
        };
        if better {
            best = Some((
                EvSubproblemSolution {
                    allocation: sol.allocation,
                    objective: sol.objective,
                    solves: 0,
                },
                key(tau),
            ));
        }
    }
    let (mut best, _) = best.expect("at least one candidate is always solved");
    best.solves = solves;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::leaf;
    use approx::assert_abs_diff_eq;

    fn ctx(prices: Vec<f64>, dt: f64, bus: f64) -> SubproblemContext {
        let t = prices.len();
        SubproblemContext {
            other_load: vec![0.0; t],
            duals: DualState::zeros(t, 1.0),
            prices,
            interval_hours: dt,
            bus_capacity: bus,
        }
    }

    #[test]
    fn expensive_charging_stays_idle() {
        let mut ev = leaf(10.0, 12.0, 3);
        ev.params.wear_cost = 100.0;
        ev.ty.soc_inflexibility = 0.5;
        let c = ctx(vec![5.0; 4], 0.5, 20.0);
        let sol = solve_fixed_tau(&ev, 4, &c, &QpSettings::default()).unwrap();
        for u in &sol.allocation.power_profile {
            assert_abs_diff_eq!(*u, 0.0, epsilon = 1e-7);
        }
        let expect = 31.0 * 0.25 + 0.5 * 4.0;
        assert_abs_diff_eq!(sol.objective, expect, epsilon = 1e-6);
    }

    #[test]
    fn dominant_shortfall_delivers_full_charge() {
        let mut ev = leaf(10.0, 20.0, 8);
        ev.ty.soc_inflexibility = 1e6;
        let c = ctx(vec![0.2; 8], 1.0, 50.0);
        let sol = solve_fixed_tau(&ev, 8, &c, &QpSettings::default()).unwrap();
        let s = model::final_soc(&ev.params, &sol.allocation.power_profile, 1.0);
        assert!((s - 20.0).abs() < 1e-4, "final soc {s}");
    }

    #[test]
    fn objective_matches_term_by_term_evaluation() {
        let ev = leaf(8.0, 30.0, 5);
        let mut c = ctx(vec![0.1, 0.3, 0.2, 0.05, 0.4, 0.1], 0.5, 10.0);
        c.other_load = vec![8.0, -3.0, 9.5, 4.0, 0.0, 12.0];
        c.duals.multipliers = vec![0.5, 0.0, 2.0, 0.0, 0.1, 1.0];
        c.duals.penalty = 1.5;
        let sol = solve_fixed_tau(&ev, 5, &c, &QpSettings::default()).unwrap();
        let a = &sol.allocation;
        let dt = 0.5;
        let mut direct = 31.0 * 0.0 + 10.0 * (30.0 - model::final_soc(&ev.params, &a.power_profile, dt)).max(0.0).powi(2);
        for t in 0..6 {
            let u = a.power_profile[t];
            direct += 0.13 * u.abs() * dt + c.prices[t] * u * dt;
            let l = c.duals.multipliers[t];
            let v = (l + 1.5 * ((u + c.other_load[t]).abs() - 10.0)).max(0.0);
            direct += v * v / 3.0 - l * l / 3.0;
        }
        assert!((sol.objective - direct).abs() <= 1e-6 * direct.abs().max(1.0));
    }

    #[test]
    fn split_is_complementary_with_positive_wear() {
        let ev = leaf(20.0, 25.0, 6);
        let c = ctx(vec![0.1, 0.6, 0.1, 0.7, 0.05, 0.5], 0.5, 20.0);
        let sol = solve_fixed_tau(&ev, 6, &c, &QpSettings::default()).unwrap();
        assert!(sol.complementarity() <= 1e-6, "{}", sol.complementarity());
    }

    #[test]
    fn huge_alpha_picks_desired_time() {
        let mut ev = leaf(5.0, 30.0, 3);
        ev.ty.temporal_inflexibility = 1e9;
        let c = ctx(vec![0.2; 6], 0.5, 3.0);
        let sol = solve_ev_subproblem(&ev, &c, &tau_candidates(&ev, 6, None), &QpSettings::default()).unwrap();
        assert_eq!(sol.allocation.disconnect_time, 3);
    }

    #[test]
    fn zero_alpha_with_congestion_delays() {
        let mut ev = leaf(5.0, 15.0, 2);
        ev.ty.temporal_inflexibility = 0.0;
        ev.ty.soc_inflexibility = 1e4;
        let c = ctx(vec![0.2; 8], 0.5, 50.0);
        let sol = solve_ev_subproblem(&ev, &c, &tau_candidates(&ev, 8, None), &QpSettings::default()).unwrap();
        assert!(sol.allocation.disconnect_time > 2);
        let at_desired = solve_fixed_tau(&ev, 2, &c, &QpSettings::default()).unwrap();
        assert!(sol.objective < at_desired.objective);
    }

    #[test]
    fn window_limits_candidates() {
        let ev = leaf(5.0, 15.0, 2);
        assert_eq!(tau_candidates(&ev, 8, Some(1)), vec![1, 2, 3]);
        assert_eq!(tau_candidates(&ev, 8, None).len(), 9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ev = leaf(5.0, 15.0, 2);
        let c = ctx(vec![0.2; 4], 0.5, 10.0);
        assert!(solve_fixed_tau(&ev, 5, &c, &QpSettings::default()).is_err());
        assert!(solve_ev_subproblem(&ev, &c, &[], &QpSettings::default()).is_err());
        let mut bad = c.clone();
        bad.other_load.pop();
        assert!(solve_fixed_tau(&ev, 2, &bad, &QpSettings::default()).is_err());
    }

    #[test]
    fn pruned_search_matches_brute_force() {
        let prices = vec![0.2, 0.1, 0.3, 0.15, 0.22, 0.13, 0.19, 0.25, 0.14, 0.2];
        for (k, alpha) in [0.0, 3.0, 31.0].into_iter().enumerate() {
            let mut ev = leaf(6.0, 22.0, 4 + k);
            ev.ty.temporal_inflexibility = alpha;
            let c = SubproblemContext {
                other_load: vec![4.0, 5.0, 6.0, 2.0, 0.0, 3.0, 6.0, 1.0, 0.0, 0.0],
                duals: DualState {
                    multipliers: vec![0.5, 1.0, 2.0, 0.0, 0.0, 0.3, 1.5, 0.0, 0.0, 0.0],
                    penalty: 1.0,
                },
                prices: prices.clone(),
                interval_hours: 0.5,
                bus_capacity: 7.0,
            };
            let cands = tau_candidates(&ev, 10, None);
            let brute = cands
                .iter()
                .map(|&t| solve_fixed_tau(&ev, t, &c, &QpSettings::default()).unwrap().objective)
                .fold(f64::INFINITY, f64::min);
            let sol = solve_ev_subproblem(&ev, &c, &cands, &QpSettings::default()).unwrap();
            assert_abs_diff_eq!(sol.objective, brute, epsilon = 1e-7);
        }
    }
}
