//! Reference schedules and per-run metrics.

use serde::{Deserialize, Serialize};

use crate::admm::ScheduleSolution;
use crate::error::SolveError;
use crate::model::{self, Allocation, StationScenario};
use crate::solver::Solver;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Flexible times, no discharging.
    Unidirectional,
    /// Bidirectional, every EV leaves at its desired time.
    Inflexible,
    /// Everyone charges in parallel from the start.
    Naive,
    /// Planned with the fleet-mean `α`, evaluated at the true types.
    MeanAlpha,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [
        Baseline::Unidirectional,
        Baseline::Inflexible,
        Baseline::Naive,
        Baseline::MeanAlpha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Unidirectional => "unidirectional",
            Baseline::Inflexible => "inflexible",
            Baseline::Naive => "naive",
            Baseline::MeanAlpha => "mean_alpha",
        }
    }
}

fn fixed_solution(scenario: &StationScenario, allocations: Vec<Allocation>) -> Result<ScheduleSolution, SolveError> {
    Ok(ScheduleSolution {
        social_cost: model::social_cost(scenario, &allocations)?,
        primal_residual: model::bus_residual(scenario, &allocations),
        sweeps_used: 0,
        converged: true,
        trace: Vec::new(),
        allocations,
    })
}

/// Schedules `scenario` with the restriction described by `kind`. The
/// returned cost is always evaluated with the scenario's own types.
pub fn schedule_baseline(
    scenario: &StationScenario,
    kind: Baseline,
    solver: &Solver,
) -> Result<ScheduleSolution, SolveError> {
    match kind {
        Baseline::Unidirectional => {
            let mut charge_only = scenario.clone();
            for ev in &mut charge_only.fleet {
                ev.params.max_discharge_rate = 0.0;
            }
            solver.schedule(&charge_only)
        }
        Baseline::Inflexible => solver.schedule_pinned(scenario),
        Baseline::Naive => fixed_solution(scenario, model::naive_parallel_schedule(scenario)),
        Baseline::MeanAlpha => {
            let n = scenario.fleet.len() as f64;
            let mean = scenario
                .fleet
                .iter()
                .map(|ev| ev.ty.temporal_inflexibility)
                .sum::<f64>()
                / n;
            let mut planned = scenario.clone();
            for ev in &mut planned.fleet {
                ev.ty.temporal_inflexibility = mean;
            }
            let sol = solver.schedule(&planned)?;
            Ok(ScheduleSolution {
                social_cost: model::social_cost(scenario, &sol.allocations)?,
                ..sol
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// $
    pub social_cost: f64,
    /// Mean over EVs of the late-departure time in minutes; leaving early
    /// counts as zero.
    pub avg_delay_min: f64,
    /// kWh drawn from EV batteries, summed over the fleet.
    pub v2g_energy_kwh: f64,
}

pub fn run_metrics(scenario: &StationScenario, allocations: &[Allocation]) -> Result<RunMetrics, SolveError> {
    let dt = scenario.interval_hours;
    let n = scenario.fleet.len().max(1) as f64;
    let delay: f64 = scenario
        .fleet
        .iter()
        .zip(allocations)
        .map(|(ev, a)| a.disconnect_time.saturating_sub(ev.ty.desired_disconnect) as f64 * dt * 60.0)
        .sum();
    let v2g: f64 = allocations
        .iter()
        .flat_map(|a| &a.power_profile)
        .map(|u| (-u).max(0.0) * dt)
        .sum();
    Ok(RunMetrics {
        social_cost: model::social_cost(scenario, allocations)?,
        avg_delay_min: delay / n,
        v2g_energy_kwh: v2g,
    })
}

/// Whether a buy-low/sell-high round trip can beat battery wear, which is
/// paid on both legs.
pub fn arbitrage_threshold_check(prices: &[f64], wear_cost: f64) -> bool {
    let hi = prices.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = prices.iter().copied().fold(f64::INFINITY, f64::min);
    !prices.is_empty() && hi - lo > 2.0 * wear_cost
}
