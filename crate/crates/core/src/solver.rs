//! Choice of scheduling engine, shared by the mechanism, the experiments and
//! the command line.

use serde::{Deserialize, Serialize};

use crate::admm::{run_admm, AdmmConfig, ScheduleSolution};
use crate::error::SolveError;
use crate::exact::{full_candidates, pinned_candidates, solve_exact, ExactConfig};
use crate::model::StationScenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solver {
    Exact(ExactConfig),
    Admm(AdmmConfig),
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Exact(ExactConfig::default())
    }
}

impl Solver {
    pub fn exact() -> Self {
        Solver::Exact(ExactConfig::default())
    }

    pub fn admm() -> Self {
        Solver::Admm(AdmmConfig::default())
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Solver::Exact(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Solver::Exact(_) => "exact",
            Solver::Admm(_) => "admm",
        }
    }

    /// Minimizes the social cost with free disconnection times.
    pub fn schedule(&self, scenario: &StationScenario) -> Result<ScheduleSolution, SolveError> {
        match self {
            Solver::Exact(cfg) => solve_exact(scenario, &full_candidates(scenario), cfg),
            Solver::Admm(cfg) => run_admm(scenario, cfg),
        }
    }

    /// Minimizes the social cost with every EV leaving at its desired time.
    pub fn schedule_pinned(&self, scenario: &StationScenario) -> Result<ScheduleSolution, SolveError> {
        match self {
            Solver::Exact(cfg) => solve_exact(scenario, &pinned_candidates(scenario), cfg),
            Solver::Admm(cfg) => {
                let cfg = AdmmConfig {
                    tau_window: Some(0),
                    ..cfg.clone()
                };
                run_admm(scenario, &cfg)
            }
        }
    }
}
