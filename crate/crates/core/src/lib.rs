//! Bidirectional (V2G) charge scheduling for temporally flexible EVs at a
//! capacity-limited charging station, with VCG pricing to elicit the
//! drivers' private preferences.
//!
//! * [`model`]: SoC dynamics, costs, feasibility, naive baseline.
//! * [`subproblem`] and [`admm`]: the per-EV decomposition heuristic.
//! * [`exact`]: enumeration over disconnection times with a joint QP per
//!   combination, for small instances.
//! * [`solver`]: picks the exact or the ADMM engine.
//! * [`mechanism`]: VCG allocation, payments and audits.
//! * [`sim`]: datasets, synthetic samplers, baselines and experiments.
//! * [`cli`]: the `evflex` command-line front end.

pub mod cli;
pub mod error;
pub mod model;
pub mod qp;
pub mod subproblem;
pub mod admm;
pub mod exact;
pub mod solver;
pub mod mechanism;
pub mod sim;

mod formulation;

pub use admm::{AdmmConfig, ScheduleSolution};
pub use error::{InputError, SolveError};
pub use exact::ExactConfig;
pub use mechanism::{MechanismOutcome, PaymentRule};
pub use model::{Allocation, Ev, EvStaticParams, EvType, StationScenario};
pub use solver::Solver;
