//! Seeded experiment sweeps over station parameters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{arbitrage_threshold_check, run_metrics, schedule_baseline, Baseline, RunMetrics};
use super::data::{load_datasets, DatasetBundle, DatasetPaths};
use super::synthetic::{sample_scenario, synthetic_bundle, StationConfig, SyntheticSpec};
use crate::error::{InputError, SolveError};
use crate::mechanism::run_vcg;
use crate::solver::Solver;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// CSV files; relative paths are resolved against the config file.
    Files(DatasetPaths),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Values swept over; an empty list keeps the station's own value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub bus_capacity: Vec<f64>,
    pub wear_cost: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub runs: usize,
    pub seed: u64,
    pub station: StationConfig,
    pub data: DataSource,
    pub solver: Solver,
    pub sweep: SweepGrid,
    pub baselines: Vec<Baseline>,
    /// Also run the VCG mechanism and record payments and utilities.
    pub mechanism: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            runs: 20,
            seed: 0,
            station: StationConfig::default(),
            data: DataSource::default(),
            solver: Solver::admm(),
            sweep: SweepGrid::default(),
            baselines: Vec::new(),
            mechanism: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), InputError> {
        if self.runs == 0 {
            return Err(InputError::invalid("runs", "must be >= 1"));
        }
        self.station.validate()?;
        for &c in &self.sweep.bus_capacity {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(InputError::invalid("sweep.bus_capacity", format!("{c} is not >= 0")));
            }
        }
        for &b in &self.sweep.wear_cost {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(InputError::invalid("sweep.wear_cost", format!("{b} is not >= 0")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        let or_default = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let buses = or_default(&self.sweep.bus_capacity, self.station.bus_capacity);
        let wears = or_default(&self.sweep.wear_cost, self.station.ev.wear_cost);
        let mut out = Vec::with_capacity(buses.len() * wears.len());
        for &bus_capacity in &buses {
            for &wear_cost in &wears {
                out.push(GridPoint {
                    bus_capacity,
                    wear_cost,
                });
            }
        }
        out
    }

    /// Builds the dataset, resolving file paths against `base_dir`.
    pub fn load_bundle(&self, base_dir: &Path) -> Result<DatasetBundle, InputError> {
        match &self.data {
            DataSource::Synthetic(spec) => Ok(synthetic_bundle(spec, &self.station)),
            DataSource::Files(paths) => load_datasets(
                &paths.relative_to(base_dir),
                self.station.horizon,
                self.station.ev.battery_capacity,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// kW
    pub bus_capacity: f64,
    /// $/kWh
    pub wear_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub grid_index: usize,
    pub point: GridPoint,
    pub run: usize,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub arbitrage_possible: bool,
    pub baseline_costs: BTreeMap<Baseline, f64>,
    /// Empty unless the mechanism was run.
    pub payments: Vec<f64>,
    pub utilities: Vec<f64>,
    pub station_budget: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.is_empty() {
            return Stat { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub grid_index: usize,
    pub point: GridPoint,
    pub runs: usize,
    pub social_cost: Stat,
    pub avg_delay_min: Stat,
    pub v2g_energy_kwh: Stat,
    /// Percentage saved by the flexible schedule relative to each baseline.
    pub savings_pct: BTreeMap<Baseline, Stat>,
    pub station_budget: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

/// Seed of run `run`, shared by every grid point so that they are compared
/// on the same sampled scenarios.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(run as u64)
}

fn one_run(
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
    grid_index: usize,
    point: GridPoint,
    run: usize,
) -> Result<RunRecord, SolveError> {
    let seed = run_seed(config.seed, run);
    let station = StationConfig {
        bus_capacity: point.bus_capacity,
        ev: super::synthetic::EvModel {
            wear_cost: point.wear_cost,
            ..config.station.ev.clone()
        },
        ..config.station.clone()
    };
    let scenario = sample_scenario(bundle, &station, seed)?;
    let flex = config.solver.schedule(&scenario)?;
    let metrics = run_metrics(&scenario, &flex.allocations)?;
    let mut baseline_costs = BTreeMap::new();
    for &b in &config.baselines {
        let sol = schedule_baseline(&scenario, b, &config.solver)
            .map_err(|e| e.context(format!("{} baseline", b.name())))?;
        baseline_costs.insert(b, sol.social_cost);
    }
    let (payments, utilities, station_budget) = if config.mechanism {
        let out = run_vcg(&scenario, &scenario.types(), &config.solver)?;
        (out.payments, out.utilities, Some(out.station_budget))
    } else {
        (Vec::new(), Vec::new(), None)
    };
    Ok(RunRecord {
        grid_index,
        point,
        run,
        seed,
        metrics,
        arbitrage_possible: arbitrage_threshold_check(&scenario.prices, point.wear_cost),
        baseline_costs,
        payments,
        utilities,
        station_budget,
    })
}

fn aggregate(grid_index: usize, point: GridPoint, records: &[&RunRecord], baselines: &[Baseline]) -> Aggregate {
    let col = |f: &dyn Fn(&RunRecord) -> f64| Stat::of(&records.iter().map(|r| f(r)).collect::<Vec<_>>());
    let savings_pct = baselines
        .iter()
        .map(|&b| {
            let s = col(&|r| {
                let base = r.baseline_costs[&b];
                if base.abs() > 0.0 {
                    100.0 * (base - r.metrics.social_cost) / base.abs()
                } else {
                    0.0
                }
            });
            (b, s)
        })
        .collect();
    let budgets: Vec<f64> = records.iter().filter_map(|r| r.station_budget).collect();
    Aggregate {
        grid_index,
        point,
        runs: records.len(),
        social_cost: col(&|r| r.metrics.social_cost),
        avg_delay_min: col(&|r| r.metrics.avg_delay_min),
        v2g_energy_kwh: col(&|r| r.metrics.v2g_energy_kwh),
        savings_pct,
        station_budget: (!budgets.is_empty()).then(|| Stat::of(&budgets)),
    }
}

/// Runs every grid point `config.runs` times on seeded scenarios.
pub fn run_experiment(bundle: &DatasetBundle, config: &ExperimentConfig) -> Result<ExperimentResult, SolveError> {
    config.validate()?;
    let mut baselines = config.baselines.clone();
    baselines.sort();
    baselines.dedup();
    let config = ExperimentConfig {
        baselines,
        ..config.clone()
    };
    let grid = config.grid();
    let jobs: Vec<(usize, GridPoint, usize)> = grid
        .iter()
        .enumerate()
        .flat_map(|(g, &p)| (0..config.runs).map(move |r| (g, p, r)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(g, p, r)| {
            one_run(bundle, &config, g, p, r).map_err(|e| {
                e.context(format!(
                    "run {r} (seed {}) at bus {} kW, wear {} $/kWh",
                    run_seed(config.seed, r),
                    p.bus_capacity,
                    p.wear_cost
                ))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let aggregates = grid
        .iter()
        .enumerate()
        .map(|(g, &p)| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.grid_index == g).collect();
            aggregate(g, p, &rs, &config.baselines)
        })
        .collect();
    Ok(ExperimentResult {
        config,
        records,
        aggregates,
    })
}

impl ExperimentResult {
    /// One row per run and grid point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "grid_index",
            "bus_capacity_kw",
            "wear_cost_usd_per_kwh",
            "run",
            "seed",
            "social_cost_usd",
            "avg_delay_min",
            "v2g_energy_kwh",
            "arbitrage_possible",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for b in &self.config.baselines {
            header.push(format!("{}_cost_usd", b.name()));
        }
        if self.config.mechanism {
            header.push("station_budget_usd".into());
            header.push("total_payments_usd".into());
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.grid_index.to_string(),
                r.point.bus_capacity.to_string(),
                r.point.wear_cost.to_string(),
                r.run.to_string(),
                r.seed.to_string(),
                r.metrics.social_cost.to_string(),
                r.metrics.avg_delay_min.to_string(),
                r.metrics.v2g_energy_kwh.to_string(),
                r.arbitrage_possible.to_string(),
            ];
            for b in &self.config.baselines {
                row.push(r.baseline_costs[b].to_string());
            }
            if self.config.mechanism {
                row.push(r.station_budget.unwrap_or(0.0).to_string());
                row.push(r.payments.iter().sum::<f64>().to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            runs: 1,
            seed: 3,
            station: StationConfig {
                n_evs: 2,
                horizon: 8,
                interval_hours: 1.5,
                bus_capacity: 6.6,
                ..StationConfig::default()
            },
            solver: Solver::exact(),
            baselines: vec![Baseline::Naive, Baseline::Inflexible],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn stat_of_single_value() {
        assert_eq!(Stat::of(&[3.5]), Stat { mean: 3.5, std: 0.0 });
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_run_aggregates_equal_the_run() {
        let cfg = tiny();
        let bundle = cfg.load_bundle(Path::new(".")).unwrap();
        let res = run_experiment(&bundle, &cfg).unwrap();
        assert_eq!(res.records.len(), 1);
        let (r, a) = (&res.records[0], &res.aggregates[0]);
        assert_eq!(a.social_cost.mean, r.metrics.social_cost);
        assert_eq!(a.avg_delay_min.mean, r.metrics.avg_delay_min);
        assert_eq!(a.social_cost.std, 0.0);
        assert!(a.savings_pct[&Baseline::Naive].mean >= -1e-6);
    }

    #[test]
    fn grid_is_the_cartesian_product() {
        let mut cfg = tiny();
        cfg.sweep.bus_capacity = vec![5.0, 10.0];
        cfg.sweep.wear_cost = vec![0.03, 0.13, 0.2];
        let g = cfg.grid();
        assert_eq!(g.len(), 6);
        assert_eq!(g[4], GridPoint { bus_capacity: 10.0, wear_cost: 0.13 });
    }

    #[test]
    fn zero_runs_is_rejected() {
        let cfg = ExperimentConfig { runs: 0, ..tiny() };
        let err = run_experiment(&DatasetBundle::default(), &cfg).unwrap_err();
        assert!(err.is_input());
    }

    #[test]
    fn csv_has_metric_and_baseline_columns() {
        let cfg = tiny();
        let bundle = cfg.load_bundle(Path::new(".")).unwrap();
        let res = run_experiment(&bundle, &cfg).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.contains("v2g_energy_kwh"));
        assert!(header.contains("avg_delay_min"));
        assert!(header.ends_with("inflexible_cost_usd,naive_cost_usd"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn result_json_round_trips() {
        let cfg = tiny();
        let bundle = cfg.load_bundle(Path::new(".")).unwrap();
        let res = run_experiment(&bundle, &cfg).unwrap();
        let json = serde_json::to_string(&res).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentResult>(&json).unwrap(), res);
    }
}
