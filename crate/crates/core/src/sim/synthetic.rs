//! Station configuration, synthetic datasets and scenario sampling.
//!
//! The synthetic datasets stand in for the real ones (market prices,
//! observed disconnections, SoC requests and surveyed inflexibilities). They
//! reproduce the summary statistics the experiments depend on:
//!
//! * prices: every day spans exactly `[0.13, 0.22]` $/kWh, low around
//!   midday and peaking in the early evening;
//! * disconnections: clustered between 4 P.M. and 8 P.M.;
//! * SoC requests: arrive with 4–14 kWh, want 8–16 kWh more;
//! * inflexibility `α`: most mass in 30–34 $/h², mean near 31.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{DatasetBundle, SocPair};
use crate::error::InputError;
use crate::model::{Ev, EvStaticParams, EvType, StationScenario};

/// Physical parameters shared by every EV of a sampled fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvModel {
    pub battery_capacity: f64,
    pub efficiency: f64,
    pub wear_cost: f64,
    pub max_charge_rate: f64,
    pub max_discharge_rate: f64,
}

impl Default for EvModel {
    /// Nissan Leaf.
    fn default() -> Self {
        EvModel {
            battery_capacity: 40.0,
            efficiency: 0.87,
            wear_cost: 0.13,
            max_charge_rate: 6.6,
            max_discharge_rate: 6.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StationConfig {
    pub n_evs: usize,
    /// Number of intervals; the default covers 10 A.M. to 10 P.M.
    pub horizon: usize,
    pub interval_hours: f64,
    /// kW
    pub bus_capacity: f64,
    pub ev: EvModel,
    /// $/kWh², the same for every EV.
    pub soc_inflexibility: f64,
}

impl Default for StationConfig {
    fn default() -> Self {
        StationConfig {
            n_evs: 5,
            horizon: 48,
            interval_hours: 0.25,
            bus_capacity: 15.0,
            ev: EvModel::default(),
            soc_inflexibility: 10.0,
        }
    }
}

impl StationConfig {
    pub fn validate(&self) -> Result<(), InputError> {
        if self.n_evs == 0 {
            return Err(InputError::invalid("n_evs", "must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(InputError::invalid("horizon", "must be >= 1"));
        }
        if !(self.interval_hours > 0.0 && self.interval_hours.is_finite()) {
            return Err(InputError::invalid("interval_hours", "must be > 0"));
        }
        Ok(())
    }

    /// Clock hour at the start of interval `t`, for a day starting at 10 A.M.
    fn hour(&self, t: usize) -> f64 {
        10.0 + t as f64 * self.interval_hours
    }
}

/// Shape of the synthetic inflexibility samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaProfile {
    /// 80% in 30–34 $/h², the rest spread over 10–50.
    #[default]
    Survey,
    /// Everything in 30–34 $/h².
    NearHomogeneous,
    /// Half of the drivers at 0, the other half at twice the survey values.
    Bimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub days: usize,
    pub samples: usize,
    pub alpha: AlphaProfile,
    /// $/kWh
    pub price_low: f64,
    pub price_high: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            days: 18,
            samples: 200,
            alpha: AlphaProfile::Survey,
            price_low: 0.13,
            price_high: 0.22,
            seed: 0,
        }
    }
}

fn price_day(rng: &mut ChaCha8Rng, station: &StationConfig, low: f64, high: f64) -> Vec<f64> {
    let peak = rng.random_range(16.5..18.0);
    let morning = rng.random_range(0.15..0.35);
    let raw: Vec<f64> = (0..station.horizon)
        .map(|t| {
            let h = station.hour(t) + 0.5 * station.interval_hours;
            let evening = (-((h - peak) / 1.5).powi(2)).exp();
            let shoulder = morning * (-((h - 10.0) / 1.5).powi(2)).exp();
            evening + shoulder + rng.random_range(-0.04..0.04)
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    raw.iter().map(|r| low + (high - low) * (r - lo) / span).collect()
}

fn survey_alpha(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.8) {
        rng.random_range(30.0..34.0)
    } else {
        rng.random_range(10.0..50.0)
    }
}

/// Synthetic dataset for stations shaped like `station`.
pub fn synthetic_bundle(spec: &SyntheticSpec, station: &StationConfig) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let price_days = (0..spec.days.max(1))
        .map(|_| price_day(&mut rng, station, spec.price_low, spec.price_high))
        .collect();

    let leave = Normal::new(18.0f64, 1.0).expect("valid normal");
    let disconnect_samples = (0..spec.samples)
        .map(|_| {
            let h = leave.sample(&mut rng).clamp(16.0, 20.0);
            let t = ((h - 10.0) / station.interval_hours).round() as usize;
            t.min(station.horizon)
        })
        .collect();

    let cap = station.ev.battery_capacity;
    let soc_pairs = (0..spec.samples)
        .map(|_| {
            let initial = rng.random_range(4.0..14.0f64).min(cap);
            let desired = (initial + rng.random_range(12.0..20.0)).min(cap);
            SocPair {
                initial_kwh: initial,
                desired_kwh: desired,
            }
        })
        .collect();

    let alpha_samples = (0..spec.samples)
        .map(|k| match spec.alpha {
            AlphaProfile::Survey => survey_alpha(&mut rng),
            AlphaProfile::NearHomogeneous => rng.random_range(30.0..34.0),
            AlphaProfile::Bimodal => {
                let a = 2.0 * survey_alpha(&mut rng);
                if k % 2 == 0 {
                    0.0
                } else {
                    a
                }
            }
        })
        .collect();

    DatasetBundle {
        price_days,
        disconnect_samples,
        soc_pairs,
        alpha_samples,
    }
}

/// Draws a station scenario: one price day, and for each EV a disconnection
/// time, SoC pair and inflexibility, all uniformly from the bundle.
pub fn sample_scenario(
    bundle: &DatasetBundle,
    station: &StationConfig,
    seed: u64,
) -> Result<StationScenario, InputError> {
    station.validate()?;
    let empty = |what: &str| InputError::invalid(what, "dataset is empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prices = bundle
        .price_days
        .choose(&mut rng)
        .ok_or_else(|| empty("price_days"))?
        .clone();
    if prices.len() != station.horizon {
        return Err(InputError::LengthMismatch {
            what: "price day",
            expected: station.horizon,
            actual: prices.len(),
        });
    }
    let mut fleet = Vec::with_capacity(station.n_evs);
    for _ in 0..station.n_evs {
        let tau = *bundle
            .disconnect_samples
            .choose(&mut rng)
            .ok_or_else(|| empty("disconnect_samples"))?;
        let pair = *bundle.soc_pairs.choose(&mut rng).ok_or_else(|| empty("soc_pairs"))?;
        let alpha = *bundle
            .alpha_samples
            .choose(&mut rng)
            .ok_or_else(|| empty("alpha_samples"))?;
        let m = &station.ev;
        fleet.push(Ev {
            params: EvStaticParams {
                battery_capacity: m.battery_capacity,
                efficiency: m.efficiency,
                wear_cost: m.wear_cost,
                initial_soc: pair.initial_kwh,
                max_charge_rate: m.max_charge_rate,
                max_discharge_rate: m.max_discharge_rate,
            },
            ty: EvType {
                desired_disconnect: tau.min(station.horizon),
                desired_soc: pair.desired_kwh,
                temporal_inflexibility: alpha,
                soc_inflexibility: station.soc_inflexibility,
            },
        });
    }
    let scenario = StationScenario {
        horizon: station.horizon,
        interval_hours: station.interval_hours,
        prices,
        bus_capacity: station.bus_capacity,
        fleet,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Small random instance for solver comparisons: half-hour steps, prices in
/// `[0.13, 0.22]`, desired times in the second half of the day and a bus
/// that fits half the fleet at full rate.
pub fn desk_instance(n_evs: usize, horizon: usize, seed: u64) -> StationScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ev = EvModel::default();
    let prices = (0..horizon).map(|_| rng.random_range(0.13..0.22)).collect();
    let fleet = (0..n_evs)
        .map(|_| {
            let s0 = rng.random_range(5.0..15.0);
            let need = rng.random_range(6.0..14.0);
            Ev {
                params: EvStaticParams {
                    battery_capacity: ev.battery_capacity,
                    efficiency: ev.efficiency,
                    wear_cost: ev.wear_cost,
                    initial_soc: s0,
                    max_charge_rate: ev.max_charge_rate,
                    max_discharge_rate: ev.max_discharge_rate,
                },
                ty: EvType {
                    desired_disconnect: rng.random_range(horizon / 2..=horizon * 3 / 4),
                    desired_soc: s0 + need,
                    temporal_inflexibility: rng.random_range(5.0..40.0),
                    soc_inflexibility: 10.0,
                },
            }
        })
        .collect();
    StationScenario {
        horizon,
        interval_hours: 0.5,
        prices,
        bus_capacity: 0.5 * n_evs as f64 * ev.max_charge_rate,
        fleet,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_station_covers_ten_to_ten() {
        let s = StationConfig::default();
        assert_eq!(s.horizon, 48);
        assert_eq!(s.hour(s.horizon), 22.0);
    }

    #[test]
    fn synthetic_prices_have_exact_spread() {
        let b = synthetic_bundle(&SyntheticSpec::default(), &StationConfig::default());
        assert_eq!(b.price_days.len(), 18);
        for day in &b.price_days {
            assert_eq!(day.len(), 48);
            let lo = day.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = day.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((lo - 0.13).abs() < 1e-12 && (hi - 0.22).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_profiles_match_their_descriptions() {
        let st = StationConfig::default();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let spec = |alpha| SyntheticSpec {
            alpha,
            samples: 2000,
            ..SyntheticSpec::default()
        };
        let survey = synthetic_bundle(&spec(AlphaProfile::Survey), &st).alpha_samples;
        let in_band = survey.iter().filter(|a| (30.0..34.0).contains(*a)).count();
        assert!(in_band as f64 > 0.75 * survey.len() as f64);
        assert!((mean(&survey) - 31.0).abs() < 1.5);

        let homo = synthetic_bundle(&spec(AlphaProfile::NearHomogeneous), &st).alpha_samples;
        assert!(homo.iter().all(|a| (30.0..34.0).contains(a)));

        let bi = synthetic_bundle(&spec(AlphaProfile::Bimodal), &st).alpha_samples;
        let zeros = bi.iter().filter(|a| **a == 0.0).count();
        assert_eq!(zeros, 1000);
        let high: Vec<f64> = bi.iter().copied().filter(|a| *a > 0.0).collect();
        assert!((mean(&high) - 62.0).abs() < 3.0);
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        let st = StationConfig::default();
        let b = synthetic_bundle(&SyntheticSpec::default(), &st);
        let a = sample_scenario(&b, &st, 11).unwrap();
        assert_eq!(a, sample_scenario(&b, &st, 11).unwrap());
        let mut distinct = Vec::new();
        for seed in 0..20 {
            let s = sample_scenario(&b, &st, seed).unwrap();
            s.validate().unwrap();
            assert_eq!(s.fleet.len(), 5);
            assert!(s.fleet.iter().all(|ev| ev.ty.desired_disconnect >= 24 && ev.ty.desired_disconnect <= 40));
            if !distinct.contains(&s) {
                distinct.push(s);
            }
        }
        assert_eq!(distinct.len(), 20);
    }

    #[test]
    fn empty_bundle_is_rejected() {
        let st = StationConfig::default();
        assert!(sample_scenario(&DatasetBundle::default(), &st, 0).is_err());
    }

    #[test]
    fn desk_instances_are_valid() {
        for seed in 0..10 {
            desk_instance(3, 12, seed).validate().unwrap();
        }
    }
}
