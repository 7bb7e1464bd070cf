//! Station and EV model: SoC dynamics, per-EV cost, energy cost, feasibility
//! checks and the naive "charge everyone from the start" baseline.
//!
//! Units throughout: power in kW (positive = charging, negative =
//! discharging), energy in kWh, prices in $/kWh, time in intervals of
//! `interval_hours` hours.
//!
//! The SoC update applies the transfer efficiency to both charging and
//! discharging, so exporting 1 kWh drains only `efficiency` kWh from the
//! battery. This is deliberate and matches the dynamics the rest of the
//! crate optimizes against.

use serde::{Deserialize, Serialize};

use crate::error::InputError;

/// Default tolerance (kW or kWh) used when checking feasibility.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-6;

/// Public physical parameters of one EV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvStaticParams {
    /// kWh
    pub battery_capacity: f64,
    /// Power transfer efficiency in [0, 1].
    pub efficiency: f64,
    /// Battery wear, $ per kWh transferred.
    pub wear_cost: f64,
    /// kWh at connection.
    pub initial_soc: f64,
    /// kW
    pub max_charge_rate: f64,
    /// kW
    pub max_discharge_rate: f64,
}

/// Private preferences of one EV driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvType {
    /// Interval index in `0..=T` at which the driver wants to leave.
    pub desired_disconnect: usize,
    /// kWh
    pub desired_soc: f64,
    /// $ per squared hour of delay (or early release).
    pub temporal_inflexibility: f64,
    /// $ per squared kWh of shortfall.
    pub soc_inflexibility: f64,
}

/// One connected EV: public physics plus (true or reported) type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ev {
    #[serde(flatten)]
    pub params: EvStaticParams,
    #[serde(flatten)]
    pub ty: EvType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationScenario {
    /// Number of intervals `T`.
    pub horizon: usize,
    pub interval_hours: f64,
    /// $/kWh, one per interval.
    pub prices: Vec<f64>,
    /// kW
    pub bus_capacity: f64,
    pub fleet: Vec<Ev>,
}

/// Decision for one EV: when it leaves and how much power it exchanges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub disconnect_time: usize,
    pub power_profile: Vec<f64>,
}

impl Allocation {
    pub fn idle(horizon: usize, disconnect_time: usize) -> Self {
        Allocation {
            disconnect_time,
            power_profile: vec![0.0; horizon],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Rate,
    SocBox,
    PostDisconnect,
    Bus,
}

impl std::fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConstraintKind::Rate => "rate",
            ConstraintKind::SocBox => "soc_box",
            ConstraintKind::PostDisconnect => "post_disconnect",
            ConstraintKind::Bus => "bus",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: ConstraintKind,
    /// EV index, absent for the shared bus constraint.
    pub ev: Option<usize>,
    /// Interval index (for SoC, the trajectory index in `0..=T`).
    pub time: usize,
    /// Amount by which the constraint is exceeded.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn max_magnitude(&self, kind: ConstraintKind) -> f64 {
        self.violations
            .iter()
            .filter(|v| v.constraint == kind)
            .map(|v| v.magnitude)
            .fold(0.0, f64::max)
    }
}

fn check_finite(field: &str, value: f64) -> Result<(), InputError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(InputError::invalid(field, format!("must be finite, got {value}")))
    }
}

impl EvStaticParams {
    pub fn validate(&self) -> Result<(), InputError> {
        for (name, v) in [
            ("battery_capacity", self.battery_capacity),
            ("efficiency", self.efficiency),
            ("wear_cost", self.wear_cost),
            ("initial_soc", self.initial_soc),
            ("max_charge_rate", self.max_charge_rate),
            ("max_discharge_rate", self.max_discharge_rate),
        ] {
            check_finite(name, v)?;
        }
        if self.battery_capacity <= 0.0 {
            return Err(InputError::invalid("battery_capacity", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(InputError::invalid("efficiency", "must lie in [0, 1]"));
        }
        if self.wear_cost < 0.0 {
            return Err(InputError::invalid("wear_cost", "must be >= 0"));
        }
        if self.initial_soc < 0.0 || self.initial_soc > self.battery_capacity {
            return Err(InputError::invalid(
                "initial_soc",
                format!("must lie in [0, {}]", self.battery_capacity),
            ));
        }
        if self.max_charge_rate <= 0.0 {
            return Err(InputError::invalid("max_charge_rate", "must be > 0"));
        }
        if self.max_discharge_rate < 0.0 {
            return Err(InputError::invalid("max_discharge_rate", "must be >= 0"));
        }
        Ok(())
    }
}

impl EvType {
    pub fn validate(&self, horizon: usize, battery_capacity: f64) -> Result<(), InputError> {
        check_finite("desired_soc", self.desired_soc)?;
        check_finite("temporal_inflexibility", self.temporal_inflexibility)?;
        check_finite("soc_inflexibility", self.soc_inflexibility)?;
        if self.desired_disconnect > horizon {
            return Err(InputError::invalid(
                "desired_disconnect",
                format!("{} exceeds horizon {horizon}", self.desired_disconnect),
            ));
        }
        if self.desired_soc < 0.0 || self.desired_soc > battery_capacity {
            return Err(InputError::invalid(
                "desired_soc",
                format!("must lie in [0, {battery_capacity}]"),
            ));
        }
        if self.temporal_inflexibility < 0.0 {
            return Err(InputError::invalid("temporal_inflexibility", "must be >= 0"));
        }
        if self.soc_inflexibility < 0.0 {
            return Err(InputError::invalid("soc_inflexibility", "must be >= 0"));
        }
        Ok(())
    }
}

impl StationScenario {
    pub fn validate(&self) -> Result<(), InputError> {
        if self.horizon == 0 {
            return Err(InputError::invalid("horizon", "must be >= 1"));
        }
        if !(self.interval_hours.is_finite() && self.interval_hours > 0.0) {
            return Err(InputError::invalid("interval_hours", "must be > 0"));
        }
        if self.prices.len() != self.horizon {
            return Err(InputError::LengthMismatch {
                what: "prices",
                expected: self.horizon,
                actual: self.prices.len(),
            });
        }
        for p in &self.prices {
            check_finite("prices", *p)?;
        }
        if !(self.bus_capacity.is_finite() && self.bus_capacity > 0.0) {
            return Err(InputError::invalid("bus_capacity", "must be > 0"));
        }
        if self.fleet.is_empty() {
            return Err(InputError::invalid("fleet", "must contain at least one EV"));
        }
        for (n, ev) in self.fleet.iter().enumerate() {
            let tag = |e: InputError| match e {
                InputError::Invalid { field, reason } => {
                    InputError::invalid(format!("fleet[{n}].{field}"), reason)
                }
                other => other,
            };
            ev.params.validate().map_err(tag)?;
            ev.ty
                .validate(self.horizon, ev.params.battery_capacity)
                .map_err(tag)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fleet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fleet.is_empty()
    }

    /// Same station with EV `n` removed from the fleet.
    pub fn without_ev(&self, n: usize) -> StationScenario {
        let mut s = self.clone();
        s.fleet.remove(n);
        s
    }

    /// Same station with every EV's type replaced by the given reports.
    pub fn with_types(&self, types: &[EvType]) -> Result<StationScenario, InputError> {
        if types.len() != self.fleet.len() {
            return Err(InputError::LengthMismatch {
                what: "reports",
                expected: self.fleet.len(),
                actual: types.len(),
            });
        }
        let mut s = self.clone();
        for (ev, ty) in s.fleet.iter_mut().zip(types) {
            ev.ty = ty.clone();
        }
        Ok(s)
    }

    pub fn types(&self) -> Vec<EvType> {
        self.fleet.iter().map(|ev| ev.ty.clone()).collect()
    }
}

/// SoC after applying `profile`: entry `t` is the energy at the start of
/// interval `t`, so the output has `profile.len() + 1` entries.
pub fn soc_trajectory(
    params: &EvStaticParams,
    profile: &[f64],
    interval_hours: f64,
) -> Result<Vec<f64>, InputError> {
    if !(interval_hours.is_finite() && interval_hours > 0.0) {
        return Err(InputError::invalid("interval_hours", "must be > 0"));
    }
    Ok(soc_path(params, profile, interval_hours))
}

pub(crate) fn soc_path(params: &EvStaticParams, profile: &[f64], interval_hours: f64) -> Vec<f64> {
    let gain = params.efficiency * interval_hours;
    let mut out = Vec::with_capacity(profile.len() + 1);
    let mut acc = 0.0;
    out.push(params.initial_soc);
    for u in profile {
        acc += u;
        out.push(params.initial_soc + gain * acc);
    }
    out
}

pub(crate) fn final_soc(params: &EvStaticParams, profile: &[f64], interval_hours: f64) -> f64 {
    params.initial_soc + params.efficiency * interval_hours * profile.iter().sum::<f64>()
}

/// Delay of `tau` relative to the desired disconnection, in hours.
pub fn delay_hours(tau: usize, desired: usize, interval_hours: f64) -> f64 {
    (tau as f64 - desired as f64) * interval_hours
}

/// The quadratic delay-penalty part of the EV cost.
pub fn delay_cost(ty: &EvType, tau: usize, interval_hours: f64) -> f64 {
    let d = delay_hours(tau, ty.desired_disconnect, interval_hours);
    ty.temporal_inflexibility * d * d
}

/// Shortfall penalty for a given final SoC.
pub fn shortfall_cost(ty: &EvType, final_soc: f64) -> f64 {
    let gap = (ty.desired_soc - final_soc).max(0.0);
    ty.soc_inflexibility * gap * gap
}

pub fn wear_cost(params: &EvStaticParams, profile: &[f64], interval_hours: f64) -> f64 {
    params.wear_cost * profile.iter().map(|u| u.abs()).sum::<f64>() * interval_hours
}

/// Driver cost of an allocation: delay penalty (delay measured in hours),
/// shortfall penalty on the final SoC, and linear battery wear.
pub fn ev_cost(ev: &Ev, alloc: &Allocation, interval_hours: f64) -> Result<f64, InputError> {
    if alloc.disconnect_time > alloc.power_profile.len() {
        return Err(InputError::OutOfRange {
            what: "disconnect_time",
            index: alloc.disconnect_time,
            len: alloc.power_profile.len() + 1,
        });
    }
    if !(interval_hours.is_finite() && interval_hours > 0.0) {
        return Err(InputError::invalid("interval_hours", "must be > 0"));
    }
    Ok(ev_cost_unchecked(ev, alloc, interval_hours))
}

pub(crate) fn ev_cost_unchecked(ev: &Ev, alloc: &Allocation, interval_hours: f64) -> f64 {
    let s_final = final_soc(&ev.params, &alloc.power_profile, interval_hours);
    delay_cost(&ev.ty, alloc.disconnect_time, interval_hours)
        + shortfall_cost(&ev.ty, s_final)
        + wear_cost(&ev.params, &alloc.power_profile, interval_hours)
}

/// Money paid for the energy exchanged: `sum_t p[t] * u[t] * dt`.
pub fn energy_cost(prices: &[f64], profile: &[f64], interval_hours: f64) -> Result<f64, InputError> {
    if prices.len() != profile.len() {
        return Err(InputError::LengthMismatch {
            what: "power_profile",
            expected: prices.len(),
            actual: profile.len(),
        });
    }
    Ok(energy_cost_unchecked(prices, profile, interval_hours))
}

pub(crate) fn energy_cost_unchecked(prices: &[f64], profile: &[f64], interval_hours: f64) -> f64 {
    prices.iter().zip(profile).map(|(p, u)| p * u).sum::<f64>() * interval_hours
}

fn check_allocations(scenario: &StationScenario, allocations: &[Allocation]) -> Result<(), InputError> {
    if allocations.len() != scenario.fleet.len() {
        return Err(InputError::LengthMismatch {
            what: "allocations",
            expected: scenario.fleet.len(),
            actual: allocations.len(),
        });
    }
    for a in allocations {
        if a.power_profile.len() != scenario.horizon {
            return Err(InputError::LengthMismatch {
                what: "power_profile",
                expected: scenario.horizon,
                actual: a.power_profile.len(),
            });
        }
        if a.disconnect_time > scenario.horizon {
            return Err(InputError::OutOfRange {
                what: "disconnect_time",
                index: a.disconnect_time,
                len: scenario.horizon + 1,
            });
        }
    }
    Ok(())
}

/// Per-EV `(ev_cost, energy_cost)` pairs.
pub fn cost_breakdown(
    scenario: &StationScenario,
    allocations: &[Allocation],
) -> Result<Vec<(f64, f64)>, InputError> {
    check_allocations(scenario, allocations)?;
    let dt = scenario.interval_hours;
    Ok(scenario
        .fleet
        .iter()
        .zip(allocations)
        .map(|(ev, a)| {
            (
                ev_cost_unchecked(ev, a, dt),
                energy_cost_unchecked(&scenario.prices, &a.power_profile, dt),
            )
        })
        .collect())
}

/// Total EV cost plus energy cost over the fleet.
pub fn social_cost(scenario: &StationScenario, allocations: &[Allocation]) -> Result<f64, InputError> {
    Ok(cost_breakdown(scenario, allocations)?
        .into_iter()
        .map(|(c, e)| c + e)
        .sum())
}

/// Lists every constraint violated by more than `tolerance`.
pub fn check_feasible(
    scenario: &StationScenario,
    allocations: &[Allocation],
    tolerance: f64,
) -> Result<FeasibilityReport, InputError> {
    check_allocations(scenario, allocations)?;
    let dt = scenario.interval_hours;
    let mut violations = Vec::new();
    for (n, (ev, a)) in scenario.fleet.iter().zip(allocations).enumerate() {
        let p = &ev.params;
        for (t, &u) in a.power_profile.iter().enumerate() {
            let excess = (u - p.max_charge_rate).max(-p.max_discharge_rate - u);
            if excess > tolerance {
                violations.push(Violation {
                    constraint: ConstraintKind::Rate,
                    ev: Some(n),
                    time: t,
                    magnitude: excess,
                });
            }
            if t >= a.disconnect_time && u.abs() > tolerance {
                violations.push(Violation {
                    constraint: ConstraintKind::PostDisconnect,
                    ev: Some(n),
                    time: t,
                    magnitude: u.abs(),
                });
            }
        }
        for (t, s) in soc_path(p, &a.power_profile, dt).into_iter().enumerate() {
            let excess = (-s).max(s - p.battery_capacity);
            if excess > tolerance {
                violations.push(Violation {
                    constraint: ConstraintKind::SocBox,
                    ev: Some(n),
                    time: t,
                    magnitude: excess,
                });
            }
        }
    }
    for t in 0..scenario.horizon {
        let load: f64 = allocations.iter().map(|a| a.power_profile[t]).sum();
        let excess = load.abs() - scenario.bus_capacity;
        if excess > tolerance {
            violations.push(Violation {
                constraint: ConstraintKind::Bus,
                ev: None,
                time: t,
                magnitude: excess,
            });
        }
    }
    Ok(FeasibilityReport { violations })
}

/// Largest bus overload `max_t (|sum_n u_n[t]| - C_bus)_+`.
pub fn bus_residual(scenario: &StationScenario, allocations: &[Allocation]) -> f64 {
    (0..scenario.horizon)
        .map(|t| {
            let load: f64 = allocations.iter().map(|a| a.power_profile[t]).sum();
            (load.abs() - scenario.bus_capacity).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// Admissible power range at one step given the SoC at its start.
pub(crate) fn step_bounds(params: &EvStaticParams, soc: f64, interval_hours: f64) -> (f64, f64) {
    let gain = params.efficiency * interval_hours;
    let mut lo = -params.max_discharge_rate;
    let mut hi = params.max_charge_rate;
    if gain > 0.0 {
        lo = lo.max(-soc.max(0.0) / gain);
        hi = hi.min((params.battery_capacity - soc).max(0.0) / gain);
    }
    (lo.min(0.0), hi.max(0.0))
}

/// Forward pass that makes a profile satisfy the rate, SoC-box and
/// post-disconnect constraints by shrinking offending steps toward zero.
/// Feasible steps are left untouched.
pub(crate) fn clamp_profile(params: &EvStaticParams, alloc: &mut Allocation, interval_hours: f64) {
    let gain = params.efficiency * interval_hours;
    let mut soc = params.initial_soc;
    for (t, u) in alloc.power_profile.iter_mut().enumerate() {
        if t >= alloc.disconnect_time {
            *u = 0.0;
            continue;
        }
        let (lo, hi) = step_bounds(params, soc, interval_hours);
        *u = u.clamp(lo, hi);
        soc += gain * *u;
    }
}

/// Greedy water-filling: split `capacity` equally among claimants, never
/// giving anyone more than their cap.
pub(crate) fn water_fill(caps: &[f64], capacity: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..caps.len()).collect();
    order.sort_by(|&a, &b| caps[a].total_cmp(&caps[b]));
    let mut out = vec![0.0; caps.len()];
    let mut remaining = capacity.max(0.0);
    let mut left = caps.len();
    for &i in &order {
        let share = remaining / left as f64;
        let give = caps[i].max(0.0).min(share);
        out[i] = give;
        remaining -= give;
        left -= 1;
    }
    out
}

/// Charge every EV from the first interval with equal shares of the bus,
/// each capped by its own rate, until it reaches its desired SoC (or a full
/// battery). An EV that needs more time than desired stays connected until
/// its charging ends.
pub fn naive_parallel_schedule(scenario: &StationScenario) -> Vec<Allocation> {
    let dt = scenario.interval_hours;
    let n = scenario.fleet.len();
    let mut socs: Vec<f64> = scenario.fleet.iter().map(|ev| ev.params.initial_soc).collect();
    let targets: Vec<f64> = scenario
        .fleet
        .iter()
        .map(|ev| ev.ty.desired_soc.min(ev.params.battery_capacity))
        .collect();
    let mut profiles = vec![vec![0.0; scenario.horizon]; n];
    for t in 0..scenario.horizon {
        let caps: Vec<f64> = scenario
            .fleet
            .iter()
            .enumerate()
            .map(|(i, ev)| {
                let gain = ev.params.efficiency * dt;
                let need = targets[i] - socs[i];
                if gain <= 0.0 || need <= 1e-12 {
                    0.0
                } else {
                    ev.params.max_charge_rate.min(need / gain)
                }
            })
            .collect();
        if caps.iter().all(|&c| c <= 0.0) {
            break;
        }
        let shares = water_fill(&caps, scenario.bus_capacity);
        for i in 0..n {
            profiles[i][t] = shares[i];
            socs[i] += scenario.fleet[i].params.efficiency * dt * shares[i];
        }
    }
    scenario
        .fleet
        .iter()
        .zip(profiles)
        .map(|(ev, profile)| {
            let end = profile.iter().rposition(|&u| u > 0.0).map_or(0, |t| t + 1);
            Allocation {
                disconnect_time: ev.ty.desired_disconnect.max(end),
                power_profile: profile,
            }
        })
        .collect()
}
