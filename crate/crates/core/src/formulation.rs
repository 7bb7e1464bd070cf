//! QP building blocks shared by the per-EV subproblem and the joint solver.
//!
//! For a fixed disconnection time `tau` an EV contributes variables
//! `up[t] ∈ [0, r_c]` and `dn[t] ∈ [0, r_d]` for `t < tau` (power is
//! `up - dn`), plus a shortfall slack `g ≥ max(0, s_d - s[T])` charged
//! `β g²`. Wear enters linearly as `b (up + dn) dt`, which is exact whenever
//! `up·dn = 0`, and that holds at any optimum with positive wear.

use crate::model::{Allocation, Ev};
use crate::qp::QpBuilder;

pub(crate) struct EvBlock {
    pub tau: usize,
    pub up: Vec<usize>,
    pub dn: Vec<Option<usize>>,
}

/// Adds one EV's variables, rate/SoC rows and shortfall epigraph. The linear
/// energy and wear costs are included in the objective.
pub(crate) fn add_ev_block(
    b: &mut QpBuilder,
    ev: &Ev,
    tau: usize,
    prices: &[f64],
    dt: f64,
) -> EvBlock {
    let p = &ev.params;
    let gain = p.efficiency * dt;
    let s0 = p.initial_soc;
    let headroom = p.battery_capacity - s0;
    // A battery that is full and cannot discharge can never move.
    let frozen = p.max_discharge_rate <= 0.0 && (gain <= 0.0 || headroom <= 1e-12);
    let steps = if frozen { 0 } else { tau };

    let mut up = Vec::with_capacity(steps);
    let mut dn = Vec::with_capacity(steps);
    for &price in prices.iter().take(steps) {
        up.push(b.add_var(
            (price + p.wear_cost) * dt,
            0.0,
            Some(0.0),
            Some(p.max_charge_rate),
        ));
        dn.push((p.max_discharge_rate > 0.0).then(|| {
            b.add_var(
                (p.wear_cost - price) * dt,
                0.0,
                Some(0.0),
                Some(p.max_discharge_rate),
            )
        }));
    }

    if gain > 0.0 {
        for t in 1..=steps {
            let cum = |sign: f64| -> Vec<(usize, f64)> {
                let mut e = Vec::with_capacity(2 * t);
                for k in 0..t {
                    e.push((up[k], sign * gain));
                    if let Some(d) = dn[k] {
                        e.push((d, -sign * gain));
                    }
                }
                e
            };
            if s0 + gain * p.max_charge_rate * (t as f64) > p.battery_capacity - 1e-12 {
                b.add_le(cum(1.0), headroom);
            }
            if s0 - gain * p.max_discharge_rate * (t as f64) < 1e-12 {
                b.add_le(cum(-1.0), s0);
            }
        }
    }

    if ev.ty.soc_inflexibility > 0.0 {
        let g = b.add_var(0.0, ev.ty.soc_inflexibility, Some(0.0), None);
        let mut e = vec![(g, -1.0)];
        if gain > 0.0 {
            for k in 0..steps {
                e.push((up[k], -gain));
                if let Some(d) = dn[k] {
                    e.push((d, gain));
                }
            }
        }
        b.add_le(e, -(ev.ty.desired_soc - s0));
    }

    EvBlock { tau, up, dn }
}

impl EvBlock {
    /// `(w, up, dn)` entries of `±(up[t] - dn[t])` used in coupling rows.
    pub fn power_terms(&self, t: usize, sign: f64) -> Vec<(usize, f64)> {
        let mut e = Vec::with_capacity(2);
        if t < self.up.len() {
            e.push((self.up[t], sign));
            if let Some(d) = self.dn[t] {
                e.push((d, -sign));
            }
        }
        e
    }

    pub fn is_active(&self, t: usize) -> bool {
        t < self.up.len()
    }

    /// Raw split parts as returned by the QP.
    pub fn parts(&self, x: &[f64], horizon: usize) -> (Vec<f64>, Vec<f64>) {
        let mut up = vec![0.0; horizon];
        let mut dn = vec![0.0; horizon];
        for t in 0..self.up.len() {
            up[t] = x[self.up[t]];
            dn[t] = self.dn[t].map_or(0.0, |d| x[d]);
        }
        (up, dn)
    }

    /// Net power profile with the split collapsed so that at most one of
    /// charge/discharge is nonzero per step.
    pub fn allocation(&self, x: &[f64], horizon: usize) -> Allocation {
        let (up, dn) = self.parts(x, horizon);
        let power_profile = up.iter().zip(&dn).map(|(a, b)| a - b).collect();
        Allocation {
            disconnect_time: self.tau,
            power_profile,
        }
    }
}

/// Lower bound on `energy + wear` cost over the first `tau` steps, ignoring
/// SoC limits: each step either idles or runs at a full rate.
pub(crate) fn linear_cost_lower_bounds(ev: &Ev, prices: &[f64], dt: f64) -> Vec<f64> {
    let p = &ev.params;
    let mut out = Vec::with_capacity(prices.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for &price in prices {
        let charge = (price + p.wear_cost) * p.max_charge_rate;
        let discharge = (p.wear_cost - price) * p.max_discharge_rate;
        acc += dt * charge.min(discharge).min(0.0);
        out.push(acc);
    }
    out
}
