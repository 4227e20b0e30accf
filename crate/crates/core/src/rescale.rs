//! Time rescaling between the relaxed flow and the autonomous system
//! `ẇ(τ) + (Id − T)(w(τ)) = 0`.
//!
//! With the clock `τ = T₁(t) = ∫₀ᵗ λ(s) ds`, `x = w ∘ T₁` solves the relaxed
//! flow; `T₂` inverts `T₁` wherever the clock is strictly increasing.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig};
use crate::operators::OperatorHandle;
use crate::schedules::Schedule;
use crate::space::Vector;

/// `T₁(t) = ∫₀ᵗ λ`.
pub fn forward_time(s: &Schedule, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("forward time needs t >= 0, got {t}")));
    }
    s.integral_lambda(0.0, t)
}

/// Smallest `u ∈ [0, t_max]` with `T₁(u) = tau`, by bisection to `1e−11`.
pub fn inverse_time(s: &Schedule, tau: f64, t_max: f64) -> Result<f64> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("inverse time needs tau >= 0, got {tau}")));
    }
    if !(t_max >= 0.0) || !t_max.is_finite() {
        return Err(Error::Domain(format!("search horizon must be finite and >= 0, got {t_max}")));
    }
    let reachable = forward_time(s, t_max)?;
    if reachable < tau {
        return Err(Error::RangeExceeded { tau, reachable });
    }
    let (mut lo, mut hi) = (0.0f64, t_max);
    // Invariant: T₁(lo) < tau ≤ T₁(hi), or lo = 0.
    if forward_time(s, 0.0)? >= tau {
        return Ok(0.0);
    }
    for _ in 0..200 {
        if hi - lo <= 1e-11 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if forward_time(s, mid)? >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `T₁`.
    Forward,
    /// `T₂ = T₁⁻¹`.
    Inverse,
}

/// A clock change bound to a schedule. Inverse maps search `[0, t_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaleMap {
    pub schedule: Schedule,
    pub direction: Direction,
    pub t_max: f64,
}

impl RescaleMap {
    pub fn forward(schedule: Schedule) -> Self {
        Self { schedule, direction: Direction::Forward, t_max: f64::INFINITY }
    }

    /// Requires evidence that `∫₀^∞ λ = ∞` so that the inverse is total.
    pub fn inverse(schedule: Schedule, t_max: f64) -> Result<Self> {
        let report = schedule.check_conditions(t_max.max(1.0), 1.0);
        if !report.lambda_integral_diverges.holds {
            return Err(Error::Precondition(
                "inverse clock needs a schedule with divergent integral".into(),
            ));
        }
        Ok(Self { schedule, direction: Direction::Inverse, t_max })
    }

    pub fn apply(&self, t: f64) -> Result<f64> {
        match self.direction {
            Direction::Forward => forward_time(&self.schedule, t),
            Direction::Inverse => inverse_time(&self.schedule, t, self.t_max),
        }
    }
}

/// Per-sample comparison of the relaxed flow with the rescaled autonomous flow.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RescaleComparison {
    pub times: Vec<f64>,
    /// `T₁(tᵢ)`.
    pub clock: Vec<f64>,
    /// `‖x(tᵢ) − w(T₁(tᵢ))‖`.
    pub discrepancies: Vec<f64>,
    pub max_discrepancy: f64,
}

/// Integrates both systems and compares them on `cfg.sample_times`.
pub fn rescaled_comparison(
    t: &OperatorHandle,
    s: &Schedule,
    x0: &Vector,
    cfg: &FlowConfig,
) -> Result<RescaleComparison> {
    cfg.validate()?;
    let direct = flow::integrate(t, s, x0, cfg)?;
    let clock = cfg
        .sample_times
        .iter()
        .map(|&ti| forward_time(s, ti))
        .collect::<Result<Vec<_>>>()?;

    // The clock is nondecreasing; flat stretches collapse to one sample.
    let mut unique: Vec<f64> = Vec::with_capacity(clock.len());
    for &c in &clock {
        if unique.last().is_none_or(|&u| c > u) {
            unique.push(c);
        }
    }
    let autonomous_states: Vec<Vector> = if unique.len() == 1 {
        vec![x0.clone()]
    } else {
        let one = Schedule::constant(1.0)?;
        let aut_cfg = FlowConfig::new(unique[unique.len() - 1], unique.clone(), cfg.method)?;
        flow::integrate(t, &one, x0, &aut_cfg)?.states
    };

    let discrepancies: Vec<f64> = clock
        .iter()
        .zip(&direct.states)
        .map(|(c, x)| {
            let k = unique.partition_point(|u| u < c);
            x.dist(&autonomous_states[k])
        })
        .collect();
    let max_discrepancy = discrepancies.iter().copied().fold(0.0, f64::max);
    Ok(RescaleComparison {
        times: cfg.sample_times.clone(),
        clock,
        discrepancies,
        max_discrepancy,
    })
}

/// `max_i ‖x(tᵢ) − w(T₁(tᵢ))‖`.
pub fn rescaled_equivalence(t: &OperatorHandle, s: &Schedule, x0: &Vector, cfg: &FlowConfig) -> Result<f64> {
    Ok(rescaled_comparison(t, s, x0, cfg)?.max_discrepancy)
}

/// Contract on [`rescaled_equivalence`]: `50 × tolerance × (1 + ‖x₀‖)`.
pub fn equivalence_tolerance(cfg: &FlowConfig, x0: &Vector) -> f64 {
    50.0 * cfg.tolerance() * (1.0 + x0.norm())
}
