//! Post-hoc diagnostics on recorded trajectories: Fejér/Lyapunov decrease,
//! the `O(1/√t)` residual bound, the `o(1/√t)` tail inequality,
//! forward-backward specific checks, and empirical rate exponents.

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::flow::{Method, Trajectory};
use crate::operators::SmoothSpec;
use crate::schedules::Schedule;
use crate::space::Vector;

/// Number of dyadic checkpoints `t_end/2ᵏ`, `k = 0..LEVELS`, used by
/// [`little_o_check`] when no explicit count is given.
pub const DYADIC_LEVELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub reference: Vector,
    /// `‖x(tᵢ) − y‖²`.
    pub dist_sq: Vec<f64>,
    /// Forward differences of `dist_sq`.
    pub differences: Vec<f64>,
    pub slack: f64,
    /// All forward differences are `≤ slack`.
    pub pass: bool,
    pub first_violation: Option<usize>,
    /// `‖x(tᵢ) − y‖` nonincreasing within `1e−9(1 + ‖x₀ − y‖)`.
    pub fejer_pass: bool,
    /// Largest increase between consecutive residuals.
    pub residual_max_increase: f64,
    /// Residuals nonincreasing within `1e−9`.
    pub residual_pass: bool,
}

/// Squared-distance decrease along the trajectory towards `y`.
pub fn lyapunov_report(traj: &Trajectory, y: &Vector) -> Result<LyapunovReport> {
    let x0 = traj.states.first().ok_or_else(|| Error::InsufficientData("empty trajectory".into()))?;
    check_dim(x0.dim(), y.dim())?;
    let dist: Vec<f64> = traj.states.iter().map(|x| x.dist(y)).collect();
    let dist_sq: Vec<f64> = dist.iter().map(|d| d * d).collect();
    let differences: Vec<f64> = dist_sq.windows(2).map(|w| w[1] - w[0]).collect();
    let slack = 1e-9 * (1.0 + dist_sq[0]);
    let first_violation = differences.iter().position(|&d| d > slack).map(|i| i + 1);
    let fejer_slack = 1e-9 * (1.0 + dist[0]);
    let fejer_pass = dist.windows(2).all(|w| w[1] - w[0] <= fejer_slack);
    let residual_max_increase = traj
        .residuals
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(LyapunovReport {
        reference: y.clone(),
        dist_sq,
        differences,
        slack,
        pass: first_violation.is_none(),
        first_violation,
        fejer_pass,
        residual_max_increase,
        residual_pass: traj.residuals.len() < 2 || residual_max_increase <= 1e-9,
    })
}

/// Check of `‖T(x(t)) − x(t)‖ ≤ d(x₀, Fix T)/√(τ̲t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    /// `min λ(1−λ)` over the sample grid.
    pub tau_lower: f64,
    pub dist0: f64,
    /// Per-sample `residual·√(τ̲t) − dist0`; `None` at `t = 0`.
    pub margins: Vec<Option<f64>>,
    /// Largest margin; nonpositive when the bound holds.
    pub bound_margin: f64,
    pub bound_pass: bool,
    /// `‖ẋ(t)‖ ≤ ‖T(x(t)) − x(t)‖` at every sample.
    pub speed_pass: bool,
    pub pass: bool,
}

fn strict_bounds(traj: &Trajectory, s: &Schedule) -> Result<f64> {
    let (inf, sup) = s.range_on(0.0, traj.final_time());
    if !(inf > 0.0 && sup < 1.0) {
        return Err(Error::Precondition(format!(
            "rate bounds need 0 < inf λ <= sup λ < 1 on the run horizon, schedule {s} has range [{inf}, {sup}]"
        )));
    }
    Ok(traj
        .times
        .iter()
        .map(|&t| {
            let l = s.value(t);
            l * (1.0 - l)
        })
        .fold(f64::INFINITY, f64::min))
}

pub fn rate_bound_check(traj: &Trajectory, s: &Schedule, dist0: f64) -> Result<RateReport> {
    let tau = strict_bounds(traj, s)?;
    let mut margins = Vec::with_capacity(traj.len());
    let mut bound_margin = f64::NEG_INFINITY;
    let mut bound_pass = true;
    for (&t, &r) in traj.times.iter().zip(&traj.residuals) {
        if t <= 0.0 {
            margins.push(None);
            continue;
        }
        let scale = (tau * t).sqrt();
        let m = r * scale - dist0;
        bound_margin = bound_margin.max(m);
        margins.push(Some(m));
        if r > dist0 / scale + 1e-9 {
            bound_pass = false;
        }
    }
    let speed_pass = traj
        .speeds
        .iter()
        .zip(&traj.residuals)
        .all(|(v, r)| *v <= r * (1.0 + 1e-12));
    Ok(RateReport {
        tau_lower: tau,
        dist0,
        margins,
        bound_margin,
        bound_pass,
        speed_pass,
        pass: bound_pass && speed_pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub t: f64,
    /// `t·‖T(x(t)) − x(t)‖²`.
    pub lhs: f64,
    /// `(2/τ̲)·∫_{t/2}^t λ(1−λ)‖T(x) − x‖²`.
    pub rhs: f64,
    pub tail_integral: f64,
    /// `√t·‖T(x(t)) − x(t)‖`.
    pub sqrt_t_residual: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LittleOReport {
    pub tau_lower: f64,
    /// Increasing in `t`, ending at `t_end`.
    pub checkpoints: Vec<Checkpoint>,
    pub inequality_pass: bool,
    /// Residual accuracy of the integrator, `10·tol·(1 + ‖x₀‖)`.
    pub noise_floor: f64,
    /// Tail integrals and `√t·residual` nonincreasing within 5% over the
    /// later half of the checkpoints, up to the noise floor.
    pub trend_pass: bool,
    pub pass: bool,
}

/// Piecewise-linear interpolation of `values` on the trajectory grid.
fn interp(times: &[f64], values: &[f64], t: f64) -> f64 {
    let k = times.partition_point(|&s| s < t);
    if k == 0 {
        return values[0];
    }
    if k >= times.len() {
        return values[values.len() - 1];
    }
    if times[k] == t {
        return values[k];
    }
    let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
    values[k - 1] + w * (values[k] - values[k - 1])
}

/// Trapezoid rule for `∫ₐᵇ` of grid data, with interpolated end values.
fn trapezoid(times: &[f64], values: &[f64], a: f64, b: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = vec![(a, interp(times, values, a))];
    pts.extend(times.iter().zip(values).filter(|(t, _)| **t > a && **t < b).map(|(t, v)| (*t, *v)));
    pts.push((b, interp(times, values, b)));
    pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

/// Dyadic-checkpoint test of
/// `t‖T(x(t))−x(t)‖² ≤ (2/τ̲)∫_{t/2}^t λ(1−λ)‖T(x)−x‖²` with
/// [`DYADIC_LEVELS`] checkpoints.
pub fn little_o_check(traj: &Trajectory, s: &Schedule) -> Result<LittleOReport> {
    little_o_check_levels(traj, s, DYADIC_LEVELS)
}

pub fn little_o_check_levels(traj: &Trajectory, s: &Schedule, levels: usize) -> Result<LittleOReport> {
    let tau = strict_bounds(traj, s)?;
    let t_end = traj.final_time();
    let first_positive = traj.times.iter().copied().find(|&t| t > 0.0).unwrap_or(t_end);
    let weighted: Vec<f64> = traj
        .times
        .iter()
        .zip(&traj.residuals)
        .map(|(&t, &r)| {
            let l = s.value(t);
            l * (1.0 - l) * r * r
        })
        .collect();

    let mut checkpoints = Vec::new();
    for k in (0..levels).rev() {
        let t = t_end / 2f64.powi(k as i32);
        if t / 2.0 < first_positive {
            continue;
        }
        let r = interp(&traj.times, &traj.residuals, t);
        let lhs = t * r * r;
        let tail = trapezoid(&traj.times, &weighted, t / 2.0, t);
        let rhs = 2.0 / tau * tail;
        checkpoints.push(Checkpoint {
            t,
            lhs,
            rhs,
            tail_integral: tail,
            sqrt_t_residual: t.sqrt() * r,
            holds: lhs <= rhs * (1.0 + 1e-6) + 1e-12,
        });
    }
    if checkpoints.is_empty() {
        return Err(Error::InsufficientData("no dyadic checkpoint fits the sample grid".into()));
    }
    let inequality_pass = checkpoints.iter().all(|c| c.holds);
    let noise_floor = noise_floor(traj);
    let late = &checkpoints[checkpoints.len() / 2..];
    let trend_pass = late.windows(2).all(|w| {
        let t = w[1].t;
        w[1].tail_integral <= 1.05 * w[0].tail_integral + t * noise_floor * noise_floor
            && w[1].sqrt_t_residual <= 1.05 * w[0].sqrt_t_residual + t.sqrt() * noise_floor
    });
    Ok(LittleOReport {
        tau_lower: tau,
        checkpoints,
        inequality_pass,
        noise_floor,
        trend_pass,
        pass: inequality_pass && trend_pass,
    })
}

fn noise_floor(traj: &Trajectory) -> f64 {
    let tol = match traj.meta.method {
        Method::Rk45 { abs_tol, rel_tol } => abs_tol.max(rel_tol),
        Method::Rk4 { h } => h.powi(4),
        Method::Euler { h } => h,
    };
    10.0 * tol * (1.0 + traj.states[0].norm())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FbReport {
    /// `‖B(x(tᵢ)) − B(z)‖` for the first known zero `z`.
    pub gradient_gaps: Vec<f64>,
    /// `‖x(tᵢ) − z‖`.
    pub distances: Vec<f64>,
    pub final_gap: f64,
    pub gap_tolerance: f64,
    /// Largest `‖B(zᵢ) − B(z₀)‖` across the known zeros.
    pub zero_disagreement: f64,
    pub zeros_agree: bool,
    pub pass: bool,
}

/// Forward-backward diagnostics: `B(x(t)) → B(z)` and `B` constant on the
/// known zeros of `A + B`.
pub fn fb_diagnostics(traj: &Trajectory, b: &SmoothSpec, known_zeros: &[Vector]) -> Result<FbReport> {
    let z = known_zeros
        .first()
        .ok_or_else(|| Error::InsufficientData("forward-backward diagnostics need a known zero".into()))?;
    let bz = b.gradient(z)?;
    let mut gradient_gaps = Vec::with_capacity(traj.len());
    let mut distances = Vec::with_capacity(traj.len());
    for x in &traj.states {
        gradient_gaps.push(b.gradient(x)?.dist(&bz));
        distances.push(x.dist(z));
    }
    let mut zero_disagreement: f64 = 0.0;
    for other in &known_zeros[1..] {
        zero_disagreement = zero_disagreement.max(b.gradient(other)?.dist(&bz));
    }
    let final_gap = *gradient_gaps.last().unwrap_or(&0.0);
    let gap_tolerance = 1e-6 * (1.0 + bz.norm());
    let zeros_agree = zero_disagreement <= 1e-9;
    Ok(FbReport {
        gradient_gaps,
        distances,
        final_gap,
        gap_tolerance,
        zero_disagreement,
        zeros_agree,
        pass: final_gap <= gap_tolerance && zeros_agree,
    })
}

/// Least-squares slope of `ln value` against `ln t` over samples in
/// `[lo, hi]` with `t > 0` and `value > 0`.
pub fn fit_log_log_slope(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= window.0 && **t <= window.1 && **t > 0.0 && **v > 0.0)
        .map(|(t, v)| (t.ln(), v.ln()))
        .collect();
    if pts.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "slope fit needs at least 4 positive samples in [{}, {}], found {}",
            window.0,
            window.1,
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientData("slope fit needs distinct sample times".into()));
    }
    Ok(sxy / sxx)
}

/// Empirical rate exponent of the residual over `window`.
pub fn slope_fit(traj: &Trajectory, window: (f64, f64)) -> Result<f64> {
    fit_log_log_slope(&traj.times, &traj.residuals, window)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    /// `∫₀^{t_end} ‖ẋ‖²` by the trapezoid rule.
    pub total: f64,
    /// `∫_{t_end/2}^{t_end} ‖ẋ‖²`.
    pub second_half: f64,
    pub pass: bool,
}

/// Integrability surrogate: the second half of the horizon contributes at
/// most 10% of the kinetic energy integral.
pub fn energy_report(traj: &Trajectory) -> EnergyReport {
    let sq: Vec<f64> = traj.speeds.iter().map(|v| v * v).collect();
    let t_end = traj.final_time();
    let total = trapezoid(&traj.times, &sq, 0.0, t_end);
    let second_half = trapezoid(&traj.times, &sq, t_end / 2.0, t_end);
    EnergyReport { total, second_half, pass: second_half <= 0.1 * total || total == 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{self, FlowConfig, TrajectoryMeta};
    use crate::operators::OperatorHandle;
    use std::f64::consts::FRAC_PI_2;

    fn v(c: &[f64]) -> Vector {
        Vector::from_slice(c).unwrap()
    }

    fn synthetic(times: Vec<f64>, residuals: Vec<f64>) -> Trajectory {
        let n = times.len();
        Trajectory {
            states: vec![Vector::zeros(1); n],
            speeds: residuals.clone(),
            residuals,
            times,
            derivatives: None,
            meta: TrajectoryMeta {
                operator: "synthetic".into(),
                schedule: "none".into(),
                method: Method::default(),
                t_end: 0.0,
                seed: None,
                accepted_steps: 0,
                rejected_steps: 0,
            },
        }
    }

    fn rotation_run(t_end: f64, n: usize) -> (Trajectory, Schedule) {
        let s = Schedule::constant(0.5).unwrap();
        let cfg = FlowConfig::uniform(t_end, n, Method::default()).unwrap();
        let traj = flow::integrate(&OperatorHandle::rotation(FRAC_PI_2), &s, &v(&[1.0, 0.0]), &cfg).unwrap();
        (traj, s)
    }

    #[test]
    fn lyapunov_identity_flow() {
        let x0 = v(&[1.0, 2.0]);
        let cfg = FlowConfig::uniform(3.0, 7, Method::default()).unwrap();
        let traj = flow::integrate(&OperatorHandle::identity(2), &Schedule::constant(1.0).unwrap(), &x0, &cfg).unwrap();
        let rep = lyapunov_report(&traj, &x0).unwrap();
        assert!(rep.pass && rep.fejer_pass && rep.residual_pass);
        assert!(rep.dist_sq.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn lyapunov_negative_identity_closed_form() {
        let x0 = v(&[1.0, -1.0]);
        let cfg = FlowConfig::uniform(2.0, 21, Method::default()).unwrap();
        let traj = flow::integrate(&OperatorHandle::scaled_identity(2, -1.0), &Schedule::constant(1.0).unwrap(), &x0, &cfg).unwrap();
        let rep = lyapunov_report(&traj, &Vector::zeros(2)).unwrap();
        assert!(rep.pass);
        assert!(rep.differences.iter().all(|&d| d < 0.0));
        for (t, d) in traj.times.iter().zip(&rep.dist_sq) {
            assert!((d - 2.0 * (-4.0 * t).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn lyapunov_negative_control() {
        let (mut traj, _) = rotation_run(5.0, 11);
        traj.states[6] = 2.0 * &traj.states[6];
        let rep = lyapunov_report(&traj, &Vector::zeros(2)).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.first_violation, Some(6));
        assert!(lyapunov_report(&traj, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn rate_bound_rotation() {
        let (traj, s) = rotation_run(50.0, 501);
        let rep = rate_bound_check(&traj, &s, 1.0).unwrap();
        assert_eq!(rep.tau_lower, 0.25);
        assert!(rep.pass && rep.bound_margin <= 0.0);
        for (t, r) in traj.times.iter().zip(&traj.residuals).skip(1) {
            assert!(*r <= 2.0 / t.sqrt() + 1e-9);
        }
    }

    #[test]
    fn rate_bound_identity_and_precondition() {
        let cfg = FlowConfig::uniform(2.0, 5, Method::default()).unwrap();
        let s = Schedule::constant(0.3).unwrap();
        let traj = flow::integrate(&OperatorHandle::identity(1), &s, &v(&[1.0]), &cfg).unwrap();
        assert!(rate_bound_check(&traj, &s, 0.0).unwrap().pass);
        let one = Schedule::constant(1.0).unwrap();
        assert!(matches!(rate_bound_check(&traj, &one, 0.0), Err(Error::Precondition(_))));
        let zero = Schedule::constant(0.0).unwrap();
        assert!(matches!(rate_bound_check(&traj, &zero, 0.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn little_o_rotation() {
        let (traj, s) = rotation_run(64.0, 1281);
        let rep = little_o_check(&traj, &s).unwrap();
        assert_eq!(rep.checkpoints.len(), DYADIC_LEVELS);
        assert_eq!(rep.checkpoints.last().unwrap().t, 64.0);
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn little_o_identity_and_negative_identity() {
        let cfg = FlowConfig::uniform(8.0, 81, Method::default()).unwrap();
        let s = Schedule::constant(0.5).unwrap();
        let traj = flow::integrate(&OperatorHandle::identity(1), &s, &v(&[1.0]), &cfg).unwrap();
        let rep = little_o_check(&traj, &s).unwrap();
        assert!(rep.pass && rep.checkpoints.iter().all(|c| c.lhs == 0.0 && c.rhs == 0.0));
        let traj = flow::integrate(&OperatorHandle::scaled_identity(1, -1.0), &s, &v(&[1.0]), &cfg).unwrap();
        assert!(little_o_check(&traj, &s).unwrap().pass);
    }

    #[test]
    fn slope_examples() {
        let times: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let res: Vec<f64> = times.iter().map(|t| 3.0 / t.sqrt()).collect();
        let slope = slope_fit(&synthetic(times.clone(), res), (1.0, 20.0)).unwrap();
        assert!((slope + 0.5).abs() < 1e-6);

        let times: Vec<f64> = (10..=100).map(|i| i as f64).collect();
        let res: Vec<f64> = times.iter().map(|t| 2.0 * (-t).exp()).collect();
        assert!(slope_fit(&synthetic(times, res), (10.0, 100.0)).unwrap() < -2.0);

        let zeros = synthetic(vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![0.0; 5]);
        assert!(matches!(slope_fit(&zeros, (0.0, 4.0)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn trapezoid_and_interp() {
        let t = [0.0, 1.0, 2.0];
        let y = [0.0, 1.0, 2.0];
        assert_eq!(interp(&t, &y, 1.5), 1.5);
        assert!((trapezoid(&t, &y, 0.5, 2.0) - (2.0 - 0.125)).abs() < 1e-15);
    }

    #[test]
    fn energy_integrable_on_rotation() {
        let (traj, _) = rotation_run(40.0, 401);
        let rep = energy_report(&traj);
        assert!(rep.pass && rep.total > 0.0);
    }
}
