//! Numerical integration of `ẋ(t) = λ(t)(T(x(t)) − x(t))`.
//!
//! The default integrator is Dormand-Prince 5(4) with step-size control.
//! Steps never straddle a schedule node, so the right-hand side is smooth
//! inside every step. States at the requested sample times come from cubic
//! Hermite interpolation inside accepted steps, corrected by the quartic
//! Dormand-Prince dense-output term; only sampled states are kept.

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::operators::OperatorHandle;
use crate::schedules::Schedule;
use crate::space::Vector;

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Rk45 { abs_tol: f64, rel_tol: f64 },
    Rk4 { h: f64 },
    Euler { h: f64 },
}

impl Default for Method {
    fn default() -> Self {
        Method::Rk45 { abs_tol: 1e-9, rel_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowConfig {
    pub t_end: f64,
    /// Strictly increasing, starting at `0`, ending at or before `t_end`.
    pub sample_times: Vec<f64>,
    pub method: Method,
    pub record_derivative: bool,
}

impl FlowConfig {
    pub fn new(t_end: f64, sample_times: Vec<f64>, method: Method) -> Result<Self> {
        let cfg = Self { t_end, sample_times, method, record_derivative: false };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `n` equally spaced samples on `[0, t_end]` (both ends included).
    pub fn uniform(t_end: f64, n: usize, method: Method) -> Result<Self> {
        if n < 2 {
            return Err(Error::Spec("uniform grid needs at least 2 samples".into()));
        }
        Self::new(t_end, linspace(t_end, n), method)
    }

    pub fn with_derivative(mut self, record: bool) -> Self {
        self.record_derivative = record;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(Error::Spec(format!("t_end must be positive, got {}", self.t_end)));
        }
        match self.method {
            Method::Rk45 { abs_tol, rel_tol } => {
                if !(abs_tol > 0.0 && rel_tol > 0.0) {
                    return Err(Error::Spec("rk45 tolerances must be positive".into()));
                }
            }
            Method::Rk4 { h } | Method::Euler { h } => {
                if !(h.is_finite() && h > 0.0) {
                    return Err(Error::Spec(format!("fixed step must be positive, got {h}")));
                }
            }
        }
        let s = &self.sample_times;
        if s.first() != Some(&0.0) {
            return Err(Error::Spec("sample times must start at t = 0".into()));
        }
        if !s.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Spec("sample times must be strictly increasing".into()));
        }
        if s[s.len() - 1] > self.t_end {
            return Err(Error::Spec(format!(
                "last sample time {} exceeds t_end = {}",
                s[s.len() - 1],
                self.t_end
            )));
        }
        Ok(())
    }

    /// Integrator tolerance scale, used to size self-consistency contracts.
    pub fn tolerance(&self) -> f64 {
        match self.method {
            Method::Rk45 { abs_tol, rel_tol } => abs_tol.max(rel_tol),
            Method::Rk4 { h } => h.powi(4),
            Method::Euler { h } => h,
        }
    }
}

pub fn linspace(t_end: f64, n: usize) -> Vec<f64> {
    let last = (n - 1) as f64;
    (0..n).map(|i| if i + 1 == n { t_end } else { t_end * i as f64 / last }).collect()
}

/// `0` followed by `n − 1` log-spaced samples on `[t_first, t_end]`.
pub fn logspace_with_origin(t_first: f64, t_end: f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0];
    let m = n.saturating_sub(1);
    if m == 1 {
        out.push(t_end);
    } else if m > 1 {
        let (l0, l1) = (t_first.ln(), t_end.ln());
        for i in 0..m {
            let t = if i + 1 == m { t_end } else { (l0 + (l1 - l0) * i as f64 / (m - 1) as f64).exp() };
            out.push(t);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMeta {
    pub operator: String,
    pub schedule: String,
    pub method: Method,
    pub t_end: f64,
    pub seed: Option<u64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Sampled solution of the flow together with per-sample diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    /// `‖T(x(t)) − x(t)‖`.
    pub residuals: Vec<f64>,
    /// `‖ẋ(t)‖ = λ(t)·residual`.
    pub speeds: Vec<f64>,
    pub derivatives: Option<Vec<Vector>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }

    /// Index of the sample closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            0
        } else if k >= self.times.len() {
            self.times.len() - 1
        } else if (self.times[k] - t).abs() < (t - self.times[k - 1]).abs() {
            k
        } else {
            k - 1
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.meta.seed = Some(seed);
        self
    }
}

/// `λ(t)·(T(x) − x)`.
pub fn derivative(t_op: &OperatorHandle, s: &Schedule, t: f64, x: &Vector) -> Result<Vector> {
    check_dim(t_op.dim(), x.dim())?;
    let lambda = s.eval(t)?;
    Ok(rhs(t_op, lambda, x))
}

fn rhs(t_op: &OperatorHandle, lambda: f64, x: &Vector) -> Vector {
    let tx = t_op.eval(x);
    tx.zip_map(x, |ti, xi| lambda * (ti - xi))
}

// Dormand-Prince 5(4).
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Shared stepping state: right-hand side, sample emission and guards.
struct Stepper<'a> {
    op: &'a OperatorHandle,
    schedule: &'a Schedule,
    samples: &'a [f64],
    next: usize,
    out: Vec<Vector>,
    blowup: f64,
    t_end: f64,
}

impl Stepper<'_> {
    /// Right-hand side on the segment ending at `seg_end`: stage times on
    /// the right boundary use the left limit of `λ`.
    fn f(&self, t: f64, seg_end: f64, x: &Vector) -> Vector {
        let lambda = if t >= seg_end { self.schedule.left_limit(seg_end) } else { self.schedule.value(t) };
        rhs(self.op, lambda, x)
    }

    fn guard(&self, t: f64, x: &Vector) -> Result<()> {
        if !x.is_finite() || x.norm() > self.blowup {
            Err(Error::Divergence { t })
        } else {
            Ok(())
        }
    }

    /// Emits every sample in `(t0, t1]`: cubic Hermite interpolation plus an
    /// optional `θ²(1−θ)²·c` correction term (the Dormand-Prince dense output).
    #[allow(clippy::too_many_arguments)]
    fn emit(
        &mut self,
        t0: f64,
        t1: f64,
        y0: &Vector,
        y1: &Vector,
        f0: &Vector,
        f1: &Vector,
        correction: Option<&Vector>,
    ) {
        let h = t1 - t0;
        while self.next < self.samples.len() && self.samples[self.next] <= t1 {
            let s = self.samples[self.next];
            let th = ((s - t0) / h).clamp(0.0, 1.0);
            let y = if th == 1.0 {
                y1.clone()
            } else {
                // y0 + θ(Δ + (1−θ)(hf0 − Δ + θ(Δ − hf1 − (hf0 − Δ) + (1−θ)c)))
                Vector::from_raw(
                    (0..y0.dim())
                        .map(|i| {
                            let d = y1[i] - y0[i];
                            let r3 = h * f0[i] - d;
                            let r4 = d - h * f1[i] - r3;
                            let r5 = correction.map_or(0.0, |c| c[i]);
                            y0[i] + th * (d + (1.0 - th) * (r3 + th * (r4 + (1.0 - th) * r5)))
                        })
                        .collect(),
                )
            };
            self.out.push(y);
            self.next += 1;
        }
    }
}

/// Integrates the flow from `x0` and samples it at `cfg.sample_times`.
pub fn integrate(t_op: &OperatorHandle, s: &Schedule, x0: &Vector, cfg: &FlowConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_dim(t_op.dim(), x0.dim())?;
    let mut st = Stepper {
        op: t_op,
        schedule: s,
        samples: &cfg.sample_times,
        next: 1,
        out: vec![x0.clone()],
        blowup: 1e12 * (1.0 + x0.norm()),
        t_end: cfg.t_end,
    };
    let (accepted, rejected) = match cfg.method {
        Method::Rk45 { abs_tol, rel_tol } => run_rk45(&mut st, x0, abs_tol, rel_tol)?,
        Method::Rk4 { h } => (run_fixed(&mut st, x0, h, rk4_step)?, 0),
        Method::Euler { h } => (run_fixed(&mut st, x0, h, euler_step)?, 0),
    };
    debug_assert_eq!(st.out.len(), cfg.sample_times.len());

    let states = st.out;
    let times = cfg.sample_times.clone();
    let mut residuals = Vec::with_capacity(states.len());
    let mut speeds = Vec::with_capacity(states.len());
    let mut derivatives = cfg.record_derivative.then(|| Vec::with_capacity(states.len()));
    for (t, x) in times.iter().zip(&states) {
        let lambda = s.value(*t);
        let diff = &t_op.eval(x) - x;
        let r = diff.norm();
        residuals.push(r);
        speeds.push(lambda * r);
        if let Some(d) = derivatives.as_mut() {
            d.push(lambda * &diff);
        }
    }
    Ok(Trajectory {
        times,
        states,
        residuals,
        speeds,
        derivatives,
        meta: TrajectoryMeta {
            operator: t_op.label().to_string(),
            schedule: s.to_string(),
            method: cfg.method,
            t_end: cfg.t_end,
            seed: None,
            accepted_steps: accepted,
            rejected_steps: rejected,
        },
    })
}

fn segments(s: &Schedule, t_end: f64) -> Vec<(f64, f64)> {
    let mut cuts = vec![0.0];
    cuts.extend(s.nodes().iter().copied().filter(|&n| n > 0.0 && n < t_end));
    cuts.push(t_end);
    cuts.windows(2).map(|w| (w[0], w[1])).collect()
}

fn error_norm(err: &Vector, y0: &Vector, y1: &Vector, abs_tol: f64, rel_tol: f64) -> f64 {
    let n = err.dim() as f64;
    let sum: f64 = (0..err.dim())
        .map(|i| {
            let sc = abs_tol + rel_tol * y0[i].abs().max(y1[i].abs());
            (err[i] / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn initial_step(st: &Stepper<'_>, t: f64, seg_end: f64, y: &Vector, f0: &Vector, abs_tol: f64, rel_tol: f64) -> f64 {
    let scale = |v: &Vector| {
        let n = v.dim() as f64;
        ((0..v.dim()).map(|i| (v[i] / (abs_tol + rel_tol * y[i].abs())).powi(2)).sum::<f64>() / n).sqrt()
    };
    let (d0, d1) = (scale(y), scale(f0));
    let span = seg_end - t;
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1 = y.axpy(h0, f0);
    let f1 = st.f(t + h0, seg_end, &y1);
    let d2 = scale(&(&f1 - f0)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

fn run_rk45(st: &mut Stepper<'_>, x0: &Vector, abs_tol: f64, rel_tol: f64) -> Result<(usize, usize)> {
    let h_min = 1e-14 * st.t_end;
    let (mut accepted, mut rejected) = (0, 0);
    let mut y = x0.clone();
    for (seg_start, seg_end) in segments(st.schedule, st.t_end) {
        let mut t = seg_start;
        let mut f0 = st.f(t, seg_end, &y);
        let mut h = initial_step(st, t, seg_end, &y, &f0, abs_tol, rel_tol);
        while t < seg_end {
            let remaining = seg_end - t;
            let last = h >= remaining * (1.0 - 1e-12);
            if last {
                h = remaining;
            }
            if h < h_min && remaining > h_min {
                return Err(Error::Numerical(format!("step size underflow at t = {t} (h = {h:e})")));
            }
            let mut k: Vec<Vector> = Vec::with_capacity(7);
            k.push(f0.clone());
            for stage in 1..7 {
                let mut ys = y.clone();
                for (j, kj) in k.iter().enumerate() {
                    let a = A[stage][j];
                    if a != 0.0 {
                        ys = ys.axpy(h * a, kj);
                    }
                }
                let ts = if stage >= 5 { t + h } else { t + C[stage] * h };
                if stage == 6 {
                    // Stage 7 is evaluated at the proposed new state (FSAL).
                    let f7 = st.f(ts, seg_end, &ys);
                    k.push(f7);
                    k.push(ys);
                    break;
                }
                k.push(st.f(ts, seg_end, &ys));
            }
            let y_new = k.pop().expect("new state");
            let mut err = Vector::zeros(y.dim());
            for (j, kj) in k.iter().enumerate() {
                if E[j] != 0.0 {
                    err = err.axpy(h * E[j], kj);
                }
            }
            let en = error_norm(&err, &y, &y_new, abs_tol, rel_tol);
            if en <= 1.0 {
                let t_new = if last { seg_end } else { t + h };
                st.guard(t_new, &y_new)?;
                let mut dense = Vector::zeros(y.dim());
                for (j, kj) in k.iter().enumerate() {
                    if D[j] != 0.0 {
                        dense = dense.axpy(h * D[j], kj);
                    }
                }
                let f_new = k.pop().expect("fsal stage");
                st.emit(t, t_new, &y, &y_new, &f0, &f_new, Some(&dense));
                t = t_new;
                y = y_new;
                f0 = f_new;
                accepted += 1;
                let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
                h *= fac;
            } else {
                rejected += 1;
                let fac = if en.is_finite() { (0.9 * en.powf(-0.2)).clamp(0.1, 1.0) } else { 0.1 };
                h *= fac;
            }
        }
    }
    Ok((accepted, rejected))
}

type FixedStep = fn(&Stepper<'_>, f64, f64, &Vector, &Vector) -> Vector;

fn euler_step(_: &Stepper<'_>, _t: f64, h: f64, y: &Vector, f0: &Vector) -> Vector {
    y.zip_map(f0, |yi, fi| yi + h * fi)
}

fn rk4_step(st: &Stepper<'_>, t: f64, h: f64, y: &Vector, f0: &Vector) -> Vector {
    let end = f64::INFINITY;
    let k2 = st.f(t + 0.5 * h, end, &y.axpy(0.5 * h, f0));
    let k3 = st.f(t + 0.5 * h, end, &y.axpy(0.5 * h, &k2));
    let k4 = st.f(t + h, end, &y.axpy(h, &k3));
    Vector::from_raw(
        (0..y.dim())
            .map(|i| y[i] + h / 6.0 * (f0[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect(),
    )
}

/// Fixed grid `t_k = k·h` (last step shortened to land on `t_end`).
fn run_fixed(st: &mut Stepper<'_>, x0: &Vector, h: f64, step: FixedStep) -> Result<usize> {
    let n = ((st.t_end / h) - 1e-9).ceil().max(1.0) as usize;
    let mut y = x0.clone();
    let mut t = 0.0;
    let mut f0 = st.f(t, f64::INFINITY, &y);
    for k in 1..=n {
        let t_new = if k == n { st.t_end } else { k as f64 * h };
        let y_new = step(st, t, t_new - t, &y, &f0);
        st.guard(t_new, &y_new)?;
        let f_new = st.f(t_new, f64::INFINITY, &y_new);
        st.emit(t, t_new, &y, &y_new, &f0, &f_new, None);
        t = t_new;
        y = y_new;
        f0 = f_new;
    }
    Ok(n)
}
