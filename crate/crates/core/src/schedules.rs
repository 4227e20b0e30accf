//! Relaxation schedules `λ(t)` on `[0, ∞)` with closed-form integrals and
//! the convergence-condition predicates behind the convergence results.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// Shape of the relaxation function.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant { value: f64 },
    /// `λ(t) = a / (t + 1)`.
    Hyperbolic { a: f64 },
    /// `values[0]` on `[0, b₁)`, `values[k]` on `[b_k, b_{k+1})`, the last
    /// value on `[b_last, ∞)`. Pieces are closed on the left.
    PiecewiseConstant { breakpoints: Vec<f64>, values: Vec<f64> },
    /// Linear interpolation through `(times[i], values[i])`, `times[0] = 0`,
    /// held constant after the last node.
    Table { times: Vec<f64>, values: Vec<f64> },
}

/// A relaxation function `λ : [0, ∞) → [0, lambda_max]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    #[serde(flatten)]
    kind: ScheduleKind,
    lambda_max: f64,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ScheduleKind::Constant { value } => write!(f, "constant({value})"),
            ScheduleKind::Hyperbolic { a } => write!(f, "hyperbolic({a})"),
            ScheduleKind::PiecewiseConstant { breakpoints, values } => {
                write!(f, "piecewise(breakpoints={breakpoints:?}, values={values:?})")
            }
            ScheduleKind::Table { times, .. } => write!(f, "table({} nodes)", times.len()),
        }
    }
}

fn finite_nonneg(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(Error::Spec(format!("{name} must be finite and non-negative, got {x}")))
    }
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl Schedule {
    pub fn new(kind: ScheduleKind, lambda_max: f64) -> Result<Self> {
        if !(lambda_max.is_finite() && lambda_max > 0.0) {
            return Err(Error::Spec(format!(
                "schedule upper bound must be positive, got lambda_max = {lambda_max}"
            )));
        }
        match &kind {
            ScheduleKind::Constant { value } => finite_nonneg("constant value", *value)?,
            ScheduleKind::Hyperbolic { a } => finite_nonneg("hyperbolic numerator", *a)?,
            ScheduleKind::PiecewiseConstant { breakpoints, values } => {
                if values.len() != breakpoints.len() + 1 {
                    return Err(Error::Spec(format!(
                        "piecewise schedule needs one more value than breakpoints ({} breakpoints, {} values)",
                        breakpoints.len(),
                        values.len()
                    )));
                }
                if breakpoints.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
                    return Err(Error::Spec("piecewise breakpoints must be finite and positive".into()));
                }
                if !strictly_increasing(breakpoints) {
                    return Err(Error::Spec("piecewise breakpoints must be strictly increasing".into()));
                }
                for v in values {
                    finite_nonneg("piecewise value", *v)?;
                }
            }
            ScheduleKind::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::Spec("table schedule needs equal, non-empty time and value lists".into()));
                }
                if times[0] != 0.0 {
                    return Err(Error::Spec("table schedule must start at t = 0".into()));
                }
                if times.iter().any(|t| !t.is_finite()) || !strictly_increasing(times) {
                    return Err(Error::Spec("table times must be finite and strictly increasing".into()));
                }
                for v in values {
                    finite_nonneg("table value", *v)?;
                }
            }
        }
        let s = Self { kind, lambda_max };
        s.spot_check()?;
        Ok(s)
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(ScheduleKind::Constant { value }, value.max(1.0))
    }

    pub fn hyperbolic(a: f64) -> Result<Self> {
        Self::new(ScheduleKind::Hyperbolic { a }, a.max(1.0))
    }

    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let max = values.iter().copied().fold(1.0, f64::max);
        Self::new(ScheduleKind::PiecewiseConstant { breakpoints, values }, max)
    }

    pub fn table(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let max = values.iter().copied().fold(1.0, f64::max);
        Self::new(ScheduleKind::Table { times, values }, max)
    }

    /// Same shape with a different declared upper bound.
    pub fn with_lambda_max(self, lambda_max: f64) -> Result<Self> {
        Self::new(self.kind, lambda_max)
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Values on a dense grid (and at every node) must stay in `[0, lambda_max]`.
    fn spot_check(&self) -> Result<()> {
        let end = self.nodes().last().copied().unwrap_or(0.0).max(10.0) * 2.0;
        let grid = (0..=2000).map(|i| end * i as f64 / 2000.0);
        for t in grid.chain(self.nodes().iter().copied()) {
            let v = self.value(t);
            if !(0.0..=self.lambda_max).contains(&v) {
                return Err(Error::Spec(format!(
                    "schedule value {v} at t = {t} lies outside [0, {}]",
                    self.lambda_max
                )));
            }
        }
        Ok(())
    }

    /// Points where the schedule is not smooth; integrators step onto them.
    pub fn nodes(&self) -> &[f64] {
        match &self.kind {
            ScheduleKind::PiecewiseConstant { breakpoints, .. } => breakpoints,
            ScheduleKind::Table { times, .. } => &times[1..],
            _ => &[],
        }
    }

    /// `λ(t)`; `t` must be a non-negative number.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("schedule evaluated at t = {t} < 0")));
        }
        Ok(self.value(t))
    }

    pub(crate) fn value(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Constant { value } => *value,
            ScheduleKind::Hyperbolic { a } => a / (t + 1.0),
            ScheduleKind::PiecewiseConstant { breakpoints, values } => {
                values[breakpoints.partition_point(|&b| b <= t)]
            }
            ScheduleKind::Table { times, values } => {
                let k = times.partition_point(|&s| s <= t);
                if k >= times.len() {
                    return values[values.len() - 1];
                }
                let (t0, t1) = (times[k - 1], times[k]);
                let w = (t - t0) / (t1 - t0);
                values[k - 1] + w * (values[k] - values[k - 1])
            }
        }
    }

    /// `lim_{s↑t} λ(s)`; differs from `λ(t)` only at piecewise breakpoints.
    pub(crate) fn left_limit(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::PiecewiseConstant { breakpoints, values } => {
                values[breakpoints.partition_point(|&b| b < t)]
            }
            _ => self.value(t),
        }
    }

    /// Exact infimum and supremum of `λ` over `[t0, t1]`.
    pub fn range_on(&self, t0: f64, t1: f64) -> (f64, f64) {
        match &self.kind {
            ScheduleKind::Constant { value } => (*value, *value),
            ScheduleKind::Hyperbolic { a } => (a / (t1 + 1.0), a / (t0 + 1.0)),
            _ => {
                let mut pts = vec![t0, t1];
                pts.extend(self.nodes().iter().copied().filter(|&n| n > t0 && n <= t1));
                pts.iter().map(|&t| self.value(t)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
            }
        }
    }

    /// `∫ₐᵇ λ(t) dt`.
    pub fn integral_lambda(&self, a: f64, b: f64) -> Result<f64> {
        check_interval(a, b)?;
        Ok(match &self.kind {
            ScheduleKind::Constant { value } => value * (b - a),
            ScheduleKind::Hyperbolic { a: num } => num * log_ratio(a, b),
            ScheduleKind::PiecewiseConstant { .. } => self.piecewise_sum(a, b, |v| v),
            ScheduleKind::Table { .. } => self.segmented_quadrature(a, b, |l| l),
        })
    }

    /// `∫ₐᵇ λ(t)(ceiling − λ(t)) dt`; `ceiling = 1` gives `∫λ(1−λ)`.
    pub fn integral_damped(&self, a: f64, b: f64, ceiling: f64) -> Result<f64> {
        check_interval(a, b)?;
        if !(ceiling.is_finite() && ceiling > 0.0) {
            return Err(Error::Domain(format!("ceiling must be positive, got {ceiling}")));
        }
        Ok(match &self.kind {
            ScheduleKind::Constant { value } => value * (ceiling - value) * (b - a),
            ScheduleKind::Hyperbolic { a: num } => {
                let reciprocal_gap = (b - a) / ((1.0 + a) * (1.0 + b));
                num * ceiling * log_ratio(a, b) - num * num * reciprocal_gap
            }
            ScheduleKind::PiecewiseConstant { .. } => self.piecewise_sum(a, b, |v| v * (ceiling - v)),
            ScheduleKind::Table { .. } => self.segmented_quadrature(a, b, |l| l * (ceiling - l)),
        })
    }

    fn piecewise_sum(&self, a: f64, b: f64, g: impl Fn(f64) -> f64) -> f64 {
        let ScheduleKind::PiecewiseConstant { breakpoints, values } = &self.kind else {
            unreachable!()
        };
        let mut total = 0.0;
        let mut lo = 0.0f64;
        for (k, &v) in values.iter().enumerate() {
            let hi = breakpoints.get(k).copied().unwrap_or(f64::INFINITY);
            let len = hi.min(b) - lo.max(a);
            if len > 0.0 {
                total += g(v) * len;
            }
            lo = hi;
        }
        total
    }

    /// Adaptive Simpson on each smooth segment between nodes.
    fn segmented_quadrature(&self, a: f64, b: f64, g: impl Fn(f64) -> f64) -> f64 {
        let mut cuts = vec![a];
        cuts.extend(self.nodes().iter().copied().filter(|&n| n > a && n < b));
        cuts.push(b);
        cuts.windows(2)
            .map(|w| adaptive_simpson(&|t| g(self.value(t)), w[0], w[1], 1e-10 / cuts.len() as f64))
            .sum()
    }

    /// Evidence for the convergence hypotheses over `[0, horizon]`.
    pub fn check_conditions(&self, horizon: f64, ceiling: f64) -> ConditionReport {
        let horizon = if horizon > 0.0 { horizon } else { 1.0 };
        let ceiling = if ceiling > 0.0 { ceiling } else { 1.0 };
        let (inf_lambda, _) = self.range_on(0.0, horizon);

        // Symbolic verdicts from the tail behaviour of each kind.
        let (tail, min_all) = match &self.kind {
            ScheduleKind::Constant { value } => (Tail::Value(*value), *value),
            ScheduleKind::Hyperbolic { a } => (Tail::Hyperbolic(*a), 0.0),
            ScheduleKind::PiecewiseConstant { values, .. } | ScheduleKind::Table { values, .. } => (
                Tail::Value(values[values.len() - 1]),
                values.iter().copied().fold(f64::INFINITY, f64::min),
            ),
        };
        let (damped_diverges, lambda_diverges) = match tail {
            Tail::Value(v) => (v * (ceiling - v) > 0.0, v > 0.0),
            Tail::Hyperbolic(a) => (a > 0.0, a > 0.0),
        };

        let damped = |t| self.integral_damped(0.0, t, ceiling).expect("valid interval");
        let plain = |t| self.integral_lambda(0.0, t).expect("valid interval");
        ConditionReport {
            horizon,
            ceiling,
            inf_lambda,
            positive_infimum: Verdict::new(min_all > 0.0, inf_lambda > 0.0, inf_lambda),
            damped_integral_diverges: Verdict::new(
                damped_diverges,
                growth_heuristic(damped(horizon), damped(horizon / 2.0)),
                damped(horizon),
            ),
            lambda_integral_diverges: Verdict::new(
                lambda_diverges,
                growth_heuristic(plain(horizon), plain(horizon / 2.0)),
                plain(horizon),
            ),
        }
    }
}

enum Tail {
    Value(f64),
    Hyperbolic(f64),
}

/// Linear-growth test: the integral over `[0, h]` is positive and at least
/// twice the integral over `[0, h/2]`.
fn growth_heuristic(full: f64, half: f64) -> bool {
    let tol = 1e-9 * (1.0 + full.abs());
    full > tol && full >= 2.0 * half - tol
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if a >= 0.0 && b >= a && b.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("integration interval [{a}, {b}] must satisfy 0 <= a <= b < inf")))
    }
}

/// `ln((1+b)/(1+a))`.
fn log_ratio(a: f64, b: f64) -> f64 {
    ((b - a) / (1.0 + a)).ln_1p()
}

pub(crate) fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 48)
}

/// One convergence hypothesis: the symbolic verdict when the schedule kind
/// allows one, plus the finite-horizon numeric evidence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub holds: bool,
    pub exact: bool,
    pub numeric_evidence: bool,
    /// Infimum estimate or integral value over the horizon.
    pub value: f64,
}

impl Verdict {
    fn new(exact: bool, numeric_evidence: bool, value: f64) -> Self {
        Self { holds: exact, exact, numeric_evidence, value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub horizon: f64,
    pub ceiling: f64,
    pub inf_lambda: f64,
    /// `inf λ > 0`.
    pub positive_infimum: Verdict,
    /// `∫₀^∞ λ(ceiling − λ) = ∞`.
    pub damped_integral_diverges: Verdict,
    /// `∫₀^∞ λ = ∞`.
    pub lambda_integral_diverges: Verdict,
}
