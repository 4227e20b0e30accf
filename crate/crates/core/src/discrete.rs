//! Discrete counterparts of the flow: Krasnosel'skiĭ-Mann and
//! forward-backward iterations with relaxations sampled from a [`Schedule`]
//! at integer times.

use crate::error::{check_dim, Error, Result};
use crate::flow::{self, FlowConfig, Method};
use crate::operators::{make_forward_backward, MonotoneSpec, OperatorHandle, SmoothSpec};
use crate::schedules::Schedule;
use crate::space::Vector;

/// Iterates of a relaxed fixed-point recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateLog {
    pub iterates: Vec<Vector>,
    /// `‖T(x_n) − x_n‖`.
    pub residuals: Vec<f64>,
    /// `λ_n` (the relaxation applied to leave iterate `n`).
    pub relaxations: Vec<f64>,
}

impl IterateLog {
    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn last(&self) -> &Vector {
        self.iterates.last().expect("log holds x0")
    }
}

/// `x_{n+1} = x_n + λ_n(Tx_n − x_n)` with `λ_n = s(n)`, `λ_n ∈ [0, ceiling]`.
fn relaxed_iterate(
    t: &OperatorHandle,
    s: &Schedule,
    x0: &Vector,
    n_steps: usize,
    ceiling: f64,
) -> Result<IterateLog> {
    check_dim(t.dim(), x0.dim())?;
    let mut log = IterateLog {
        iterates: Vec::with_capacity(n_steps + 1),
        residuals: Vec::with_capacity(n_steps + 1),
        relaxations: Vec::with_capacity(n_steps + 1),
    };
    let mut x = x0.clone();
    for n in 0..=n_steps {
        let lambda = s.value(n as f64);
        if !(0.0..=ceiling).contains(&lambda) {
            return Err(Error::Spec(format!(
                "relaxation lambda_{n} = {lambda} outside [0, {ceiling}]"
            )));
        }
        let tx = t.eval(&x);
        log.residuals.push(tx.dist(&x));
        log.relaxations.push(lambda);
        let next = x.zip_map(&tx, |xi, ti| xi + lambda * (ti - xi));
        log.iterates.push(x);
        if n == n_steps {
            break;
        }
        if !next.is_finite() {
            return Err(Error::Divergence { t: (n + 1) as f64 });
        }
        x = next;
    }
    Ok(log)
}

/// Krasnosel'skiĭ-Mann iteration; relaxations must lie in `[0, 1]`.
pub fn km_iterate(t: &OperatorHandle, lam: &Schedule, x0: &Vector, n_steps: usize) -> Result<IterateLog> {
    relaxed_iterate(t, lam, x0, n_steps, 1.0)
}

/// Relaxed forward-backward iteration
/// `x_{n+1} = x_n + λ_n(J_{γA}(x_n − γBx_n) − x_n)` with `λ_n ∈ [0, δ]`.
pub fn fb_iterate(
    a: &MonotoneSpec,
    b: &SmoothSpec,
    gamma: f64,
    lam: &Schedule,
    x0: &Vector,
    n_steps: usize,
) -> Result<IterateLog> {
    let (t, delta) = make_forward_backward(a, b, gamma)?;
    relaxed_iterate(&t, lam, x0, n_steps, delta)
}

/// Largest gap between explicit Euler with unit step (sampled at integer
/// times) and the KM iteration with `λ_n = s(n)`. The two recursions are
/// the same arithmetic, so the gap is expected to vanish.
pub fn euler_equals_km(t: &OperatorHandle, s: &Schedule, x0: &Vector, n_steps: usize) -> Result<f64> {
    let km = km_iterate(t, s, x0, n_steps)?;
    if n_steps == 0 {
        return Ok(0.0);
    }
    let times: Vec<f64> = (0..=n_steps).map(|n| n as f64).collect();
    let cfg = FlowConfig::new(n_steps as f64, times, Method::Euler { h: 1.0 })?;
    let traj = flow::integrate(t, s, x0, &cfg)?;
    Ok(traj
        .states
        .iter()
        .zip(&km.iterates)
        .map(|(e, k)| e.dist(k))
        .fold(0.0, f64::max))
}
