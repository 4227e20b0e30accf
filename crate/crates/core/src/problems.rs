//! Canonical instances with known solution sets.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::operators::{
    make_forward_backward, make_resolvent, MonotoneKind, MonotoneSpec, OperatorHandle, SmoothSpec,
};
use crate::space::Vector;

/// Step and averagedness constants attached to a problem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Constants {
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub delta: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub operator: OperatorHandle,
    pub constants: Constants,
    /// Points of `Fix T`, each with residual `≤ 1e−9`.
    pub known_fixed_points: Vec<Vector>,
    /// `Fix T` is exactly `known_fixed_points` (a single point).
    pub fixed_point_unique: bool,
    pub monotone: Option<MonotoneSpec>,
    pub smooth: Option<SmoothSpec>,
    /// Largest admissible relaxation: `δ` for forward-backward, 1 otherwise.
    pub lambda_max: f64,
    /// How the reference fixed points were obtained.
    pub provenance: String,
}

impl ProblemSpec {
    /// `d(x₀, Fix T)` when the fixed-point set is a known singleton.
    pub fn dist0_of(&self, x0: &Vector) -> Option<f64> {
        if self.fixed_point_unique {
            self.known_fixed_points.first().map(|y| x0.dist(y))
        } else {
            None
        }
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    fn verify(self) -> Result<Self> {
        for y in &self.known_fixed_points {
            let r = self.operator.residual(y)?;
            if r > 1e-9 {
                return Err(Error::Numerical(format!(
                    "reference fixed point of '{}' has residual {r:e}",
                    self.name
                )));
            }
        }
        Ok(self)
    }
}

const REFERENCE_TOL: f64 = 1e-13;
const REFERENCE_MAX_ITER: usize = 2_000_000;

/// Iterates `x ← P(x)` until the step falls below [`REFERENCE_TOL`].
fn reference_solve(step: impl Fn(&Vector) -> Vector, mut x: Vector) -> Result<Vector> {
    for _ in 0..REFERENCE_MAX_ITER {
        let next = step(&x);
        if !next.is_finite() {
            return Err(Error::Numerical("reference solve diverged".into()));
        }
        let moved = next.dist(&x);
        x = next;
        if moved <= REFERENCE_TOL * (1.0 + x.norm()) {
            return Ok(x);
        }
    }
    Err(Error::Numerical("reference solve did not converge".into()))
}

fn project(c: &MonotoneSpec, x: &Vector) -> Vector {
    match c.kind() {
        MonotoneKind::NormalConeBox { lo, hi } => x.zip_map(lo, f64::max).zip_map(hi, f64::min),
        MonotoneKind::NormalConeBall { center, radius } => {
            let d = x.dist(center);
            if d <= *radius {
                x.clone()
            } else {
                center.axpy(radius / d, &(x - center))
            }
        }
        _ => unreachable!("constraint kinds are checked by the caller"),
    }
}

/// `T = P_C ∘ (Id − μ∇φ)` with `φ(x) = ½xᵀQx − bᵀx`, i.e. forward-backward
/// with `A = N_C`. Requires `0 < μ < 2/L(Q)`.
pub fn make_bolte(c: &MonotoneSpec, q: DMatrix<f64>, b: Vector, mu: f64) -> Result<ProblemSpec> {
    if !matches!(c.kind(), MonotoneKind::NormalConeBox { .. } | MonotoneKind::NormalConeBall { .. }) {
        return Err(Error::Spec("constraint set must be a box or a ball".into()));
    }
    let phi = SmoothSpec::affine_gradient(q, b)?;
    let (operator, delta) = make_forward_backward(c, &phi, mu)?;
    let step = 1.0 / phi.lipschitz();
    let start = project(c, &Vector::zeros(phi.dim()));
    let y = reference_solve(|x| project(c, &x.axpy(-step, &phi.gradient(x).expect("dims match"))), start)?;
    let unique = phi.strong_convexity() > 1e-10;
    ProblemSpec {
        name: "bolte".into(),
        operator,
        constants: Constants { gamma: Some(mu), beta: Some(phi.beta()), delta: Some(delta), alpha: Some(1.0 / delta) },
        known_fixed_points: vec![y],
        fixed_point_unique: unique,
        monotone: Some(c.clone()),
        smooth: Some(phi),
        lambda_max: delta,
        provenance: format!("projected gradient, step 1/L, stopping at step <= {REFERENCE_TOL:e}"),
    }
    .verify()
}

/// Forward-backward for `min ½‖Ax − b‖² + reg·‖x‖₁`, `0 < γ < 2β`.
///
/// Reference minimizers come from separate forward-backward runs at `γ = β`
/// started from the origin and from `±10eᵢ`; distinct limits are all kept
/// when `AᵀA` is singular.
pub fn make_lasso(a: DMatrix<f64>, b: Vector, reg: f64, gamma: f64) -> Result<ProblemSpec> {
    if !(reg >= 0.0) || !reg.is_finite() {
        return Err(Error::Spec(format!("regularization must be finite and >= 0, got {reg}")));
    }
    let ls = SmoothSpec::least_squares(a, b)?;
    let n = ls.dim();
    let l1 = MonotoneSpec::l1(n, reg)?;
    let (operator, delta) = make_forward_backward(&l1, &ls, gamma)?;

    let beta = ls.beta();
    let reference = make_resolvent(&l1, beta)?;
    let step = |x: &Vector| reference.apply(&x.axpy(-beta, &ls.gradient(x).expect("dims match"))).expect("dims match");
    let unique = ls.strong_convexity() > 1e-10;
    let mut starts = vec![Vector::zeros(n)];
    if !unique {
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut e = vec![0.0; n];
                e[i] = 10.0 * sign;
                starts.push(Vector::new(e)?);
            }
        }
    }
    let mut minimizers: Vec<Vector> = Vec::new();
    for s in starts {
        let y = reference_solve(step, s)?;
        if minimizers.iter().all(|m| m.dist(&y) > 1e-6) {
            minimizers.push(y);
        }
    }
    ProblemSpec {
        name: "lasso".into(),
        operator,
        constants: Constants { gamma: Some(gamma), beta: Some(beta), delta: Some(delta), alpha: Some(1.0 / delta) },
        known_fixed_points: minimizers,
        fixed_point_unique: unique,
        monotone: Some(l1),
        smooth: Some(ls),
        lambda_max: delta,
        provenance: format!("forward-backward at gamma = beta from several starts, stopping at step <= {REFERENCE_TOL:e}"),
    }
    .verify()
}

/// Planar rotation by `theta`; `Fix T = {0}` unless `theta ≡ 0 mod 2π`.
pub fn make_rotation(theta: f64) -> Result<ProblemSpec> {
    let r = theta.rem_euclid(std::f64::consts::TAU);
    if !theta.is_finite() || r < 1e-12 || std::f64::consts::TAU - r < 1e-12 {
        return Err(Error::Spec(format!(
            "rotation angle {theta} is a multiple of 2*pi, every point is fixed"
        )));
    }
    ProblemSpec {
        name: "rotation".into(),
        operator: OperatorHandle::rotation(theta),
        constants: Constants::default(),
        known_fixed_points: vec![Vector::zeros(2)],
        fixed_point_unique: true,
        monotone: None,
        smooth: None,
        lambda_max: 1.0,
        provenance: "closed form".into(),
    }
    .verify()
}

/// Forward-backward with `A = 0` and `B = ∇½xᵀQx`, i.e. `T = Id − γQ`.
/// `Fix T = ker Q`; the origin is always fixed.
pub fn make_quadratic(q: DMatrix<f64>, gamma: f64) -> Result<ProblemSpec> {
    let n = q.nrows();
    let phi = SmoothSpec::affine_gradient(q, Vector::zeros(n))?;
    let zero = MonotoneSpec::zero(n)?;
    let (operator, delta) = make_forward_backward(&zero, &phi, gamma)?;
    ProblemSpec {
        name: "quadratic".into(),
        operator,
        constants: Constants { gamma: Some(gamma), beta: Some(phi.beta()), delta: Some(delta), alpha: Some(1.0 / delta) },
        known_fixed_points: vec![Vector::zeros(n)],
        fixed_point_unique: phi.strong_convexity() > 1e-10,
        monotone: Some(zero),
        smooth: Some(phi),
        lambda_max: delta,
        provenance: "closed form".into(),
    }
    .verify()
}
