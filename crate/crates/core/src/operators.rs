//! Operator zoo: projections, proximal maps, resolvents, averaged wrappers,
//! forward-backward and Douglas-Rachford compositions, and sampled
//! regularity certification.
//!
//! Operators are immutable values. An [`OperatorHandle`] owns its evaluation
//! closure behind an `Arc`, so handles are cheap to clone and may be shared
//! between threads.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::space::{inner, Vector};

/// Eigenvalue floor accepted for `M + Mᵀ` of a linear monotone operator.
const PSD_FLOOR: f64 = -1e-10;
/// Lower bound on the Lipschitz constant used when deriving cocoercivity.
const LIPSCHITZ_FLOOR: f64 = 1e-12;

/// Declared regularity of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "constant", rename_all = "snake_case")]
pub enum Regularity {
    Nonexpansive,
    /// `(1−α)Id + αT` with `T` nonexpansive, `α ∈ (0,1)`.
    Averaged(f64),
    /// `⟨x−y, Bx−By⟩ ≥ β‖Bx−By‖²`.
    Cocoercive(f64),
    Lipschitz(f64),
}

impl Regularity {
    /// Whether the declared class implies nonexpansiveness.
    pub fn is_nonexpansive(&self) -> bool {
        match *self {
            Regularity::Nonexpansive | Regularity::Averaged(_) => true,
            Regularity::Cocoercive(beta) => beta >= 1.0,
            Regularity::Lipschitz(l) => l <= 1.0,
        }
    }
}

type EvalFn = dyn Fn(&Vector) -> Vector + Send + Sync;

/// An evaluable map ℝⁿ → ℝⁿ with regularity metadata.
#[derive(Clone)]
pub struct OperatorHandle {
    eval: Arc<EvalFn>,
    dim: usize,
    regularity: Regularity,
    label: String,
}

impl fmt::Debug for OperatorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorHandle")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("regularity", &self.regularity)
            .finish()
    }
}

impl OperatorHandle {
    /// Wraps a closure. The closure must map `dim`-vectors to `dim`-vectors.
    pub fn new<F>(dim: usize, regularity: Regularity, label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&Vector) -> Vector + Send + Sync + 'static,
    {
        assert!(dim >= 1, "operator dimension must be at least 1");
        Self {
            eval: Arc::new(f),
            dim,
            regularity,
            label: label.into(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, Regularity::Nonexpansive, "identity", |x| x.clone())
    }

    /// `x ↦ c·x`. Nonexpansive iff `|c| ≤ 1`; declared as Lipschitz(|c|).
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        Self::new(dim, Regularity::Lipschitz(c.abs()), format!("{c}*identity"), move |x| {
            c * x
        })
    }

    /// Planar rotation by `theta` radians (an isometry).
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(2, Regularity::Nonexpansive, format!("rotation({theta})"), move |x| {
            Vector::from_raw(vec![c * x[0] - s * x[1], s * x[0] + c * x[1]])
        })
    }

    /// `x ↦ Mx` for a square matrix.
    pub fn linear(m: DMatrix<f64>, regularity: Regularity, label: impl Into<String>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::Spec("linear operator needs a non-empty square matrix".into()));
        }
        let dim = m.nrows();
        Ok(Self::new(dim, regularity, label, move |x| matvec(&m, x)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn regularity(&self) -> Regularity {
        self.regularity
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim, x.dim())?;
        Ok((self.eval)(x))
    }

    /// Evaluation without the dimension check, for inner loops that validated once.
    pub(crate) fn eval(&self, x: &Vector) -> Vector {
        (self.eval)(x)
    }

    /// Fixed-point residual `‖Tx − x‖`.
    pub fn residual(&self, x: &Vector) -> Result<f64> {
        Ok(self.apply(x)?.dist(x))
    }

    pub(crate) fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

pub(crate) fn matvec(m: &DMatrix<f64>, x: &Vector) -> Vector {
    let v = m * DVector::from_column_slice(x.as_slice());
    Vector::from_raw(v.as_slice().to_vec())
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = 1.0 + m.amax();
    (m - m.transpose()).amax() <= 1e-12 * scale
}

/// Maximally monotone operators with closed-form resolvents.
#[derive(Debug, Clone, PartialEq)]
pub enum MonotoneKind {
    /// `x ↦ Mx` with `M + Mᵀ ⪰ 0`.
    Linear(DMatrix<f64>),
    /// Subdifferential of `w‖·‖₁`.
    SubdifferentialL1 { weight: f64 },
    /// Normal cone of the box `[lo, hi]`.
    NormalConeBox { lo: Vector, hi: Vector },
    /// Normal cone of the closed ball `B(center, radius)`.
    NormalConeBall { center: Vector, radius: f64 },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneSpec {
    kind: MonotoneKind,
    dim: usize,
}

impl MonotoneSpec {
    pub fn linear(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::Spec("monotone linear operator needs a square matrix".into()));
        }
        let floor = symmetric_eigenvalues(&m).min();
        if floor < PSD_FLOOR {
            return Err(Error::Spec(format!(
                "linear operator is not monotone: smallest eigenvalue of the symmetric part is {floor}"
            )));
        }
        let dim = m.nrows();
        Ok(Self { kind: MonotoneKind::Linear(m), dim })
    }

    pub fn l1(dim: usize, weight: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Spec("dimension must be at least 1".into()));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::Spec(format!("l1 weight must be finite and >= 0, got {weight}")));
        }
        Ok(Self { kind: MonotoneKind::SubdifferentialL1 { weight }, dim })
    }

    pub fn normal_cone_box(lo: Vector, hi: Vector) -> Result<Self> {
        check_dim(lo.dim(), hi.dim())?;
        if let Some(i) = (0..lo.dim()).find(|&i| lo[i] > hi[i]) {
            return Err(Error::Spec(format!(
                "box bounds inverted at coordinate {i}: lo = {} > hi = {}",
                lo[i], hi[i]
            )));
        }
        let dim = lo.dim();
        Ok(Self { kind: MonotoneKind::NormalConeBox { lo, hi }, dim })
    }

    pub fn normal_cone_ball(center: Vector, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Spec(format!("ball radius must be positive, got {radius}")));
        }
        let dim = center.dim();
        Ok(Self { kind: MonotoneKind::NormalConeBall { center, radius }, dim })
    }

    pub fn zero(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Spec("dimension must be at least 1".into()));
        }
        Ok(Self { kind: MonotoneKind::Zero, dim })
    }

    pub fn kind(&self) -> &MonotoneKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn describe(&self) -> &'static str {
        match self.kind {
            MonotoneKind::Linear(_) => "linear",
            MonotoneKind::SubdifferentialL1 { .. } => "l1",
            MonotoneKind::NormalConeBox { .. } => "box",
            MonotoneKind::NormalConeBall { .. } => "ball",
            MonotoneKind::Zero => "zero",
        }
    }
}

/// Smooth convex functions whose gradients serve as cocoercive operators.
#[derive(Debug, Clone, PartialEq)]
pub enum SmoothKind {
    /// `φ(x) = ½xᵀQx − bᵀx`.
    AffineGradient { q: DMatrix<f64>, b: Vector },
    /// `φ(x) = ½‖Ax − b‖²`.
    LeastSquares { a: DMatrix<f64>, b: Vector },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothSpec {
    kind: SmoothKind,
    /// Linear part of the gradient: `Q` or `AᵀA`.
    hessian: DMatrix<f64>,
    /// Constant part of the gradient: `b` or `Aᵀb`.
    shift: Vector,
    lipschitz: f64,
    beta: f64,
}

impl SmoothSpec {
    pub fn affine_gradient(q: DMatrix<f64>, b: Vector) -> Result<Self> {
        if !q.is_square() || q.nrows() != b.dim() {
            return Err(Error::Spec(format!(
                "quadratic needs a square {n}x{n} matrix, got {}x{}",
                q.nrows(),
                q.ncols(),
                n = b.dim()
            )));
        }
        if !is_symmetric(&q) {
            return Err(Error::Spec("quadratic matrix must be symmetric".into()));
        }
        let eig = symmetric_eigenvalues(&q);
        if eig.min() < PSD_FLOOR {
            return Err(Error::Spec(format!(
                "quadratic matrix is not positive semidefinite (eigenvalue {})",
                eig.min()
            )));
        }
        let lipschitz = eig.max().max(LIPSCHITZ_FLOOR);
        Ok(Self {
            hessian: q.clone(),
            shift: b.clone(),
            kind: SmoothKind::AffineGradient { q, b },
            lipschitz,
            beta: 1.0 / lipschitz,
        })
    }

    pub fn least_squares(a: DMatrix<f64>, b: Vector) -> Result<Self> {
        if a.nrows() != b.dim() || a.ncols() == 0 {
            return Err(Error::Spec(format!(
                "least squares needs A with {} rows, got {}x{}",
                b.dim(),
                a.nrows(),
                a.ncols()
            )));
        }
        let ata = a.transpose() * &a;
        let atb = a.transpose() * DVector::from_column_slice(b.as_slice());
        let lipschitz = ata.symmetric_eigenvalues().max().max(LIPSCHITZ_FLOOR);
        Ok(Self {
            hessian: ata,
            shift: Vector::from_raw(atb.as_slice().to_vec()),
            kind: SmoothKind::LeastSquares { a, b },
            lipschitz,
            beta: 1.0 / lipschitz,
        })
    }

    pub fn kind(&self) -> &SmoothKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    /// Certified cocoercivity constant `1/L`.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Smallest eigenvalue of the (constant) Hessian.
    pub fn strong_convexity(&self) -> f64 {
        self.hessian.symmetric_eigenvalues().min()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn gradient(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.dim())?;
        Ok(self.gradient_unchecked(x))
    }

    fn gradient_unchecked(&self, x: &Vector) -> Vector {
        &matvec(&self.hessian, x) - &self.shift
    }

    /// The gradient as a β-cocoercive operator handle.
    pub fn operator(&self) -> OperatorHandle {
        let me = self.clone();
        OperatorHandle::new(self.dim(), Regularity::Cocoercive(self.beta), "gradient", move |x| {
            me.gradient_unchecked(x)
        })
    }
}

pub(crate) fn project_box(lo: &Vector, hi: &Vector, x: &Vector) -> Vector {
    Vector::from_raw((0..x.dim()).map(|i| x[i].clamp(lo[i], hi[i])).collect())
}

pub(crate) fn project_ball(center: &Vector, radius: f64, x: &Vector) -> Vector {
    let d = x.dist(center);
    if d <= radius {
        return x.clone();
    }
    // d > radius > 0, so the radial scale is well defined.
    let s = radius / d;
    center.zip_map(x, |c, xi| c + s * (xi - c))
}

pub(crate) fn soft_threshold(threshold: f64, x: &Vector) -> Vector {
    x.map(|c| c.signum() * (c.abs() - threshold).max(0.0))
}

/// Projection onto a box or ball; firmly nonexpansive and idempotent.
pub fn make_projection(set: &MonotoneSpec) -> Result<OperatorHandle> {
    let dim = set.dim;
    match &set.kind {
        MonotoneKind::NormalConeBox { lo, hi } => {
            let (lo, hi) = (lo.clone(), hi.clone());
            Ok(OperatorHandle::new(dim, Regularity::Averaged(0.5), "projection(box)", move |x| {
                project_box(&lo, &hi, x)
            }))
        }
        MonotoneKind::NormalConeBall { center, radius } => {
            let (center, radius) = (center.clone(), *radius);
            Ok(OperatorHandle::new(dim, Regularity::Averaged(0.5), "projection(ball)", move |x| {
                project_ball(&center, radius, x)
            }))
        }
        _ => Err(Error::Spec(format!(
            "projection needs a box or ball set, got {}",
            set.describe()
        ))),
    }
}

/// `prox_{μf}` for the closed-form cases: l1, box/ball indicators,
/// symmetric quadratics and zero.
pub fn make_prox(f: &MonotoneSpec, mu: f64) -> Result<OperatorHandle> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::Spec(format!("prox parameter must be positive, got {mu}")));
    }
    match &f.kind {
        MonotoneKind::Linear(m) if !is_symmetric(m) => Err(Error::UnsupportedProx(
            "non-symmetric linear operator is not a gradient".into(),
        )),
        _ => Ok(make_resolvent(f, mu)?.with_label(format!("prox({},{mu})", f.describe()))),
    }
}

/// Resolvent `J_{γA} = (Id + γA)⁻¹`.
pub fn make_resolvent(a: &MonotoneSpec, gamma: f64) -> Result<OperatorHandle> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Spec(format!("resolvent parameter must be positive, got {gamma}")));
    }
    let dim = a.dim;
    let label = format!("resolvent({},{gamma})", a.describe());
    let firm = Regularity::Averaged(0.5);
    let op = match &a.kind {
        MonotoneKind::Zero => OperatorHandle::new(dim, firm, label, |x| x.clone()),
        MonotoneKind::SubdifferentialL1 { weight } => {
            let t = gamma * weight;
            OperatorHandle::new(dim, firm, label, move |x| soft_threshold(t, x))
        }
        MonotoneKind::NormalConeBox { .. } | MonotoneKind::NormalConeBall { .. } => {
            make_projection(a)?.with_label(label)
        }
        MonotoneKind::Linear(m) => {
            let shifted = DMatrix::identity(dim, dim) + m * gamma;
            let lu = shifted.lu();
            let u = lu.u();
            let pivot_floor = (0..dim).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
            if !(pivot_floor > 1e-14 * (1.0 + u.amax())) {
                return Err(Error::Numerical(format!(
                    "I + gamma*M is numerically singular (pivot {pivot_floor})"
                )));
            }
            OperatorHandle::new(dim, firm, label, move |x| {
                let rhs = DVector::from_column_slice(x.as_slice());
                let p = lu.solve(&rhs).expect("factorization checked nonsingular");
                Vector::from_raw(p.as_slice().to_vec())
            })
        }
    };
    Ok(op)
}

/// `R = (1−α)Id + αT` for a nonexpansive `T`.
pub fn make_averaged(t: &OperatorHandle, alpha: f64) -> Result<OperatorHandle> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Spec(format!("averaging constant must lie in (0,1), got {alpha}")));
    }
    if !t.regularity().is_nonexpansive() {
        return Err(Error::Spec(format!(
            "averaging needs a nonexpansive operator, '{}' is declared {:?}",
            t.label(),
            t.regularity()
        )));
    }
    let inner_op = t.clone();
    Ok(OperatorHandle::new(
        t.dim(),
        Regularity::Averaged(alpha),
        format!("averaged({},{alpha})", t.label()),
        move |x| {
            let tx = inner_op.eval(x);
            x.zip_map(&tx, |xi, ti| (1.0 - alpha) * xi + alpha * ti)
        },
    ))
}

/// Averagedness constant `δ = min{1, β/γ} + ½` of the forward-backward map.
pub fn fb_delta(beta: f64, gamma: f64) -> f64 {
    (beta / gamma).min(1.0) + 0.5
}

/// `T = J_{γA} ∘ (Id − γB)`, returned with `δ`; `T` is `1/δ`-averaged and
/// `Fix T = zer(A + B)`.
pub fn make_forward_backward(
    a: &MonotoneSpec,
    b: &SmoothSpec,
    gamma: f64,
) -> Result<(OperatorHandle, f64)> {
    check_dim(a.dim(), b.dim())?;
    let beta = b.beta();
    if !(gamma > 0.0 && gamma < 2.0 * beta) {
        return Err(Error::Spec(format!(
            "step gamma = {gamma} must lie in the open interval (0, 2*beta) = (0, {})",
            2.0 * beta
        )));
    }
    let delta = fb_delta(beta, gamma);
    let resolvent = make_resolvent(a, gamma)?;
    let smooth = b.clone();
    let op = OperatorHandle::new(
        a.dim(),
        Regularity::Averaged(1.0 / delta),
        format!("forward_backward({},{gamma})", a.describe()),
        move |x| {
            let step = x.axpy(-gamma, &smooth.gradient_unchecked(x));
            resolvent.eval(&step)
        },
    );
    Ok((op, delta))
}

/// `T = ½(Id + R_A ∘ R_B)` with reflections `R = 2J_γ − Id`.
pub fn make_douglas_rachford(a: &MonotoneSpec, b2: &MonotoneSpec, gamma: f64) -> Result<OperatorHandle> {
    check_dim(a.dim(), b2.dim())?;
    let ja = make_resolvent(a, gamma)?;
    let jb = make_resolvent(b2, gamma)?;
    Ok(OperatorHandle::new(
        a.dim(),
        Regularity::Averaged(0.5),
        format!("douglas_rachford({},{},{gamma})", a.describe(), b2.describe()),
        move |x| {
            let rb = jb.eval(x).zip_map(x, |j, xi| 2.0 * j - xi);
            let ra = ja.eval(&rb).zip_map(&rb, |j, r| 2.0 * j - r);
            x.zip_map(&ra, |xi, r| 0.5 * (xi + r))
        },
    ))
}

/// Outcome of a sampled regularity check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertReport {
    pub property: String,
    pub seed: u64,
    pub trials: usize,
    pub box_radius: f64,
    /// Worst value of the tested quantity: the largest excess for
    /// nonexpansiveness, the smallest margin for cocoercivity.
    pub worst: f64,
    /// Index of the worst sample pair.
    pub worst_trial: usize,
    pub pass: bool,
}

fn sample_pairs(dim: usize, trials: usize, seed: u64, radius: f64) -> Vec<(Vector, Vector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = radius.abs();
    let draw = |rng: &mut ChaCha8Rng| {
        Vector::from_raw((0..dim).map(|_| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 }).collect())
    };
    (0..trials)
        .map(|_| {
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            (x, y)
        })
        .collect()
}

/// Samples `trials` pairs uniformly in `[−r, r]ⁿ` and records the largest
/// `‖Tx−Ty‖ − ‖x−y‖`. A pair fails when the excess exceeds `1e−9(1+‖x−y‖)`.
pub fn certify_nonexpansive(t: &OperatorHandle, trials: usize, seed: u64, box_radius: f64) -> CertReport {
    let mut worst = f64::NEG_INFINITY;
    let mut worst_trial = 0;
    let mut pass = true;
    for (k, (x, y)) in sample_pairs(t.dim(), trials.max(1), seed, box_radius).iter().enumerate() {
        let d = x.dist(y);
        let excess = t.eval(x).dist(&t.eval(y)) - d;
        if excess > worst {
            worst = excess;
            worst_trial = k;
        }
        if !(excess <= 1e-9 * (1.0 + d)) {
            pass = false;
        }
    }
    CertReport {
        property: "nonexpansive".into(),
        seed,
        trials: trials.max(1),
        box_radius,
        worst,
        worst_trial,
        pass,
    }
}

/// Records the smallest `⟨x−y, Bx−By⟩ − β‖Bx−By‖²` over sampled pairs.
/// A pair fails when the margin drops below `−1e−9(1+‖x−y‖²)`.
pub fn certify_cocoercive(
    b: &OperatorHandle,
    beta: f64,
    trials: usize,
    seed: u64,
    box_radius: f64,
) -> CertReport {
    let mut worst = f64::INFINITY;
    let mut worst_trial = 0;
    let mut pass = true;
    for (k, (x, y)) in sample_pairs(b.dim(), trials.max(1), seed, box_radius).iter().enumerate() {
        let d = x - y;
        let bd = &b.eval(x) - &b.eval(y);
        let margin = inner(&d, &bd).expect("same dim") - beta * bd.norm_sq();
        if margin < worst {
            worst = margin;
            worst_trial = k;
        }
        if !(margin >= -1e-9 * (1.0 + d.norm_sq())) {
            pass = false;
        }
    }
    CertReport {
        property: format!("cocoercive({beta})"),
        seed,
        trials: trials.max(1),
        box_radius,
        worst,
        worst_trial,
        pass,
    }
}

/// Checks `‖Tx−Ty‖² ≤ ‖x−y‖² − γ(2β−γ)‖Bx−By‖²` on sampled pairs for a
/// forward-backward map `T`. `worst` is the largest violation; pass iff it
/// stays at or below `1e−9`.
pub fn certify_fb_inequality(
    t: &OperatorHandle,
    b: &SmoothSpec,
    gamma: f64,
    trials: usize,
    seed: u64,
    box_radius: f64,
) -> CertReport {
    let beta = b.beta();
    let mut worst = f64::NEG_INFINITY;
    let mut worst_trial = 0;
    for (k, (x, y)) in sample_pairs(t.dim(), trials.max(1), seed, box_radius).iter().enumerate() {
        let lhs = t.eval(x).dist(&t.eval(y)).powi(2);
        let gap = b.gradient_unchecked(x).dist(&b.gradient_unchecked(y)).powi(2);
        let rhs = x.dist(y).powi(2) - gamma * (2.0 * beta - gamma) * gap;
        let violation = lhs - rhs;
        if violation > worst {
            worst = violation;
            worst_trial = k;
        }
    }
    CertReport {
        property: format!("forward_backward_inequality(gamma={gamma},beta={beta})"),
        seed,
        trials: trials.max(1),
        box_radius,
        worst,
        worst_trial,
        pass: worst <= 1e-9,
    }
}
