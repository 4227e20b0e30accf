//! Finite-dimensional real inner-product space.
//!
//! Every operator, flow and iteration in the crate acts on [`Vector`], a
//! dense coordinate array in ℝⁿ with the Euclidean inner product.

use std::fmt;
use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A point of ℝⁿ, `n ≥ 1`, with finite coordinates.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting empty input and non-finite entries.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Spec("vector must have dimension at least 1".into()));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::Spec(format!("vector entry {i} is not finite")));
        }
        Ok(Self(coords))
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(coords.to_vec())
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "zero vector needs dim >= 1");
        Self(vec![0.0; dim])
    }

    /// Wraps raw coordinates produced by arithmetic on valid vectors.
    /// Finiteness is re-checked by the callers that can fail (flows, iterations).
    pub(crate) fn from_raw(coords: Vec<f64>) -> Self {
        debug_assert!(!coords.is_empty());
        Self(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum()
    }

    pub fn norm(&self) -> f64 {
        norm(self)
    }

    /// `‖self − other‖`; panics on dimension mismatch.
    pub fn dist(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in dist");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self + a·y`.
    pub fn axpy(&self, a: f64, y: &Vector) -> Vector {
        assert_eq!(self.dim(), y.dim(), "dimension mismatch in axpy");
        Vector(self.0.iter().zip(&y.0).map(|(x, y)| x + a * y).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.0.iter().map(|&c| f(c)).collect())
    }

    pub fn zip_map(&self, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Vector {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in zip_map");
        Vector(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Vector").field(&self.0).finish()
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for &Vector {
    type Output = Vector;
    fn add(self, rhs: &Vector) -> Vector {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &Vector {
    type Output = Vector;
    fn sub(self, rhs: &Vector) -> Vector {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<&Vector> for f64 {
    type Output = Vector;
    fn mul(self, rhs: &Vector) -> Vector {
        rhs.map(|c| self * c)
    }
}

impl Neg for &Vector {
    type Output = Vector;
    fn neg(self) -> Vector {
        self.map(|c| -c)
    }
}

/// Euclidean inner product `Σ xᵢyᵢ`.
pub fn inner(x: &Vector, y: &Vector) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    Ok(x.0.iter().zip(&y.0).map(|(a, b)| a * b).sum())
}

pub fn norm(x: &Vector) -> f64 {
    x.norm_sq().sqrt()
}

/// Absolute defect of the identity
/// `‖αx+(1−α)y‖² + α(1−α)‖x−y‖² = α‖x‖² + (1−α)‖y‖²`,
/// which holds for every real α. Useful as a floating-point self-check.
pub fn convex_identity_residual(alpha: f64, x: &Vector, y: &Vector) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    let beta = 1.0 - alpha;
    let comb = x.zip_map(y, |a, b| alpha * a + beta * b);
    let lhs = comb.norm_sq() + alpha * beta * x.dist(y).powi(2);
    let rhs = alpha * x.norm_sq() + beta * y.norm_sq();
    Ok((lhs - rhs).abs())
}
