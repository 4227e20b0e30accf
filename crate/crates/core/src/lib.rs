//! Continuous-time fixed-point dynamics `ẋ(t) = λ(t)(T(x(t)) − x(t))` for
//! nonexpansive operators `T`, their discrete Krasnosel'skiĭ-Mann and
//! forward-backward counterparts, and numerical certification of the
//! associated Lyapunov, rate and time-rescaling properties.
//!
//! Module map:
//!
//! * [`space`]: vectors of ℝⁿ and inner-product primitives.
//! * [`operators`]: projections, proximal maps, resolvents, averaged,
//!   forward-backward and Douglas-Rachford operators, sampled certification.
//! * [`schedules`]: relaxation functions `λ(t)` and condition predicates.
//! * [`flow`]: adaptive integration of the dynamics.
//! * [`discrete`]: Krasnosel'skiĭ-Mann and forward-backward iterations.
//! * [`rescale`]: time changes linking the flow to the autonomous system.
//! * [`analysis`]: Lyapunov, rate and little-o diagnostics on trajectories.
//! * [`problems`]: canonical instances with known solutions.
//! * [`cli`]: config-driven experiment runner.

// `!(x > 0.0)` style guards reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod discrete;
pub mod error;
pub mod flow;
pub mod operators;
pub mod problems;
pub mod rescale;
pub mod schedules;
pub mod space;

pub use error::{Error, Result};
pub use flow::{FlowConfig, Method, Trajectory};
pub use operators::{MonotoneSpec, OperatorHandle, Regularity, SmoothSpec};
pub use schedules::Schedule;
pub use space::Vector;
