//! Spectral toolkit for the damped membrane equation on the sphere,
//!
//! ```text
//! ∂ₜ²w + b ∂ₜw = (dμ(w)/dμ₀) (−H(w) + κ/Vol(w)) N(w),
//! ```
//!
//! the motion of an elastic membrane driven by surface tension and the
//! pressure of an enclosed ideal gas. The crate provides
//!
//! * [`harmonics`] — real spherical-harmonic analysis/synthesis on a
//!   Gauss–Legendre × equiangular grid, graded Sobolev norms and dyadic
//!   spectral smoothing;
//! * [`geometry`] — extrinsic geometry of an embedded surface (metric,
//!   normal, curvature, volume) and the nonlinear force;
//! * [`linop`] — the linearized elliptic operators, their spectra and the
//!   zero-mode projections;
//! * [`linsolve`] — exact modewise solution of the damped linearized Cauchy
//!   problem, the gauge maps, and the (Y, c, v) triple splitting;
//! * [`dynamics`] — nonlinear time integration, energy diagnostics, sphere
//!   fitting, decay-rate measurement and the breather ODE;
//! * [`nashmoser`] — graded-scale machinery: smoothing-axiom measurements,
//!   exponent checks and a smoothed Newton iteration.

pub mod dynamics;
pub mod error;
mod fit;
pub mod geometry;
pub mod harmonics;
pub mod linop;
pub mod linsolve;
pub mod nashmoser;

pub use error::MembraneError;

// The public API exposes nalgebra vector/matrix types; re-export the crate
// so downstream users stay version-aligned.
pub use nalgebra;

/// Pressure coupling fixed so that the unit sphere is static: κ = 8π/3.
pub const KAPPA_UNIT_SPHERE: f64 = 8.0 * std::f64::consts::PI / 3.0;
