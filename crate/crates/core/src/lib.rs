//! Numerical lab for coaxial vortex rings in the axisymmetric half-plane `(z, r)`, `r > 0`.
//!
//! * [`kernel`]: the axisymmetric Green's function, its logarithmic split and velocity formulas.
//! * [`dynamics`]: reduced ring ODEs and their integrators.
//! * [`invariants`]: conserved quantities and a priori bounds of the reduced system.
//! * [`blob`]: regularized vortex-particle simulation of thin cores.
//! * [`experiments`]: configured runs with pass/fail criteria.
//! * [`io`]: configuration, CSV/JSON output, replay and kernel validation.
//!
//! Kernel, dynamics and invariants are generic over [`scalar::Real`]; the rest is `f64`.

// `!(x > 0)` is the NaN-rejecting form used throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod blob;
pub mod dynamics;
pub mod elliptic;
pub mod experiments;
pub mod geom;
pub mod invariants;
pub mod io;
pub mod kernel;
pub mod quadrature;
pub mod scalar;
pub mod summation;

pub use experiments::{run_experiment, ExperimentConfig, ExperimentKind, RunManifest, RunOutput};
pub use geom::Vec2;
pub use scalar::Real;
