//! Explicit one-particle reduced density matrices that reproduce a prescribed
//! density `rho` and paramagnetic current density `j_p = rho * kappa / 2`.
//!
//! The crate builds the closed-form Gaussian-smeared kernels `P_lambda`,
//! `Q_mu` and their convex combination `D_theta`, and provides the numerical
//! machinery needed to check what such a kernel promises: its diagonal, its
//! current, its occupation numbers, its trace and its kinetic energy.
//!
//! Module map:
//!
//! * [`fields`]: densities and current factors with analytic derivatives.
//! * [`quadrature`]: tensor grids, Gauss–Hermite rules, compact boxes.
//! * [`kernels`]: the factor kernels `g`, `h`, the 1-RDM kernels and the
//!   admissible width threshold.
//! * [`spectral`]: Nyström discretization, dense and matrix-free spectra.
//! * [`observables`]: currents, kinetic-energy densities, functionals, bounds.
//! * [`measure`]: local averaging and maximal-function probes.
//! * [`config`], [`report`], [`run`], [`export`]: the run pipeline used by the CLI.

pub mod config;
pub mod export;
pub mod fields;
pub mod kernels;
pub mod measure;
pub mod observables;
pub mod quadrature;
pub mod report;
pub mod run;
pub mod spectral;

/// Cartesian position or vector in atomic units.
pub type Vec3 = nalgebra::Vector3<f64>;

/// 3×3 real matrix. Jacobians use the convention `J[(a, b)] = d kappa_b / d r_a`.
pub type Mat3 = nalgebra::Matrix3<f64>;

pub use num_complex::Complex64 as C64;

pub use fields::{DensityProfile, KappaField};
pub use kernels::{Admissibility, KernelFactor, OccupationMode, RdmKernel};
pub use quadrature::{CompactBox, GaussHermiteRule, GridSpec, Rule};
