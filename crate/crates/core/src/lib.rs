//! Characteristic flows and transport solvers for the kinetic equation
//!
//! ```text
//! ∂_t f + v·∇_x f + F·∇_v f = 0
//! ```
//!
//! with a Lipschitz force `F`, together with numerical verifiers for its
//! short-time dispersion (mixing) estimates.
//!
//! - [`fields`]: force fields, Jacobians, Lipschitz bounds.
//! - [`flow`]: RK4 characteristics, variational and monodromy systems,
//!   closed-form flows for the linear fields.
//! - [`grid`]: uniform cell-centered phase-space grids and their I/O.
//! - [`transport`]: semi-Lagrangian Cauchy solver, resolvent, velocity
//!   moments, the Green duality identity and a Sobolev diagnostic.
//! - [`dispersion`]: mixed `L^p` norms, the mixing-time equation and the
//!   Jacobian, Gronwall, injectivity and determinant verifiers.
//! - [`equiint`]: equiintegrability moduli and the indicator-transport
//!   experiment.

#![forbid(unsafe_code)]

pub mod dispersion;
pub mod equiint;
pub mod error;
pub mod fields;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod linalg;
pub mod transport;

pub use error::{Error, Result};
pub use fields::{make_builtin, BuiltinField, BuiltinKind, CustomField, ForceField};
pub use flow::{IntegratorConfig, PhasePoint, VariationalState};
pub use geometry::{PhaseWindow, Rect};
pub use grid::{PhaseGrid, PhaseGridFunction, XGrid, XGridFunction};
pub use transport::{InitialData, TestFunction};
