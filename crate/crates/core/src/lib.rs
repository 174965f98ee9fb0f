//! A-optimal sensor placement for Bayesian inversion of the log-conductivity in an elliptic
//! PDE, with MAP-point Laplace approximations, randomized trace estimation, adjoint design
//! gradients and sparsifying continuation.

pub mod cholesky;
pub mod config;
pub mod design;
pub mod error;
pub mod experiments;
pub mod fem;
pub mod forward;
pub mod hessian;
pub mod io;
pub mod krylov;
pub mod map;
pub mod mesh;
pub mod oed;
pub mod prior;
pub mod rng;
pub mod sparse;
pub mod trace;
pub mod vecops;
pub mod vtk;

pub use error::{OedError, Result};
pub use fem::{FemSpace, StiffnessMode};
pub use krylov::{CgOptions, CgTag, CounterSnapshot, SolveCounters, SolveKind};
pub use mesh::{build_rect_mesh, BoundaryMarker, MarkerRule, Mesh, Rect};
pub use sparse::SparseOperator;
