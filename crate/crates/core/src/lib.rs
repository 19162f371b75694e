//! Frozen planet orbits of the generalized one-dimensional n-electron atom.
//!
//! The crate discretizes the action functional on piecewise-linear paths,
//! computes segmented brake orbits and their foldings, seeds and deforms
//! linking disks, and polishes critical points with a banded Newton solver.

pub mod brake;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod linking;
pub mod potentials;
pub mod smoothing;
pub mod solver;
pub mod trajectory;

pub use error::{Error, Result};
pub use potentials::{
    check_assumptions, evaluate, named_preset, physical_preset, AssumptionReport, Order,
    PotentialFamily, PotentialSpec, ProbeGrid, Verdict,
};
pub use smoothing::{Model, SmoothingParams};
pub use trajectory::{Mesh, MeshSpec, Path, Quadrature};
