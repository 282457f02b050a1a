//! Synthetic multi-solid data from a quasi-static mass-spring oracle.
//!
//! Deformable solids are spring lattices; rigid solids are primitives that
//! push into them through a quadratic penalty. Each load step is solved to
//! equilibrium, and every emitted sample carries the data needed to re-check
//! that equilibrium.

mod lattice;
mod primitive;
mod scenario;
mod solver;

pub use lattice::{build_lattice, build_tube, distance, material_multipliers, Grid, Spring, SpringSystem};
pub use primitive::{DepthJet, Primitive};
pub use scenario::{
    build_world, certificate_residual, generate_trajectory, longtime_sample, simulate, OracleCertificate, RigidBody, ScenarioConfig, ScenarioKind,
    World, STRESS,
};
pub use solver::{energy, free_residual, gradient, point_energy, solve_quasistatic, SolveReport, SolverConfig};
