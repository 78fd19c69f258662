//! Inverse estimation of a diffusion coefficient from concentration snapshots
//! on voxel domains, by physics-informed networks and by a discrete adjoint
//! baseline.

pub mod adjoint;
pub mod cli;
pub mod diagnostics;
pub mod grid;
pub mod net;
pub mod pinn;
pub mod synth;
