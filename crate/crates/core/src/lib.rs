//! Finite-element kernels for lithiation-driven fracture in 2D electrode particles.
//!
//! The model couples three nodal fields on quad meshes: displacement `u` (quasi-static
//! elasticity with a concentration eigenstrain), Li concentration `c` (Fickian diffusion
//! plus drift down the gradient of degraded hydrostatic stress), and a crack order
//! parameter `phi` (1 = intact, 0 = broken) evolving by a bounded relaxation law with an
//! irreversibility clamp.
//!
//! Layout:
//! - [`element`]: bilinear quad shape functions, 2x2 Gauss rule, strain / gradient /
//!   second-gradient operator matrices,
//! - [`material`]: mixture moduli, degradation, plane-stress/strain coupling matrices,
//!   stress and crack driving energies,
//! - [`mesh`]: structured disk meshes with a refined crack band, plain-text mesh IO,
//! - [`assembly`]: element residual/tangent/damping kernels and global sparse assembly,
//! - [`linsolve`]: sparse LU behind a factor-and-solve contract,
//! - [`solver`]: Newmark rates, projected Newton stepping, run loop, checkpoints,
//! - [`postprocess`]: crack metrics, expansion, VTK and CSV export.
//!
//! Element and material math is generic over the scalar type through [`scalar::Scalar`];
//! meshes, the global solver and all IO use the crate-level [`Real`] alias.

pub mod assembly;
pub mod element;
pub mod error;
pub mod linsolve;
pub mod material;
pub mod mesh;
pub mod postprocess;
pub mod scalar;
pub mod solver;

/// Working precision of meshes, global vectors and everything downstream of assembly.
pub type Real = f64;

pub use error::{CoreError, Result};
