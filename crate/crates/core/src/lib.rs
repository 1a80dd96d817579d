//! Numerical laboratory for the non-cutoff Boltzmann collision operator
//! linearized around a Maxwellian equilibrium.
//!
//! The crate implements, at desk scale:
//!
//! * collision kernels with a non-integrable grazing singularity, their
//!   dyadic shell decomposition, and both the σ- and Carleman-plane
//!   representations of the collision geometry ([`kernel`]);
//! * the lifted-paraboloid geometry and the associated Littlewood–Paley
//!   projections with moment-cancellation kernels ([`paraboloid`]);
//! * the anisotropic weighted norms and semi-norms that characterize the
//!   linearized operator ([`norms`]);
//! * the bilinear operator Γ, its trilinear dyadic forms, the weight ν̃,
//!   the compact kernel κ_j, and the operators N, K, L with dense matrix
//!   assembly over a tensor Hermite basis ([`collision`]);
//! * the hydrodynamic projection, moment coefficients, and the interaction
//!   functional ([`macroscopic`]);
//! * a semi-implicit perturbative solver with energy/entropy diagnostics
//!   ([`evolve`]);
//! * batch configuration, verification suites, and report emission
//!   ([`harness`]).
//!
//! Everything is deterministic: fixed seeds and fixed quadrature levels
//! reproduce byte-identical outputs on a given platform.

pub mod analytic;
pub mod collision;
pub mod error;
pub mod evolve;
pub mod grid;
pub mod harness;
pub mod hermite;
pub mod kernel;
pub mod macroscopic;
pub mod norms;
pub mod paraboloid;
pub mod quadrature;
pub mod util;

pub use error::{Error, Result};
pub use grid::{Field, Grid, GridField, VelocityFn};
pub use kernel::KernelParams;
pub use collision::{
    apply_k, apply_l, apply_n, assemble_matrix, assemble_norm_matrix, build_pao_split,
    compact_difference, gamma_beta, gamma_bilinear, grad_bound_check, shell_scan, trilinear_t,
    CollisionQuad, GammaResult, MatrixKind, MatrixQuad, MaxwellianFamily, OperatorMatrix,
    PaoSplit, TrilinearSpec, TrilinearVariant,
};
pub use norms::{weight_w, NormReport, WeightSpec};
// Re-exports below are added as modules land.

