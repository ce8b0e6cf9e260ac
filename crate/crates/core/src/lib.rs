//! Deterministic discrete-velocity solver for the fuzzy Boltzmann equation,
//! in which particles at `x` collide with partners at `x*` weighted by a
//! spatial kernel `κ^σ(x − x*)`, together with the diagnostics and harness
//! used to verify its structural properties.

pub mod collision;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod oracle;
pub mod phase_space;
pub mod snapshot;

pub use collision::{collision_transform, CollisionField, CollisionOperator, Coupling};
pub use dynamics::{run, SimConfig, Trajectory};
pub use error::{Error, Result};
pub use kernels::{build_spatial_kernel, convolve_x, CollisionKernelSpec, SpatialKernelSpec};
pub use phase_space::{moments, DistributionFunction, MomentVector, PhaseGrid};
