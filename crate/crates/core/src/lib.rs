//! Grouped network vector autoregression (GNAR).
//!
//! Each node `i` of a directed network carries a time series `Y_it` and a
//! covariate vector `z_i`. Nodes belong to one of `G` latent groups and evolve as
//!
//! ```text
//! Y_it = sum_j beta[g_i][g_j] * w_ij * Y_j(t-1) + nu[g_i] * Y_i(t-1) + z_i' zeta[g_i] + eps_it
//! ```
//!
//! with `w_ij = a_ij / n_i` the row-normalized adjacency. The crate covers the
//! whole workflow: random networks ([`net`]), forward simulation ([`model`]),
//! joint estimation of parameters and memberships ([`estimate`], seeded by
//! [`init`]), per-node membership refinement ([`refine`]), choice of `G`
//! ([`select`]), plug-in inference ([`infer`]), evaluation metrics ([`eval`]),
//! and a reproducible Monte-Carlo harness ([`campaign`]).
//!
//! Group labels are 0-based in memory and 1-based in every file format.

pub mod campaign;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod infer;
pub mod init;
pub mod io;
pub mod linalg;
pub mod model;
pub mod net;
pub mod refine;
pub mod rng;
pub mod scenario;
pub mod select;

pub use error::{Error, Result};
pub use estimate::{fit, FitOptions, FitResult};
pub use model::{GnarParams, Membership, NoiseSpec, Panel};
pub use net::{Network, WeightMatrix};
