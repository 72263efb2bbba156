//! Trajectory-geometry toolkit: trains a miniature decoder-only transformer
//! under a configurable optimizer suite, records bit-exact parameter
//! checkpoints, and analyzes the cumulative parameter trajectory (uncentered
//! PCA backbone, backbone-residual decomposition, rolling/phase alignment,
//! power-law regimes, update and gradient alignment, Fisher Rayleigh probes,
//! switching directions, reheating).

pub mod backbone;
pub mod checkpoint;
pub mod curvature;
pub mod direction;
pub mod error;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod pca;
pub mod task;
pub mod train;

pub use error::{Error, Result};
