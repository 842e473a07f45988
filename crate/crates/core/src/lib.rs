//! Neural Wasserstein geodesics between sampled distributions.
//!
//! Particle paths `G(t; z) = z + t·F(z, t)` are trained against a
//! spectrally normalized critic so that `G(1; ·)` pushes the source onto the
//! target at minimal path cost; a second network then regresses the
//! Eulerian velocity field along those paths. Exact references (Bures
//! distance, McCann interpolation, harmonic trajectories, assignment-based
//! Wasserstein distances) live in [`oracles`].

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracles;
pub mod rng;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{parse_config, Experiment, RunConfig};
pub use datasets::DistributionSpec;
pub use error::{Error, Result};
pub use gaussian::GaussianSpec;
pub use linalg::Matrix;
pub use model::{CriticNet, GeodesicNet, LagrangianSpec, VelocityNet};
pub use nn::{Mlp, MlpParams, MlpSpec};
pub use rng::SeededRng;
pub use train::{MetricsRecord, TrainConfig};
