//! Interpretable reduced-order models of high-dimensional time series.
//!
//! An autoencoder maps states to a few complex latent coordinates whose
//! dynamics are linear and diagonal, `dz/dt = −λ z`. The deterministic
//! variant fits reconstruction plus latent propagation; the probabilistic
//! variant places a stationary Ornstein–Uhlenbeck prior on the latents and
//! maximizes an evidence lower bound.

pub mod config;
pub mod datagen;
pub mod error;
pub mod latent;
pub mod model;
pub mod networks;
pub mod objectives;
pub mod optimize;
pub mod rollout;
pub mod tensor;

pub use config::{Experiment, RunConfig};
pub use datagen::{Dataset, TimeSeries};
pub use error::{Error, Result};
pub use latent::{LatentState, OUParams, SpectrumParams};
pub use model::{Checkpoint, Model, Variant};
pub use networks::{ArchKind, ArchitectureSpec};
pub use optimize::{TrainConfig, TrainLog};
pub use rollout::{PhaseCloud, Rollout};
pub use tensor::DenseTensor;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
