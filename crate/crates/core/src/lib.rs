//! Graph-network policies over a robot's kinematic chain, fed by a separately
//! supervised image encoder and trained with PPO on a planar reaching task.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors, a reverse-mode tape and Adam.
//! - [`env`]: the planar N-link reacher and its 100×100 rasterizer.
//! - [`graph`]: kinematic-chain graph construction and GCN propagation.
//! - [`model`]: encoder, input models, graph/MLP policies, value function,
//!   initialization and checkpoints.
//! - [`ppo`]: rollout buffer, GAE, clipped-surrogate loss and updates.
//! - [`train`]: the outer loop alternating policy and encoder optimization.
//! - [`harness`]: run configuration, CSV logs, summaries, plots.
//! - [`verify`]: the self-check suite behind the `verify` subcommand.

pub mod autodiff;
pub mod env;
mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod ppo;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
