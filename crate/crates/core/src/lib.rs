//! Multi-agent reinforcement learning on a sparse-reward warehouse grid.
//!
//! The crate bundles a small reverse-mode tensor library, the warehouse
//! simulator, an episode replay buffer, a QMIX/VDN value-decomposition
//! learner, an independent PPO baseline and the training harness behind the
//! `marl` command.

pub mod autodiff;
pub mod checkpoint;
pub mod env;
pub mod gradcheck;
pub mod harness;
pub mod error;
pub mod experience;
pub mod ippo;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod value_decomposition;

pub use error::{Error, Result};
pub use tensor::Tensor;
