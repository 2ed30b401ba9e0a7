//! Latent-space communication between two small decoder-only transformer
//! agents: a reasoning agent transmits its last-layer hidden states, and an
//! actor agent consumes them through a communication adapter.

pub mod actor;
pub mod agent;
pub mod analysis;
pub mod autograd;
pub mod channel;
pub mod checkpoint;
pub mod compression;
pub mod data;
pub mod error;
pub mod lm;
pub mod minihouse;
pub mod model;
pub mod optim;
pub mod perturb;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
