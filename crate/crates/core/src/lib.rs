//! Shared-backbone multi-task models that split at the feature boundary.
//!
//! The crate covers the full loop: a seeded tensor/autodiff core, the
//! backbone-plus-heads model, joint and two-rate training, a procedural
//! factor dataset, the split-point wire protocol, simulated and socket
//! transports, and static size/latency analysis of the deployment
//! paradigms (local-only, remote-only, split).

pub mod analyzer;
pub mod canonical;
pub mod channel;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transport;
pub mod wire;

pub use model::{BackboneSlice, HeadsSlice, ModelConfig, MtlModel, TaskSpec};
pub use rng::Rng;
pub use tape::{Gradients, Tape};
pub use tensor::{Tensor, TensorError};
