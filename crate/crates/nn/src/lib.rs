//! Minimal CPU tensor and convolutional-network core: conv / max-pool /
//! dense / ReLU / softmax layers with backprop, cross-entropy and Huber
//! losses, Adam(W), finite-difference gradient checks and binary checkpoints.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod layers;
pub mod loss;
mod network;
pub mod optim;
mod scalar;
mod spec;
mod tensor;

pub use error::NnError;
pub use network::{Gradients, Network};
pub use optim::{adam_step, Adam, AdamConfig};
pub use scalar::Scalar;
pub use spec::{LayerSpec, NetworkSpec};
pub use tensor::Tensor;
