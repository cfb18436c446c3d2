//! Residual CNN training toolkit: autodiff tensors, layers, ResNet presets with
//! a regularized classification head, partial fine-tuning, cosine-decay
//! optimization, callback-driven training, an augmented image pipeline, and
//! classification metrics.

pub mod cli;
pub mod data;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
