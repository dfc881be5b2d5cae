//! Reverse-mode differentiation, networks, optimizer and random streams.

mod adam;
mod mlp;
mod rng;
mod special;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Activation, BatchCache, Binding, LayerShape, MlpParams};
pub use rng::{gaussian_sample, Rng};
pub use special::{sigmoid, signed_log1p, softminus, softplus};
pub use tape::{Adjoints, Leaves, NodeId, Scalar, Tape};
