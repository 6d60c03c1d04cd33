//! Dense arrays, reverse-mode differentiation, and optimizer primitives.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;

pub use array::DenseArray;
pub use optim::{clip_global_norm, AdamConfig, AdamState};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{log_softmax, sigmoid, Graph, NodeId};
