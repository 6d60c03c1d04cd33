//! Online monotonic sequence transduction with adaptive computation steps.
//!
//! A pyramidal recurrent encoder produces downsampled states; a halting layer
//! turns each state into an activation in (0, 1) and accumulates them until
//! the running sum reaches `1 - epsilon`, at which point the segment's states
//! are pooled into one context vector and the decoder emits one symbol.
//! Alignment is decided entirely on the encoder side, so decoding is linear
//! in input plus output length and works frame by frame.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoder;
pub mod encoder;
pub mod halting;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod search;
pub mod tasks;
pub mod training;

mod error;

pub use error::{Error, Result};
