//! Hybrid associative memory: a gated delta-rule recurrent state paired with
//! a sparse key-value scratchpad that only stores tokens the recurrence
//! predicts badly.
//!
//! [`layer::forward`] runs one layer. [`cost`] counts parameters, FLOPs and
//! memory for the layer and three reference architectures.
//! [`controller`] steers the routing threshold toward a target cache fraction.

pub mod analysis;
pub mod controller;
pub mod cost;
pub mod error;
pub mod io;
pub mod layer;
pub mod math;
pub mod rnn;
pub mod router;
pub mod scratchpad;

pub use error::{HamError, Result};
pub use math::Matrix;
