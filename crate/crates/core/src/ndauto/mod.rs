//! Dense arrays, a reverse-mode tape over array primitives, and Adam.

mod adam;
mod array;
mod tape;

use std::collections::BTreeMap;

pub use adam::{AdamState, DEFAULT_LR};
pub use array::Array;
pub use tape::{Gradients, NodeId, Tape};

/// Named parameter arrays in canonical (lexicographic) order.
pub type Params = BTreeMap<String, Array>;

/// Normalization epsilon used by every norm layer.
pub const NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
