//! Dense linear algebra, stable special functions, seeded random streams and
//! reverse-mode gradients.

pub(crate) mod matrix;
mod rng;
pub(crate) mod special;
pub mod tape;

pub use matrix::Matrix;
pub use rng::{RngStream, StreamId};
pub use special::{logsumexp, pairwise_sqdist, softmax_in_place};
pub use tape::{Gradients, Tape, Var};
