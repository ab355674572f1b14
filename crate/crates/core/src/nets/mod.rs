//! Trainable components: MLP encoders, conditional affine-coupling flows and
//! the Adam optimizer.

mod adam;
mod checkpoint;
mod flow;
mod mlp;

pub use adam::AdamState;
pub use checkpoint::{fmt_f64, Checkpoint};
pub use flow::{
    identity_log_prob_at_center, to_bounded, to_unbounded, FlowConfig, FlowModel, LatentTrace,
};
pub use mlp::{stack_rows, Embedding, Linear, Mlp, MlpEncoder, EMBEDDING_DIM};

use crate::numeric::{Matrix, Tape, Var};

/// A set of trainable matrices with a stable order.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Matrix>;
    fn parameters_mut(&mut self) -> Vec<&mut Matrix>;

    /// Records the parameters on `tape`; `trainable = false` records constants.
    fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|m| {
                if trainable {
                    tape.leaf(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|m| m.len()).sum()
    }
}
