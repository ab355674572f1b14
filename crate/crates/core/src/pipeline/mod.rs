//! The three training stages and amortized inference.
//!
//! - Stage 0 ([`train_npe`]): a summary encoder `h` and conditional flow `q_ψ`
//!   fitted jointly on simulated pairs, then frozen.
//! - Stage 1 ([`train_transfer`]): a real-data encoder `g`, initialised at `h`,
//!   trained on entropic OT towards cached simulation embeddings plus a
//!   supervised term on calibration pairs ([`joint_loss`]).
//! - Stage 2 ([`amortize`]): a second flow `q_ξ(θ | g(x))` distilled from the
//!   transport mixtures `Σ_j α_ij q_ψ(θ | w_j)` over the unpaired reals.

mod amortize;
mod npe;
mod transfer;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use amortize::{amortize, sparsify, AmortizeConfig, SparseWeights};
pub use npe::{npe_nll, train_npe, NpeConfig, NpeModels};
pub use transfer::{
    joint_loss, rope_finetune, supervised_term, train_transfer, JointLoss, JointLossConfig,
    TransferOutcome,
};

use crate::error::Result;
use crate::nets::{FlowModel, MlpEncoder, Parameterized};
use crate::numeric::{Gradients, Matrix, RngStream, Var};
use crate::posterior::Posterior;
use crate::simulate::{Observation, ParameterVector};

/// Loss trace of one training stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    /// A non-finite loss stopped training; parameters are those of the last
    /// finite epoch.
    pub diverged: bool,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    pub(crate) fn warn(&mut self, code: &str) {
        log::warn!("{code}");
        self.warnings.push(code.to_string());
    }
}

/// All trained parts of the full method.
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub nse: MlpEncoder,
    pub npe: Arc<FlowModel>,
    pub real_encoder: MlpEncoder,
    pub amortizer: Arc<FlowModel>,
    /// `h(x)` for every transport target (OT simulations, then calibration
    /// simulations).
    pub sim_embeddings: Matrix,
    pub gamma: f64,
}

/// Posterior samples and the density they came from.
#[derive(Debug, Clone)]
pub struct Inference {
    pub samples: Vec<ParameterVector>,
    pub posterior: Posterior,
}

/// `q_ξ(θ | g(x))` for one real observation.
pub fn amortized_posterior(
    real_encoder: &MlpEncoder,
    amortizer: &Arc<FlowModel>,
    x: &Observation,
) -> Result<Posterior> {
    let z = real_encoder.encode(x.as_slice())?;
    Ok(Posterior::Flow {
        flow: amortizer.clone(),
        context: z.as_slice().to_vec(),
    })
}

/// Encodes `x` with the trained real encoder and samples the amortizer.
pub fn infer(
    x: &Observation,
    pipeline: &TrainedPipeline,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<Inference> {
    let posterior = amortized_posterior(&pipeline.real_encoder, &pipeline.amortizer, x)?;
    let samples = posterior.sample(n_samples, rng)?;
    Ok(Inference { samples, posterior })
}

/// Minibatch index lists for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn collect_grads(grads: &Gradients, vars: &[Var], params: &[&Matrix]) -> Vec<Matrix> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| grads.wrt_or_zeros(v, p.shape()))
        .collect()
}

pub(crate) fn snapshot<P: Parameterized + ?Sized>(model: &P) -> Vec<Matrix> {
    model.parameters().into_iter().cloned().collect()
}

pub(crate) fn restore<P: Parameterized + ?Sized>(model: &mut P, saved: &[Matrix]) {
    for (p, s) in model.parameters_mut().into_iter().zip(saved) {
        p.clone_from(s);
    }
}
