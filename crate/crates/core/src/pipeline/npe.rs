//! Stage 0: neural posterior estimation on simulated pairs.

use serde::{Deserialize, Serialize};

use super::{collect_grads, epoch_batches, restore, snapshot, TrainReport};
use crate::error::{Error, Result};
use crate::nets::{stack_rows, AdamState, FlowConfig, FlowModel, MlpEncoder, Parameterized};
use crate::numeric::{Matrix, RngStream, StreamId, Tape};
use crate::simulate::{LabeledObservation, PriorBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for NpeConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NpeModels {
    pub nse: MlpEncoder,
    pub npe: FlowModel,
    pub report: TrainReport,
}

/// Stacked `(x, θ)` of labelled samples.
pub(crate) fn stack_pairs(data: &[LabeledObservation]) -> Result<(Matrix, Matrix)> {
    let xs = stack_rows(data.iter().map(|d| d.x.as_slice()))?;
    let th: Vec<[f64; 2]> = data.iter().map(|d| d.theta.as_array()).collect();
    Ok((xs, Matrix::from_rows(&th)?))
}

/// Mean `−log q_ψ(θ | h(x))` over `data` with frozen models.
pub fn npe_nll(nse: &MlpEncoder, npe: &FlowModel, data: &[LabeledObservation]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let (xs, th) = stack_pairs(data)?;
    let ctx = nse.encode_batch(&xs)?;
    let lp = npe.log_prob_batch(&th, &ctx)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Fits `h_ω` and `q_ψ` jointly by minibatch Adam on `−log q_ψ(θ | h_ω(x))`.
pub fn train_npe(
    d_sbi: &[LabeledObservation],
    flow: &FlowConfig,
    cfg: &NpeConfig,
    seed: u64,
) -> Result<NpeModels> {
    if d_sbi.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let init = RngStream::new(seed, StreamId::Init);
    let mut nse = MlpEncoder::new(&mut init.substream(0));
    let mut npe = FlowModel::new(*flow, &mut init.substream(1));
    let (xs, th) = stack_pairs(d_sbi)?;

    let mut params: Vec<&Matrix> = nse.parameters();
    params.extend(npe.parameters());
    let mut adam = AdamState::new(&params, cfg.lr);
    let batching = RngStream::new(seed, StreamId::Batching);
    let mut report = TrainReport::default();
    let mut saved = (snapshot(&nse), snapshot(&npe));

    'epochs: for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(d_sbi.len(), cfg.batch_size, &mut batching.substream(epoch as u64));
        for idx in &batches {
            let tape = Tape::new();
            let ev = nse.bind(&tape, true);
            let fv = npe.bind(&tape, true);
            let x = tape.constant(xs.select_rows(idx));
            let ctx = nse.forward(&tape, &ev, x);
            let lp = npe.log_prob_on_tape(&tape, &fv, &th.select_rows(idx), ctx)?;
            let loss = tape.scale(tape.sum(lp), -1.0 / idx.len() as f64);
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                report.diverged = true;
                break 'epochs;
            }
            total += value;
            let grads = tape.backward(loss)?;
            let mut vars = ev;
            vars.extend(fv);
            let mut refs = nse.parameters();
            refs.extend(npe.parameters());
            let g = collect_grads(&grads, &vars, &refs);
            let mut pm = nse.parameters_mut();
            pm.extend(npe.parameters_mut());
            adam.step(&mut pm, &g)?;
        }
        report.epoch_losses.push(total / batches.len() as f64);
        saved = (snapshot(&nse), snapshot(&npe));
    }
    if report.diverged {
        restore(&mut nse, &saved.0);
        restore(&mut npe, &saved.1);
        report.warn("diverged");
    } else if report.final_loss().is_some_and(|l| l >= -PriorBox::log_density()) {
        report.warn("npe-not-better-than-prior");
    }
    Ok(NpeModels { nse, npe, report })
}
