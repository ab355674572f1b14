//! Stage 2: distilling transport mixtures into a conditional flow.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{collect_grads, epoch_batches, restore, snapshot, TrainReport};
use crate::error::{Error, Result};
use crate::nets::{AdamState, FlowConfig, FlowModel, Parameterized};
use crate::numeric::{Matrix, RngStream, StreamId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmortizeConfig {
    /// Flow samples per mixture atom.
    pub k: usize,
    /// Atoms with `α < weight_floor` are dropped before renormalising.
    pub weight_floor: f64,
    /// Optional cap on the atoms kept per point (largest weights first).
    pub max_atoms: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for AmortizeConfig {
    fn default() -> Self {
        Self {
            k: 8,
            weight_floor: 1e-6,
            max_atoms: Some(32),
            batch_size: 64,
            epochs: 20,
            lr: 1e-3,
        }
    }
}

impl AmortizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Format("amortize.k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.weight_floor) {
            return Err(Error::Format("amortize.weight_floor must lie in [0, 1)".into()));
        }
        if self.max_atoms == Some(0) {
            return Err(Error::Format("amortize.max_atoms must be positive".into()));
        }
        Ok(())
    }
}

/// Truncated, renormalised mixture weights: `rows[i]` lists `(j, α̃_ij)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeights {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n_atoms: usize,
}

impl SparseWeights {
    /// Atoms referenced by at least one row, ascending.
    pub fn used_atoms(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self.rows.iter().flatten().map(|&(j, _)| j).collect();
        used.sort_unstable();
        used.dedup();
        used
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// Drops weights below `floor`, keeps at most `max_atoms` per row and
/// renormalises. A row whose weights all fall below the floor keeps its
/// largest atom.
pub fn sparsify(alpha: &Matrix, floor: f64, max_atoms: Option<usize>) -> Result<SparseWeights> {
    if alpha.cols() == 0 {
        return Err(Error::EmptyAtlas);
    }
    let rows = (0..alpha.rows())
        .map(|i| {
            let row = alpha.row(i);
            let mut kept: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|&(_, &a)| a >= floor)
                .map(|(j, &a)| (j, a))
                .collect();
            if kept.is_empty() {
                let j = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("non-empty");
                kept.push((j, row[j]));
            }
            if let Some(cap) = max_atoms {
                if kept.len() > cap {
                    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    kept.truncate(cap);
                    kept.sort_by_key(|&(j, _)| j);
                }
            }
            let total: f64 = kept.iter().map(|&(_, a)| a).sum();
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::Format(format!("row {i} has no positive weight")));
            }
            Ok(kept.into_iter().map(|(j, a)| (j, a / total)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(SparseWeights {
        rows,
        n_atoms: alpha.cols(),
    })
}

/// Fits `q_ξ(θ | z_i)` to the mixtures `Σ_j α̃_ij q_ψ(θ | w_j)` by minimising
/// `−(1/|B|) Σ_i (1/K) Σ_j α̃_ij Σ_k log q_ξ(θ_jk | z_i)`, with
/// `θ_jk ~ q_ψ(· | w_j)` redrawn every epoch.
///
/// `contexts` holds `z_i` (rows of `weights`), `atoms` holds `w_j`.
pub fn amortize(
    contexts: &Matrix,
    weights: &SparseWeights,
    atoms: &Matrix,
    npe: &FlowModel,
    flow: &FlowConfig,
    cfg: &AmortizeConfig,
    seed: u64,
) -> Result<(FlowModel, TrainReport)> {
    cfg.validate()?;
    if contexts.rows() != weights.rows.len() || atoms.rows() != weights.n_atoms {
        return Err(Error::Shape(format!(
            "{} contexts / {} atoms for weights over {}×{}",
            contexts.rows(),
            atoms.rows(),
            weights.rows.len(),
            weights.n_atoms
        )));
    }
    if contexts.rows() == 0 {
        return Err(Error::EmptyRequest);
    }
    let mut q = FlowModel::new(*flow, &mut RngStream::new(seed, StreamId::Init).substream(2));
    let mut adam = AdamState::new(&q.parameters(), cfg.lr);
    let used = weights.used_atoms();
    let slot: BTreeMap<usize, usize> = used.iter().enumerate().map(|(s, &j)| (j, s)).collect();
    let mut atom_ctx = Matrix::zeros(used.len() * cfg.k, atoms.cols());
    for (s, &j) in used.iter().enumerate() {
        for k in 0..cfg.k {
            atom_ctx.row_mut(s * cfg.k + k).copy_from_slice(atoms.row(j));
        }
    }
    let sampling = RngStream::new(seed, StreamId::FlowSampling);
    let batching = RngStream::new(seed, StreamId::Batching);
    let mut report = TrainReport::default();
    let mut saved = snapshot(&q);

    'epochs: for epoch in 0..cfg.epochs {
        let draws = npe.sample_batch(&atom_ctx, &mut sampling.substream(epoch as u64))?;
        let batches = epoch_batches(contexts.rows(), cfg.batch_size, &mut batching.substream(epoch as u64));
        let mut total = 0.0;
        for idx in &batches {
            let rows: usize = idx.iter().map(|&i| weights.rows[i].len()).sum::<usize>() * cfg.k;
            let mut th = Matrix::zeros(rows, 2);
            let mut ctx = Matrix::zeros(rows, contexts.cols());
            let mut w = Vec::with_capacity(rows);
            let mut r = 0;
            for &i in idx {
                for &(j, a) in &weights.rows[i] {
                    let base = slot[&j] * cfg.k;
                    for k in 0..cfg.k {
                        th.row_mut(r).copy_from_slice(draws.row(base + k));
                        ctx.row_mut(r).copy_from_slice(contexts.row(i));
                        w.push(a / cfg.k as f64);
                        r += 1;
                    }
                }
            }
            let tape = Tape::new();
            let pv = q.bind(&tape, true);
            let lp = q.log_prob_on_tape(&tape, &pv, &th, tape.constant(ctx))?;
            let weighted = tape.mul_const(lp, Matrix::column_vector(w));
            let loss = tape.scale(tape.sum(weighted), -1.0 / idx.len() as f64);
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                report.diverged = true;
                break 'epochs;
            }
            total += value;
            let grads = tape.backward(loss)?;
            let g = collect_grads(&grads, &pv, &q.parameters());
            adam.step(&mut q.parameters_mut(), &g)?;
        }
        report.epoch_losses.push(total / batches.len() as f64);
        saved = snapshot(&q);
    }
    if report.diverged {
        restore(&mut q, &saved);
        report.warn("diverged");
    }
    let l = &report.epoch_losses;
    let probe = l.len().min(10);
    if probe >= 2 && l[probe - 1] >= l[0] {
        report.warn("amortizer-not-learning");
    }
    Ok((q, report))
}
