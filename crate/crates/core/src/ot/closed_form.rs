use super::{check_gamma, TransportPlan};
use crate::error::{Error, Result};
use crate::numeric::special::logsumexp_unchecked;
use crate::numeric::{pairwise_sqdist, Matrix};

/// Writes `softmax(−c/γ)` into `out`.
fn softmax_neg_cost(c: &[f64], gamma: f64, out: &mut [f64]) {
    for (o, &cij) in out.iter_mut().zip(c) {
        *o = -cij / gamma;
    }
    let lse = logsumexp_unchecked(out);
    for o in out.iter_mut() {
        *o = (*o - lse).exp();
    }
}

/// Minimiser of `⟨P,C⟩ + γ⟨P, log P⟩` over plans with rows summing to `1/n`:
/// `P_ij = softmax_j(−C_ij/γ) / n`. Each row depends on its own costs only.
pub fn closed_form_plan(cost: &Matrix, gamma: f64) -> Result<TransportPlan> {
    check_gamma(gamma)?;
    let n = cost.rows();
    let mut p = Matrix::zeros(n, cost.cols());
    for i in 0..n {
        let row = p.row_mut(i);
        softmax_neg_cost(cost.row(i), gamma, row);
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(TransportPlan {
        matrix: p,
        iterations: 0,
        converged: true,
        objective_history: Vec::new(),
    })
}

/// Mixture weights of one embedding over the atoms `w` (rows):
/// `α_j = softmax_j(−‖z − w_j‖²/γ)`.
pub fn mixture_weights(z: &[f64], atoms: &Matrix, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if atoms.rows() == 0 {
        return Err(Error::EmptyAtlas);
    }
    let zrow = Matrix::from_vec(1, z.len(), z.to_vec())?;
    let cost = pairwise_sqdist(&zrow, atoms)?;
    let mut alpha = vec![0.0; atoms.rows()];
    softmax_neg_cost(cost.row(0), gamma, &mut alpha);
    Ok(alpha)
}

/// [`mixture_weights`] for every row of `z`.
pub fn mixture_weights_batch(z: &Matrix, atoms: &Matrix, gamma: f64) -> Result<Matrix> {
    check_gamma(gamma)?;
    if atoms.rows() == 0 {
        return Err(Error::EmptyAtlas);
    }
    let cost = pairwise_sqdist(z, atoms)?;
    let mut alpha = Matrix::zeros(z.rows(), atoms.rows());
    for i in 0..z.rows() {
        softmax_neg_cost(cost.row(i), gamma, alpha.row_mut(i));
    }
    Ok(alpha)
}
