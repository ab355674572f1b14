//! Entropic optimal transport between embedding clouds: the closed-form
//! row-softmax coupling, the semi-balanced mirror-descent solver and
//! balanced Sinkhorn.
//!
//! All costs are squared Euclidean distances and all kernels are handled in
//! log space.

mod closed_form;
mod semibalanced;
mod sinkhorn;

pub use closed_form::{closed_form_plan, mixture_weights, mixture_weights_batch};
pub use semibalanced::{semibalanced_solve, semibalanced_solve_with, MirrorStep};
pub use sinkhorn::{
    sinkhorn_balanced, sinkhorn_with_potentials, ExtendedRow, ExtendedSinkhorn, SinkhornPotentials,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Solver settings for the entropic problem
/// `⟨P,C⟩ + ρ·KL(Pᵀ1 ‖ 1/m) + γ·⟨P, log P⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtParams {
    pub gamma: f64,
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for OtParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            rho: 0.0,
            max_iter: 50_000,
            tol: 1e-9,
        }
    }
}

impl OtParams {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(self.rho >= 0.0) {
            return Err(Error::BadRho);
        }
        Ok(())
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::BadGamma)
    }
}

/// A coupling with rows summing to `1/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Matrix,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each iterate, for iterative solvers.
    pub objective_history: Vec<f64>,
}

impl TransportPlan {
    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn m(&self) -> usize {
        self.matrix.cols()
    }

    /// Row `i` rescaled to a probability vector (`n·P_i·`).
    pub fn mixture_row(&self, i: usize) -> Vec<f64> {
        let n = self.n() as f64;
        self.matrix.row(i).iter().map(|p| p * n).collect()
    }

    /// `−Σ P log P`.
    pub fn entropy(&self) -> f64 {
        -self
            .matrix
            .as_slice()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Warns when an iterative solver stopped at its iteration cap.
    pub fn warn_if_not_converged(&self, what: &str) {
        if !self.converged {
            log::warn!("not-converged: {what} after {} iterations", self.iterations);
        }
    }
}

/// `⟨P,C⟩ + ρ·KL(Pᵀ1 ‖ 1/m) + γ·⟨P, log P⟩` with `0·log 0 = 0`.
pub fn objective(cost: &Matrix, plan: &Matrix, gamma: f64, rho: f64) -> f64 {
    let m = plan.cols() as f64;
    let mut transport = 0.0;
    let mut neg_entropy = 0.0;
    for (&p, &c) in plan.as_slice().iter().zip(cost.as_slice()) {
        transport += p * c;
        if p > 0.0 {
            neg_entropy += p * p.ln();
        }
    }
    let kl = if rho > 0.0 {
        plan.col_sums()
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| s * (s * m).ln())
            .sum::<f64>()
    } else {
        0.0
    };
    transport + rho * kl + gamma * neg_entropy
}
