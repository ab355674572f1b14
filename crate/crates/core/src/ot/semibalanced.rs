use super::{objective, OtParams, TransportPlan};
use crate::error::Result;
use crate::numeric::special::logsumexp_unchecked;
use crate::numeric::Matrix;

/// Step size of the mirror-descent iteration on the semi-balanced problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MirrorStep {
    /// Step `1/(γ+ρ)`: each iterate exactly minimises the objective with the
    /// column KL term majorised at the previous plan, so the objective never
    /// increases.
    #[default]
    Majorized,
    /// Unit step: `K = exp((−C − ρ·log(m·Pᵀ1))/γ)` then row normalisation.
    /// Oscillates and can diverge once `ρ ≳ γ`.
    Unit,
}

/// Semi-balanced entropic OT with the default (monotone) step.
pub fn semibalanced_solve(cost: &Matrix, params: &OtParams) -> Result<TransportPlan> {
    semibalanced_solve_with(cost, params, MirrorStep::Majorized)
}

/// Row-normalised plan `P_ij ∝ exp(−C_ij/γ + β_j)` with rows summing to `1/n`.
fn plan_from_columns(cost: &Matrix, gamma: f64, beta: &[f64], out: &mut Matrix) {
    let log_n = (cost.rows() as f64).ln();
    for i in 0..cost.rows() {
        let row = out.row_mut(i);
        for ((o, &c), &b) in row.iter_mut().zip(cost.row(i)).zip(beta) {
            *o = -c / gamma + b;
        }
        let lse = logsumexp_unchecked(row);
        row.iter_mut().for_each(|v| *v = (*v - lse - log_n).exp());
    }
}

/// Mirror-descent (KL-projected) iteration for
/// `⟨P,C⟩ + ρ·KL(Pᵀ1 ‖ 1/m) + γ⟨P, log P⟩` subject to `P·1 = 1/n`.
///
/// Starting from the uniform plan, every iterate has the form
/// `P = diag(u)·exp(−C/γ)·diag(e^β)` (the first is the closed-form plan,
/// `β = 0`), so the state is the column log-scaling `β`:
/// - majorised step: `β ← ρ/(γ+ρ) · (β − log(m·Pᵀ1))`,
/// - unit step: `β ← −(ρ/γ) · log(m·Pᵀ1)`.
///
/// Stops once the max-abs change of `P` drops below `tol`.
pub fn semibalanced_solve_with(
    cost: &Matrix,
    params: &OtParams,
    step: MirrorStep,
) -> Result<TransportPlan> {
    params.validate()?;
    let (n, m) = cost.shape();
    let (gamma, rho) = (params.gamma, params.rho);
    let log_m = (m as f64).ln();

    let mut plan = Matrix::filled(n, m, 1.0 / (n * m) as f64);
    let mut next = Matrix::zeros(n, m);
    let mut beta = vec![0.0; m];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iter {
        if iterations > 0 && rho > 0.0 {
            let cols = plan.col_sums();
            for (b, c) in beta.iter_mut().zip(cols) {
                let excess = c.ln() + log_m;
                *b = match step {
                    MirrorStep::Majorized => rho / (gamma + rho) * (*b - excess),
                    MirrorStep::Unit => -rho / gamma * excess,
                };
            }
        }
        iterations += 1;
        plan_from_columns(cost, gamma, &beta, &mut next);
        let change = next.max_abs_diff(&plan);
        std::mem::swap(&mut plan, &mut next);
        history.push(objective(cost, &plan, gamma, rho));
        if !change.is_finite() {
            break;
        }
        if change < params.tol {
            converged = true;
            break;
        }
    }

    Ok(TransportPlan {
        matrix: plan,
        iterations,
        converged,
        objective_history: history,
    })
}
