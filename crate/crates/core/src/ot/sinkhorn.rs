use super::{check_gamma, TransportPlan};
use crate::error::{Error, Result};
use crate::numeric::special::logsumexp_unchecked;
use crate::numeric::Matrix;

/// Dual scalings of a balanced plan: `P_ij = exp(−C_ij/γ + f_i + g_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornPotentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

/// Balanced entropic OT between uniform marginals `1/n` and `1/m`.
///
/// Scaling iterations run in the linear domain on a kernel stabilised by
/// absorbed dual potentials, with the temperature annealed geometrically
/// from the cost range down to `γ`. Each sweep ends on the row update, so
/// rows are exact; convergence is declared once every column sum is within
/// `tol` at the target temperature. `iterations` counts all sweeps.
pub fn sinkhorn_balanced(cost: &Matrix, gamma: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    Ok(sinkhorn_with_potentials(cost, gamma, max_iter, tol)?.0)
}

/// Scalings beyond `e^ABSORB` are folded into the potentials.
const ABSORB: f64 = 50.0;
/// Temperature ratio between annealing stages.
const ANNEAL: f64 = 0.5;
/// Sweeps per intermediate temperature.
const STAGE_SWEEPS: usize = 20;

/// Stabilised kernel `exp((φ_i + ψ_j − C_ij)/ε)` in row-major and
/// transposed layouts.
struct Kernel {
    k: Matrix,
    kt: Matrix,
}

impl Kernel {
    fn build(cost: &Matrix, phi: &[f64], psi: &[f64], eps: f64) -> Self {
        let (n, m) = cost.shape();
        let mut k = Matrix::zeros(n, m);
        for i in 0..n {
            let (c, out) = (cost.row(i), k.row_mut(i));
            for j in 0..m {
                out[j] = ((phi[i] + psi[j] - c[j]) / eps).exp();
            }
        }
        let kt = k.transpose();
        Self { k, kt }
    }
}

fn mat_vec(k: &Matrix, v: &[f64], out: &mut [f64]) {
    for (o, i) in out.iter_mut().zip(0..k.rows()) {
        *o = k.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// Exact log-domain sweep; repairs the potentials when the stabilised kernel
/// underflows a whole row or column.
fn log_sweep(cost: &Matrix, phi: &mut [f64], psi: &mut [f64], eps: f64) {
    let (n, m) = cost.shape();
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut buf = vec![0.0; n.max(m)];
    for j in 0..m {
        for i in 0..n {
            buf[i] = (phi[i] - cost.get(i, j)) / eps;
        }
        psi[j] = eps * (log_b - logsumexp_unchecked(&buf[..n]));
    }
    for i in 0..n {
        let c = cost.row(i);
        for j in 0..m {
            buf[j] = (psi[j] - c[j]) / eps;
        }
        phi[i] = eps * (log_a - logsumexp_unchecked(&buf[..m]));
    }
}

pub fn sinkhorn_with_potentials(
    cost: &Matrix,
    gamma: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(TransportPlan, SinkhornPotentials)> {
    check_gamma(gamma)?;
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(Error::EmptyAtlas);
    }
    let (r, c) = (1.0 / n as f64, 1.0 / m as f64);
    let span = cost.as_slice().iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let mut eps = span.max(gamma);
    let mut phi = vec![0.0; n];
    let mut psi = vec![0.0; m];
    let mut kern = Kernel::build(cost, &phi, &psi, eps);
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; m];
    let mut kta = vec![0.0; m];
    let mut kb = vec![0.0; n];
    let mut iterations = 0;
    let mut stage_sweeps = 0;
    let mut converged = false;

    loop {
        mat_vec(&kern.kt, &a, &mut kta);
        let err = kta
            .iter()
            .zip(&b)
            .map(|(s, bj)| (s * bj - c).abs())
            .fold(0.0, f64::max);
        let at_target = eps == gamma;
        if at_target && iterations > 0 && err < tol {
            converged = true;
            break;
        }
        if iterations == max_iter {
            break;
        }
        let finish_stage = !at_target && (stage_sweeps >= STAGE_SWEEPS || err < tol);
        let unstable = !err.is_finite() || kta.iter().any(|&s| !(s > 0.0));
        if !finish_stage && !unstable {
            for (bj, s) in b.iter_mut().zip(&kta) {
                *bj = c / s;
            }
            mat_vec(&kern.k, &b, &mut kb);
            if kb.iter().all(|&s| s > 0.0 && s.is_finite()) {
                for (ai, s) in a.iter_mut().zip(&kb) {
                    *ai = r / s;
                }
                iterations += 1;
                stage_sweeps += 1;
                let big = a.iter().chain(&b).any(|v| v.ln().abs() > ABSORB);
                if !big {
                    continue;
                }
            }
        }
        for (p, ai) in phi.iter_mut().zip(&a) {
            *p += eps * ai.ln();
        }
        for (p, bj) in psi.iter_mut().zip(&b) {
            *p += eps * bj.ln();
        }
        if finish_stage {
            eps = (eps * ANNEAL).max(gamma);
            stage_sweeps = 0;
        }
        if unstable || !phi.iter().chain(&psi).all(|v| v.is_finite()) {
            if !phi.iter().chain(&psi).all(|v| v.is_finite()) {
                phi.iter_mut().for_each(|v| *v = 0.0);
                psi.iter_mut().for_each(|v| *v = 0.0);
            }
            log_sweep(cost, &mut phi, &mut psi, eps);
            iterations += 1;
        }
        a.iter_mut().for_each(|v| *v = 1.0);
        b.iter_mut().for_each(|v| *v = 1.0);
        kern = Kernel::build(cost, &phi, &psi, eps);
    }

    let mut plan = kern.k;
    for i in 0..n {
        let ai = a[i];
        for (p, bj) in plan.row_mut(i).iter_mut().zip(&b) {
            *p *= ai * bj;
        }
    }
    let f = phi.iter().zip(&a).map(|(p, ai)| p / gamma + ai.ln()).collect();
    let g = psi.iter().zip(&b).map(|(p, bj)| p / gamma + bj.ln()).collect();
    Ok((
        TransportPlan {
            matrix: plan,
            iterations,
            converged,
            objective_history: Vec::new(),
        },
        SinkhornPotentials { f, g },
    ))
}

/// A balanced plan over a fixed source set, reused to couple that set
/// augmented by one extra source point at a time.
///
/// Every augmented solve starts from the same scalings (the base plan plus a
/// row-normalised kernel row for the new point), so the result for a point
/// depends on that point alone.
#[derive(Debug, Clone)]
pub struct ExtendedSinkhorn {
    /// Base plan `exp(−C/γ + f + g)`.
    kernel: Matrix,
    g: Vec<f64>,
    gamma: f64,
    max_iter: usize,
    tol: f64,
    base_converged: bool,
}

/// Result of coupling one extra source point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedRow {
    /// `(n+1)·P_new,·`; sums to one.
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ExtendedSinkhorn {
    pub fn new(base_cost: &Matrix, gamma: f64, max_iter: usize, tol: f64) -> Result<Self> {
        let (plan, pot) = sinkhorn_with_potentials(base_cost, gamma, max_iter, tol)?;
        plan.warn_if_not_converged("base sinkhorn");
        Ok(Self {
            kernel: plan.matrix,
            g: pot.g,
            gamma,
            max_iter,
            tol,
            base_converged: plan.converged,
        })
    }

    /// Replaces the iteration budget and tolerance of the per-point solves.
    pub fn with_row_limits(mut self, max_iter: usize, tol: f64) -> Self {
        self.max_iter = max_iter;
        self.tol = tol;
        self
    }

    pub fn base_rows(&self) -> usize {
        self.kernel.rows()
    }

    pub fn base_converged(&self) -> bool {
        self.base_converged
    }

    /// Balanced coupling of the base sources plus one point whose costs to
    /// the targets are `extra_cost`; returns that point's mixture weights.
    pub fn solve_row(&self, extra_cost: &[f64]) -> Result<ExtendedRow> {
        let (n, m) = self.kernel.shape();
        if extra_cost.len() != m {
            return Err(Error::Shape(format!(
                "extra cost row has {} entries, expected {m}",
                extra_cost.len()
            )));
        }
        let mut extra: Vec<f64> = extra_cost
            .iter()
            .zip(&self.g)
            .map(|(c, g)| -c / self.gamma + g)
            .collect();
        let lse = logsumexp_unchecked(&extra);
        let log_row = -(n as f64).ln() - lse;
        extra.iter_mut().for_each(|v| *v = (*v + log_row).exp());

        let rows = n + 1;
        let (r, c) = (1.0 / rows as f64, 1.0 / m as f64);
        let mut a = vec![1.0; rows];
        let mut b = vec![1.0; m];
        let mut colsum = vec![0.0; m];
        let mut iterations = 0;
        let mut converged = false;
        loop {
            colsum.iter_mut().for_each(|s| *s = 0.0);
            for i in 0..n {
                let ai = a[i];
                for (s, k) in colsum.iter_mut().zip(self.kernel.row(i)) {
                    *s += ai * k;
                }
            }
            for (s, k) in colsum.iter_mut().zip(&extra) {
                *s += a[n] * k;
            }
            let err = colsum
                .iter()
                .zip(&b)
                .map(|(s, bj)| (s * bj - c).abs())
                .fold(0.0, f64::max);
            if !err.is_finite() {
                break;
            }
            if iterations > 0 && err < self.tol {
                converged = true;
                break;
            }
            if iterations == self.max_iter {
                break;
            }
            iterations += 1;
            for (bj, s) in b.iter_mut().zip(&colsum) {
                *bj = c / s;
            }
            for i in 0..n {
                let dot: f64 = self.kernel.row(i).iter().zip(&b).map(|(k, bj)| k * bj).sum();
                a[i] = r / dot;
            }
            let dot: f64 = extra.iter().zip(&b).map(|(k, bj)| k * bj).sum();
            a[n] = r / dot;
        }
        let scale = rows as f64 * a[n];
        Ok(ExtendedRow {
            alpha: extra.iter().zip(&b).map(|(k, bj)| scale * k * bj).collect(),
            iterations,
            converged,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{RngStream, StreamId};

    fn random_cost(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, StreamId::Custom(31));
        Matrix::from_vec(n, m, (0..n * m).map(|_| rng.uniform(0.0, 4.0)).collect()).unwrap()
    }

    #[test]
    fn symmetric_two_by_two() {
        let c = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let p = sinkhorn_balanced(&c, 1.0, 1000, 1e-12).unwrap();
        let hi = 0.5 / (1.0 + (-1.0f64).exp());
        assert!(p.converged);
        assert!((p.matrix.get(0, 0) - hi).abs() < 1e-12);
        assert!((p.matrix.get(0, 1) - (0.5 - hi)).abs() < 1e-12);
        assert!((hi - 0.365529).abs() < 1e-6);
    }

    #[test]
    fn zero_cost_gives_uniform_plan() {
        let p = sinkhorn_balanced(&Matrix::zeros(3, 5), 0.5, 100, 1e-12).unwrap();
        for &v in p.matrix.as_slice() {
            assert!((v - 1.0 / 15.0).abs() < 1e-15);
        }
    }

    #[test]
    fn marginals_within_tolerance() {
        let c = random_cost(20, 30, 1);
        let p = sinkhorn_balanced(&c, 0.5, 10_000, 1e-10).unwrap();
        assert!(p.converged);
        for s in p.matrix.row_sums() {
            assert!((s - 0.05).abs() < 1e-14);
        }
        for s in p.matrix.col_sums() {
            assert!((s - 1.0 / 30.0).abs() < 1e-10);
        }
        assert!(matches!(sinkhorn_balanced(&c, 0.0, 10, 1e-9), Err(Error::BadGamma)));
    }

    /// Plain log-domain Sinkhorn run for a fixed number of sweeps.
    fn reference_plan(cost: &Matrix, gamma: f64, sweeps: usize) -> Matrix {
        let (n, m) = cost.shape();
        let (mut f, mut g) = (vec![0.0; n], vec![0.0; m]);
        for _ in 0..sweeps {
            for j in 0..m {
                let t: Vec<f64> = (0..n).map(|i| f[i] - cost.get(i, j) / gamma).collect();
                g[j] = -(m as f64).ln() - logsumexp_unchecked(&t);
            }
            for i in 0..n {
                let t: Vec<f64> = (0..m).map(|j| g[j] - cost.get(i, j) / gamma).collect();
                f[i] = -(n as f64).ln() - logsumexp_unchecked(&t);
            }
        }
        Matrix::from_vec(
            n,
            m,
            (0..n * m)
                .map(|k| (f[k / m] + g[k % m] - cost.get(k / m, k % m) / gamma).exp())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cold_regime_matches_log_domain_reference() {
        let c = random_cost(10, 12, 7).map(|v| 10.0 * v);
        let p = sinkhorn_balanced(&c, 0.5, 100_000, 1e-13).unwrap();
        assert!(p.converged);
        let r = reference_plan(&c, 0.5, 200_000);
        for (a, b) in p.matrix.as_slice().iter().zip(r.as_slice()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn small_gamma_stays_finite() {
        let c = random_cost(10, 10, 2).map(|v| 100.0 * v);
        let p = sinkhorn_balanced(&c, 0.01, 2000, 1e-9).unwrap();
        assert!(p.matrix.all_finite());
    }

    #[test]
    fn extended_row_matches_direct_solve() {
        let base = random_cost(12, 9, 3);
        let extra = random_cost(1, 9, 4);
        let ext = ExtendedSinkhorn::new(&base, 0.5, 10_000, 1e-13).unwrap();
        let row = ext.solve_row(extra.row(0)).unwrap();
        assert!(row.converged);
        assert!((row.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let full = sinkhorn_balanced(&base.vstack(&extra).unwrap(), 0.5, 10_000, 1e-13).unwrap();
        for (a, b) in row.alpha.iter().zip(full.mixture_row(12)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_point_recovers_its_row() {
        let base = random_cost(15, 10, 5);
        let ext = ExtendedSinkhorn::new(&base, 0.5, 10_000, 1e-13).unwrap();
        let dup = ext.solve_row(base.row(3)).unwrap();
        let aug = base.vstack(&base.select_rows(&[3])).unwrap();
        let full = sinkhorn_balanced(&aug, 0.5, 10_000, 1e-14).unwrap();
        for (a, b) in dup.alpha.iter().zip(full.mixture_row(3)) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn huge_gamma_is_uniform() {
        let base = random_cost(6, 4, 6);
        let ext = ExtendedSinkhorn::new(&base, 1e9, 1000, 1e-14).unwrap();
        let row = ext.solve_row(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        for a in row.alpha {
            assert!((a - 0.25).abs() < 1e-8);
        }
    }
}
