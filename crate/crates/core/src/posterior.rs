//! The posterior interface shared by every estimator: exact log-density and
//! sampling over the prior box.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nets::FlowModel;
use crate::numeric::special::logsumexp_unchecked;
use crate::numeric::{Matrix, RngStream};
use crate::simulate::{ParameterVector, PriorBox};

/// Atoms whose weight falls below this are dropped when a mixture is built.
pub const MIXTURE_PRUNE: f64 = 1e-12;

/// `Σ_j α_j q(θ | w_j)` over a shared conditional flow.
#[derive(Debug, Clone)]
pub struct PosteriorMixture {
    weights: Vec<f64>,
    contexts: Matrix,
    flow: Arc<FlowModel>,
}

impl PosteriorMixture {
    /// Keeps atoms with `α_j ≥ prune` and renormalises.
    pub fn new(alpha: &[f64], atoms: &Matrix, flow: Arc<FlowModel>, prune: f64) -> Result<Self> {
        if alpha.len() != atoms.rows() {
            return Err(Error::Shape(format!(
                "{} weights for {} atoms",
                alpha.len(),
                atoms.rows()
            )));
        }
        if alpha.is_empty() {
            return Err(Error::EmptyAtlas);
        }
        let mut keep: Vec<usize> = (0..alpha.len()).filter(|&j| alpha[j] >= prune).collect();
        if keep.is_empty() {
            let best = (0..alpha.len())
                .max_by(|&a, &b| alpha[a].total_cmp(&alpha[b]))
                .expect("non-empty");
            keep.push(best);
        }
        let total: f64 = keep.iter().map(|&j| alpha[j]).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Format("mixture weights must be positive and finite".into()));
        }
        Ok(Self {
            weights: keep.iter().map(|&j| alpha[j] / total).collect(),
            contexts: atoms.select_rows(&keep),
            flow,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn contexts(&self) -> &Matrix {
        &self.contexts
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `logsumexp_j(log α_j + log q(θ | w_j))`.
    pub fn log_prob(&self, theta: &ParameterVector) -> Result<f64> {
        let k = self.len();
        let mut thetas = Matrix::zeros(k, 2);
        for r in 0..k {
            thetas.row_mut(r).copy_from_slice(&theta.as_array());
        }
        let lq = self.flow.log_prob_batch(&thetas, &self.contexts)?;
        let terms: Vec<f64> = lq
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| w.ln() + l)
            .collect();
        Ok(logsumexp_unchecked(&terms))
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<ParameterVector>> {
        let mut cdf = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let mut ctx = Matrix::zeros(n, self.contexts.cols());
        for r in 0..n {
            let u = rng.uniform(0.0, acc);
            let j = cdf.partition_point(|&c| c <= u).min(self.len() - 1);
            ctx.row_mut(r).copy_from_slice(self.contexts.row(j));
        }
        let s = self.flow.sample_batch(&ctx, rng)?;
        Ok(rows_to_params(&s))
    }
}

fn rows_to_params(s: &Matrix) -> Vec<ParameterVector> {
    (0..s.rows())
        .map(|r| ParameterVector {
            omega0: s.get(r, 0),
            phi0: s.get(r, 1),
        })
        .collect()
}

/// A posterior over `θ` for one observation.
#[derive(Debug, Clone)]
pub enum Posterior {
    /// `q(θ | context)` for a single conditional flow.
    Flow {
        flow: Arc<FlowModel>,
        context: Vec<f64>,
    },
    Mixture(PosteriorMixture),
    /// The uniform prior over the box.
    Prior,
}

impl Posterior {
    pub fn log_prob(&self, theta: &ParameterVector) -> Result<f64> {
        match self {
            Posterior::Flow { flow, context } => flow.log_prob(theta, context),
            Posterior::Mixture(m) => m.log_prob(theta),
            Posterior::Prior => {
                if theta.in_box() {
                    Ok(PriorBox::log_density())
                } else {
                    Err(Error::Support(format!("{theta:?} outside the prior box")))
                }
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<ParameterVector>> {
        if n == 0 {
            return Err(Error::EmptyRequest);
        }
        match self {
            Posterior::Flow { flow, context } => flow.sample(context, n, rng),
            Posterior::Mixture(m) => m.sample(n, rng),
            Posterior::Prior => crate::simulate::sample_prior(n, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{FlowConfig, Parameterized, EMBEDDING_DIM};
    use crate::numeric::StreamId;

    fn flow() -> Arc<FlowModel> {
        let mut rng = RngStream::new(1, StreamId::Init);
        let mut f = FlowModel::new(FlowConfig::default(), &mut rng);
        for (k, p) in f.parameters_mut().into_iter().enumerate() {
            if k % 6 >= 4 {
                p.as_mut_slice().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
            }
        }
        Arc::new(f)
    }

    fn atoms(m: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, StreamId::Custom(5));
        Matrix::from_vec(m, EMBEDDING_DIM, (0..m * EMBEDDING_DIM).map(|_| 2.0 * rng.normal()).collect())
            .unwrap()
    }

    #[test]
    fn weights_sum_to_one_after_pruning() {
        let a = atoms(4, 2);
        let mix = PosteriorMixture::new(&[0.5, 1e-14, 0.3, 0.2 - 1e-14], &a, flow(), MIXTURE_PRUNE).unwrap();
        assert_eq!(mix.len(), 3);
        assert!((mix.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_atom_equals_its_flow() {
        let f = flow();
        let a = atoms(1, 3);
        let mix = Posterior::Mixture(PosteriorMixture::new(&[1.0], &a, f.clone(), MIXTURE_PRUNE).unwrap());
        let direct = Posterior::Flow {
            flow: f,
            context: a.row(0).to_vec(),
        };
        let theta = ParameterVector::new(1.3, 0.7).unwrap();
        assert!((mix.log_prob(&theta).unwrap() - direct.log_prob(&theta).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn mixture_integrates_to_one() {
        let a = atoms(3, 4);
        let mix = PosteriorMixture::new(&[0.2, 0.5, 0.3], &a, flow(), MIXTURE_PRUNE).unwrap();
        let n = 100;
        let (h0, h1) = (PriorBox::width(0) / n as f64, PriorBox::width(1) / n as f64);
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let t = ParameterVector {
                    omega0: PriorBox::LOWER[0] + (i as f64 + 0.5) * h0,
                    phi0: PriorBox::LOWER[1] + (j as f64 + 0.5) * h1,
                };
                mass += mix.log_prob(&t).unwrap().exp() * h0 * h1;
            }
        }
        assert!((mass - 1.0).abs() < 0.03, "mass {mass}");
    }

    #[test]
    fn samples_follow_component_weights() {
        let a = atoms(2, 5);
        let mix = PosteriorMixture::new(&[0.25, 0.75], &a, flow(), MIXTURE_PRUNE).unwrap();
        let s = mix.sample(2000, &mut RngStream::new(6, StreamId::FlowSampling)).unwrap();
        assert!(s.iter().all(|p| p.strictly_inside()));
        let again = mix.sample(2000, &mut RngStream::new(6, StreamId::FlowSampling)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn prior_density_is_constant() {
        let p = Posterior::Prior;
        let v = p.log_prob(&ParameterVector::new(2.0, -1.0).unwrap()).unwrap();
        assert!((v - (-(0.9 * std::f64::consts::PI * 2.0 * std::f64::consts::PI).ln())).abs() < 1e-15);
        assert!((v + 2.8773).abs() < 1e-4);
        assert!(p.sample(0, &mut RngStream::new(1, StreamId::Evaluation)).is_err());
    }
}
