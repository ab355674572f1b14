use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Matrix], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[k].shape() || g.shape() != self.m[k].shape() {
                return Err(Error::Shape(format!("adam tensor {k} shape mismatch")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let ps = p.as_mut_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gi;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Matrix::scalar(1.0);
        let mut adam = AdamState::new(&[&p], 1e-3);
        adam.step(&mut [&mut p], &[Matrix::scalar(2.0)]).unwrap();
        assert!((p.item().unwrap() - 0.999).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(&[&p], 1e-3);
        adam.step(&mut [&mut p], &[Matrix::zeros(1, 3)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut p = Matrix::scalar(0.3);
            let mut adam = AdamState::new(&[&p], 1e-2);
            for k in 0..50 {
                let g = Matrix::scalar((k as f64 * 0.37).sin());
                adam.step(&mut [&mut p], &[g]).unwrap();
            }
            p.item().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::scalar(1.0);
        let mut adam = AdamState::new(&[&p], 1e-3);
        assert!(adam.step(&mut [&mut p], &[Matrix::zeros(1, 2)]).is_err());
        assert!(adam.step(&mut [&mut p], &[]).is_err());
    }
}
