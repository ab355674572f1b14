use super::{Checkpoint, Parameterized};
use crate::error::{Error, Result};
use crate::numeric::matrix::gemm;
use crate::numeric::{Matrix, RngStream, Tape, Var};
use crate::simulate::Observation;

/// Width of the shared embedding space.
pub const EMBEDDING_DIM: usize = 16;

/// Dense layer `x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, w).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// He-uniform initialisation; `zero_output` zeroes the last layer.
    pub fn new(widths: &[usize], zero_output: bool, rng: &mut RngStream) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                if zero_output && l == n - 1 {
                    Linear::zeros(widths[l], widths[l + 1])
                } else {
                    Linear::he_uniform(widths[l], widths[l + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.cols()));
        w
    }

    /// Forward pass using parameters previously bound with [`Parameterized::bind`].
    pub fn forward(&self, tape: &Tape, params: &[Var], x: Var) -> Var {
        debug_assert_eq!(params.len(), 2 * self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for l in 0..self.layers.len() {
            h = tape.add_row(tape.matmul(h, params[2 * l]), params[2 * l + 1]);
            if l < last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Tape-free evaluation.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Matrix::zeros(h.rows(), layer.weight.cols());
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(layer.bias.as_slice());
            }
            gemm(false, &h, false, &layer.weight, &mut out, 1.0);
            if l < last {
                out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    pub(crate) fn from_parameters(mats: Vec<Matrix>) -> Result<Self> {
        if mats.is_empty() || !mats.len().is_multiple_of(2) {
            return Err(Error::Format("MLP needs weight/bias pairs".into()));
        }
        let mut layers = Vec::with_capacity(mats.len() / 2);
        let mut it = mats.into_iter();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            if bias.rows() != 1 || bias.cols() != weight.cols() {
                return Err(Error::Format("bias shape does not match weight".into()));
            }
            if let Some(prev) = layers.last() {
                let prev: &Linear = prev;
                if prev.weight.cols() != weight.rows() {
                    return Err(Error::Format("layer widths do not chain".into()));
                }
            }
            layers.push(Linear { weight, bias });
        }
        Ok(Self { layers })
    }
}

impl Parameterized for Mlp {
    fn parameters(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Low-dimensional summary of an observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "embedding needs {EMBEDDING_DIM} values, got {}",
                values.len()
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_row(&self) -> Matrix {
        Matrix::from_vec(1, self.0.len(), self.0.clone()).expect("sized")
    }
}

/// Observation encoder `100 → 128 → 128 → 16`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    net: Mlp,
}

impl MlpEncoder {
    pub const WIDTHS: [usize; 4] = [Observation::LEN, 128, 128, EMBEDDING_DIM];
    const KIND: &'static str = "mlp_encoder";

    pub fn new(rng: &mut RngStream) -> Self {
        Self {
            net: Mlp::new(&Self::WIDTHS, false, rng),
        }
    }

    pub fn zeros() -> Self {
        Self {
            net: Mlp::zeros(&Self::WIDTHS),
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn forward(&self, tape: &Tape, params: &[Var], x: Var) -> Var {
        self.net.forward(tape, params, x)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Embedding> {
        if x.len() != Observation::LEN {
            return Err(Error::Shape(format!(
                "encoder expects {} samples, got {}",
                Observation::LEN,
                x.len()
            )));
        }
        let out = self.net.apply(&Matrix::from_vec(1, x.len(), x.to_vec())?);
        Embedding::new(out.into_vec())
    }

    /// Encodes a batch stacked as rows.
    pub fn encode_batch(&self, xs: &Matrix) -> Result<Matrix> {
        if xs.cols() != Observation::LEN {
            return Err(Error::Shape(format!(
                "encoder expects {} columns, got {}",
                Observation::LEN,
                xs.cols()
            )));
        }
        Ok(self.net.apply(xs))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_parameters(Self::KIND, self.parameters())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(Self::KIND)?;
        let net = Mlp::from_parameters(ckpt.matrices()?)?;
        if net.widths() != Self::WIDTHS {
            return Err(Error::Format(format!(
                "encoder widths {:?} differ from {:?}",
                net.widths(),
                Self::WIDTHS
            )));
        }
        Ok(Self { net })
    }
}

impl Parameterized for MlpEncoder {
    fn parameters(&self) -> Vec<&Matrix> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.parameters_mut()
    }
}

/// Stacks observations (or any equal-length series) as matrix rows.
pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Matrix> {
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::StreamId;

    fn obs(seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, StreamId::Custom(3));
        (0..Observation::LEN).map(|_| rng.normal()).collect()
    }

    #[test]
    fn zero_encoder_gives_zero_embedding() {
        let enc = MlpEncoder::zeros();
        let e = enc.encode(&obs(1)).unwrap();
        assert!(e.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_pure_and_checks_length() {
        let enc = MlpEncoder::new(&mut RngStream::new(4, StreamId::Init));
        let x = obs(2);
        assert_eq!(enc.encode(&x).unwrap(), enc.encode(&x).unwrap());
        assert!(matches!(enc.encode(&x[..99]), Err(Error::Shape(_))));
        let batch = stack_rows([x.as_slice(), x.as_slice()]).unwrap();
        let eb = enc.encode_batch(&batch).unwrap();
        assert_eq!(eb.row(1), enc.encode(&x).unwrap().as_slice());
    }

    #[test]
    fn squared_norm_gradient_matches_finite_differences() {
        let mut enc = MlpEncoder::new(&mut RngStream::new(5, StreamId::Init));
        // Non-zero biases so every parameter class is exercised.
        let mut rng = RngStream::new(6, StreamId::Custom(0));
        for p in enc.parameters_mut() {
            if p.rows() == 1 {
                p.as_mut_slice().iter_mut().for_each(|b| *b = 0.1 * rng.normal());
            }
        }
        let x = Matrix::from_rows(&[obs(7), obs(8)]).unwrap();
        let loss_of = |enc: &MlpEncoder| {
            let e = enc.encode_batch(&x).unwrap();
            e.as_slice().iter().map(|v| v * v).sum::<f64>()
        };
        let tape = Tape::new();
        let params = enc.bind(&tape, true);
        let input = tape.constant(x.clone());
        let out = enc.forward(&tape, &params, input);
        let loss = tape.sum(tape.square(out));
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        let mut checked = 0;
        let mut rng = RngStream::new(9, StreamId::Custom(0));
        for (k, var) in params.iter().enumerate() {
            let shape = enc.parameters()[k].shape();
            let analytic = grads.wrt_or_zeros(*var, shape);
            for _ in 0..12 {
                let e = rng.index(analytic.len());
                let mut plus = enc.clone();
                plus.parameters_mut()[k].as_mut_slice()[e] += h;
                let mut minus = enc.clone();
                minus.parameters_mut()[k].as_mut_slice()[e] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = analytic.as_slice()[e];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "param {k}[{e}] fd {fd} analytic {an}");
                checked += 1;
            }
        }
        assert_eq!(checked, 6 * 12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = MlpEncoder::new(&mut RngStream::new(4, StreamId::Init));
        let back = MlpEncoder::from_checkpoint(
            &Checkpoint::from_json_str(&enc.to_checkpoint().to_json_string()).unwrap(),
        )
        .unwrap();
        assert_eq!(enc, back);
    }
}
