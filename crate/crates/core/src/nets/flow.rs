use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, Mlp, Parameterized, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngStream, Tape, Var};
use crate::simulate::{ParameterVector, PriorBox};

/// Sampled points are kept at least this far (in unit-box coordinates) from
/// the prior boundary.
const BOX_EPS: f64 = 1e-12;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub couplings: usize,
    pub hidden: usize,
    pub context_dim: usize,
    pub max_log_scale: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            couplings: 6,
            hidden: 64,
            context_dim: EMBEDDING_DIM,
            max_log_scale: 3.0,
        }
    }
}

impl FlowConfig {
    fn conditioner_widths(&self) -> [usize; 4] {
        [1 + self.context_dim, self.hidden, self.hidden, 2]
    }
}

/// Per-layer record of the change of variables for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrace {
    /// Logit-space image of θ.
    pub unbounded: [f64; 2],
    pub pre_log_jacobian: f64,
    pub log_scales: Vec<f64>,
    pub latent: [f64; 2],
    pub base_log_prob: f64,
}

impl LatentTrace {
    pub fn total(&self) -> f64 {
        self.base_log_prob + self.log_scales.iter().sum::<f64>() + self.pre_log_jacobian
    }
}

/// Conditional density over the pendulum prior box: affine couplings on
/// logit-transformed parameters with a standard-normal base.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    conditioners: Vec<Mlp>,
}

fn standard_normal_2d(z: [f64; 2]) -> f64 {
    -0.5 * (z[0] * z[0] + z[1] * z[1]) - LN_2PI
}

/// Maps θ to logit space; returns the image and `log |du/dθ|`.
pub fn to_unbounded(theta: [f64; 2]) -> Result<([f64; 2], f64)> {
    let mut u = [0.0; 2];
    let mut log_jac = 0.0;
    for d in 0..2 {
        let v = (theta[d] - PriorBox::LOWER[d]) / PriorBox::width(d);
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Support(format!(
                "θ = ({}, {}) is not strictly inside the prior box",
                theta[0], theta[1]
            )));
        }
        u[d] = v.ln() - (1.0 - v).ln();
        log_jac -= PriorBox::width(d).ln() + v.ln() + (1.0 - v).ln();
    }
    Ok((u, log_jac))
}

/// Inverse of [`to_unbounded`], clamped strictly inside the box.
pub fn to_bounded(u: [f64; 2]) -> [f64; 2] {
    let mut theta = [0.0; 2];
    for d in 0..2 {
        let v = (1.0 / (1.0 + (-u[d]).exp())).clamp(BOX_EPS, 1.0 - BOX_EPS);
        theta[d] = PriorBox::LOWER[d] + PriorBox::width(d) * v;
    }
    theta
}

impl FlowModel {
    const KIND: &'static str = "coupling_flow";

    /// Random hidden layers, zeroed output layers: the flow starts as the
    /// identity on logit space.
    pub fn new(config: FlowConfig, rng: &mut RngStream) -> Self {
        let widths = config.conditioner_widths();
        let conditioners = (0..config.couplings)
            .map(|_| Mlp::new(&widths, true, rng))
            .collect();
        Self {
            config,
            conditioners,
        }
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    fn params_per_coupling(&self) -> usize {
        2 * self.conditioners[0].layers().len()
    }

    fn check_context_cols(&self, ctx: &Matrix) -> Result<()> {
        if ctx.cols() != self.config.context_dim {
            return Err(Error::Shape(format!(
                "flow context needs {} columns, got {}",
                self.config.context_dim,
                ctx.cols()
            )));
        }
        Ok(())
    }

    fn bounded_log_scale(&self, raw: f64) -> f64 {
        let m = self.config.max_log_scale;
        m * (raw / m).tanh()
    }

    /// Shift and log-scale of every coupling `l` for the rows of `cond`.
    fn conditioner_output(&self, l: usize, cond: &[f64], ctx: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let n = cond.len();
        let w = 1 + self.config.context_dim;
        let mut input = Matrix::zeros(n, w);
        for r in 0..n {
            let row = input.row_mut(r);
            row[0] = cond[r];
            row[1..].copy_from_slice(ctx.row(if ctx.rows() == 1 { 0 } else { r }));
        }
        let out = self.conditioners[l].apply(&input);
        let shift = out.column(0);
        let log_scale = out
            .column(1)
            .into_iter()
            .map(|raw| self.bounded_log_scale(raw))
            .collect();
        (shift, log_scale)
    }

    /// Pushes logit-space points to the latent space; returns latents and
    /// the summed coupling log-determinants.
    fn unbounded_to_latent(&self, u: &Matrix, ctx: &Matrix) -> (Matrix, Vec<f64>) {
        let n = u.rows();
        let mut a = [u.column(0), u.column(1)];
        let mut logdet = vec![0.0; n];
        for l in 0..self.conditioners.len() {
            let d = l % 2;
            let (shift, log_scale) = self.conditioner_output(l, &a[1 - d], ctx);
            for r in 0..n {
                a[d][r] = a[d][r] * log_scale[r].exp() + shift[r];
                logdet[r] += log_scale[r];
            }
        }
        let mut z = Matrix::zeros(n, 2);
        for r in 0..n {
            z.set(r, 0, a[0][r]);
            z.set(r, 1, a[1][r]);
        }
        (z, logdet)
    }

    fn latent_to_unbounded(&self, z: &Matrix, ctx: &Matrix) -> Matrix {
        let n = z.rows();
        let mut a = [z.column(0), z.column(1)];
        for l in (0..self.conditioners.len()).rev() {
            let d = l % 2;
            let (shift, log_scale) = self.conditioner_output(l, &a[1 - d], ctx);
            for r in 0..n {
                a[d][r] = (a[d][r] - shift[r]) * (-log_scale[r]).exp();
            }
        }
        let mut u = Matrix::zeros(n, 2);
        for r in 0..n {
            u.set(r, 0, a[0][r]);
            u.set(r, 1, a[1][r]);
        }
        u
    }

    fn validate_batch(&self, thetas: &Matrix, ctx: &Matrix) -> Result<()> {
        self.check_context_cols(ctx)?;
        if thetas.cols() != 2 {
            return Err(Error::Shape(format!(
                "θ batch needs 2 columns, got {}",
                thetas.cols()
            )));
        }
        if ctx.rows() != 1 && ctx.rows() != thetas.rows() {
            return Err(Error::Shape(format!(
                "{} contexts for {} points",
                ctx.rows(),
                thetas.rows()
            )));
        }
        Ok(())
    }

    /// Log-densities of the rows of `thetas` (n×2). `ctx` holds one context
    /// per row, or a single row shared by all points.
    pub fn log_prob_batch(&self, thetas: &Matrix, ctx: &Matrix) -> Result<Vec<f64>> {
        self.validate_batch(thetas, ctx)?;
        let n = thetas.rows();
        let mut u = Matrix::zeros(n, 2);
        let mut pre = vec![0.0; n];
        for r in 0..n {
            let (ur, lj) = to_unbounded([thetas.get(r, 0), thetas.get(r, 1)])?;
            u.row_mut(r).copy_from_slice(&ur);
            pre[r] = lj;
        }
        let (z, logdet) = self.unbounded_to_latent(&u, ctx);
        Ok((0..n)
            .map(|r| standard_normal_2d([z.get(r, 0), z.get(r, 1)]) + logdet[r] + pre[r])
            .collect())
    }

    pub fn log_prob(&self, theta: &ParameterVector, ctx: &[f64]) -> Result<f64> {
        let t = Matrix::from_vec(1, 2, theta.as_array().to_vec())?;
        let c = Matrix::from_vec(1, ctx.len(), ctx.to_vec())?;
        Ok(self.log_prob_batch(&t, &c)?[0])
    }

    /// Layer-by-layer change of variables for one point.
    pub fn trace(&self, theta: &ParameterVector, ctx: &[f64]) -> Result<LatentTrace> {
        let c = Matrix::from_vec(1, ctx.len(), ctx.to_vec())?;
        self.check_context_cols(&c)?;
        let (u, pre) = to_unbounded(theta.as_array())?;
        let mut a = [vec![u[0]], vec![u[1]]];
        let mut log_scales = Vec::with_capacity(self.conditioners.len());
        for l in 0..self.conditioners.len() {
            let d = l % 2;
            let (shift, log_scale) = self.conditioner_output(l, &a[1 - d], &c);
            a[d][0] = a[d][0] * log_scale[0].exp() + shift[0];
            log_scales.push(log_scale[0]);
        }
        let latent = [a[0][0], a[1][0]];
        Ok(LatentTrace {
            unbounded: u,
            pre_log_jacobian: pre,
            log_scales,
            latent,
            base_log_prob: standard_normal_2d(latent),
        })
    }

    /// θ → latent.
    pub fn forward(&self, theta: &ParameterVector, ctx: &[f64]) -> Result<[f64; 2]> {
        Ok(self.trace(theta, ctx)?.latent)
    }

    /// Latent → θ.
    pub fn inverse(&self, z: [f64; 2], ctx: &[f64]) -> Result<ParameterVector> {
        let c = Matrix::from_vec(1, ctx.len(), ctx.to_vec())?;
        self.check_context_cols(&c)?;
        let zm = Matrix::from_vec(1, 2, z.to_vec())?;
        let u = self.latent_to_unbounded(&zm, &c);
        let theta = to_bounded([u.get(0, 0), u.get(0, 1)]);
        Ok(ParameterVector {
            omega0: theta[0],
            phi0: theta[1],
        })
    }

    /// One draw per context row; returns an n×2 matrix of θ.
    pub fn sample_batch(&self, ctx: &Matrix, rng: &mut RngStream) -> Result<Matrix> {
        self.check_context_cols(ctx)?;
        let n = ctx.rows();
        let z = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.normal()).collect())?;
        let u = self.latent_to_unbounded(&z, ctx);
        let mut out = Matrix::zeros(n, 2);
        for r in 0..n {
            out.row_mut(r)
                .copy_from_slice(&to_bounded([u.get(r, 0), u.get(r, 1)]));
        }
        Ok(out)
    }

    /// `n` draws for a single context.
    pub fn sample(&self, ctx: &[f64], n: usize, rng: &mut RngStream) -> Result<Vec<ParameterVector>> {
        if n == 0 {
            return Err(Error::EmptyRequest);
        }
        let row = Matrix::from_vec(1, ctx.len(), ctx.to_vec())?;
        self.check_context_cols(&row)?;
        let mut tiled = Matrix::zeros(n, ctx.len());
        for r in 0..n {
            tiled.row_mut(r).copy_from_slice(ctx);
        }
        let s = self.sample_batch(&tiled, rng)?;
        Ok((0..n)
            .map(|r| ParameterVector {
                omega0: s.get(r, 0),
                phi0: s.get(r, 1),
            })
            .collect())
    }

    /// Differentiable log-densities (n×1) of fixed `thetas` under contexts
    /// `ctx` (n×context_dim, possibly itself produced on the tape).
    pub fn log_prob_on_tape(
        &self,
        tape: &Tape,
        params: &[Var],
        thetas: &Matrix,
        ctx: Var,
    ) -> Result<Var> {
        let (cr, cc) = tape.shape(ctx);
        if cc != self.config.context_dim || cr != thetas.rows() || thetas.cols() != 2 {
            return Err(Error::Shape(format!(
                "θ batch {:?} with context {:?}",
                thetas.shape(),
                (cr, cc)
            )));
        }
        let k = self.params_per_coupling();
        if params.len() != k * self.conditioners.len() {
            return Err(Error::Shape("flow parameter count".into()));
        }
        let n = thetas.rows();
        let mut u = [Vec::with_capacity(n), Vec::with_capacity(n)];
        let mut pre = Vec::with_capacity(n);
        for r in 0..n {
            let (ur, lj) = to_unbounded([thetas.get(r, 0), thetas.get(r, 1)])?;
            u[0].push(ur[0]);
            u[1].push(ur[1]);
            pre.push(lj - LN_2PI);
        }
        let [u0, u1] = u;
        let mut a = [
            tape.constant(Matrix::column_vector(u0)),
            tape.constant(Matrix::column_vector(u1)),
        ];
        let m = self.config.max_log_scale;
        let mut logdet = None;
        for (l, net) in self.conditioners.iter().enumerate() {
            let d = l % 2;
            let input = tape.concat_cols(&[a[1 - d], ctx]);
            let out = net.forward(tape, &params[l * k..(l + 1) * k], input);
            let shift = tape.column(out, 0);
            let raw = tape.column(out, 1);
            let s = tape.scale(tape.tanh(tape.scale(raw, 1.0 / m)), m);
            a[d] = tape.add(tape.mul(a[d], tape.exp(s)), shift);
            logdet = Some(match logdet {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        let sq = tape.add(tape.square(a[0]), tape.square(a[1]));
        let base = tape.add_const(tape.scale(sq, -0.5), &Matrix::column_vector(pre));
        Ok(match logdet {
            Some(ld) => tape.add(base, ld),
            None => base,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_parameters(Self::KIND, self.parameters())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, config: FlowConfig) -> Result<Self> {
        ckpt.expect_kind(Self::KIND)?;
        let mats = ckpt.matrices()?;
        let widths = config.conditioner_widths();
        let per = 2 * (widths.len() - 1);
        if mats.len() != per * config.couplings {
            return Err(Error::Format(format!(
                "flow checkpoint holds {} tensors, config needs {}",
                mats.len(),
                per * config.couplings
            )));
        }
        let mut conditioners = Vec::with_capacity(config.couplings);
        let mut it = mats.into_iter();
        for _ in 0..config.couplings {
            let net = Mlp::from_parameters(it.by_ref().take(per).collect())?;
            if net.widths() != widths {
                return Err(Error::Format("flow conditioner widths differ from config".into()));
            }
            conditioners.push(net);
        }
        Ok(Self {
            config,
            conditioners,
        })
    }
}

impl Parameterized for FlowModel {
    fn parameters(&self) -> Vec<&Matrix> {
        self.conditioners.iter().flat_map(|c| c.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.conditioners
            .iter_mut()
            .flat_map(|c| c.parameters_mut())
            .collect()
    }
}

/// `log` of the identity flow's density at the centre of the prior box.
pub fn identity_log_prob_at_center() -> f64 {
    -LN_2PI + 2.0 * 4f64.ln() - (0.9 * PI).ln() - (2.0 * PI).ln()
}
