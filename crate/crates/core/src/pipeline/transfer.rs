//! Stage 1: joint entropic-OT and supervised training of the real encoder.

use serde::{Deserialize, Serialize};

use super::npe::stack_pairs;
use super::{collect_grads, epoch_batches, restore, snapshot, TrainReport};
use crate::error::{Error, Result};
use crate::nets::{stack_rows, AdamState, MlpEncoder, Parameterized};
use crate::numeric::{Matrix, RngStream, StreamId, Tape, Var};
use crate::ot::{check_gamma, mixture_weights_batch};
use crate::simulate::{CalibTriple, LabeledObservation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointLossConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lambda: 1.0,
            batch_size: 128,
            epochs: 200,
            lr: 1e-3,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Format("lambda must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A recorded joint loss and the values of its parts.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub loss: Var,
    /// `Σ P∘C + γ Σ P log P` at the stop-gradient plan.
    pub ot_term: f64,
    /// Mean squared embedding distance over calibration pairs.
    pub supervised: f64,
    /// Entropy `−Σ P log P` of the plan.
    pub plan_entropy: f64,
}

/// `mean_i ‖z_i − w_i‖²` over paired rows.
pub fn supervised_term(tape: &Tape, z_calib: Var, w_calib: &Matrix) -> Result<Var> {
    if tape.shape(z_calib) != w_calib.shape() {
        return Err(Error::Shape(format!(
            "calibration embeddings {:?} vs targets {:?}",
            tape.shape(z_calib),
            w_calib.shape()
        )));
    }
    let d = tape.sub(z_calib, tape.constant(w_calib.clone()));
    Ok(tape.scale(tape.sum(tape.square(d)), 1.0 / w_calib.rows() as f64))
}

/// Entropic OT between the source rows (`z_batch` then `z_calib`) and the
/// targets `w_all`, plus `λ` times the supervised term.
///
/// The plan is the closed form at the current embeddings and enters the
/// gradient as a constant.
pub fn joint_loss(
    tape: &Tape,
    z_batch: Var,
    z_calib: Option<Var>,
    w_all: &Matrix,
    w_calib: &Matrix,
    cfg: &JointLossConfig,
) -> Result<JointLoss> {
    cfg.validate()?;
    if w_all.rows() == 0 {
        return Err(Error::EmptyAtlas);
    }
    let mut sources = vec![z_batch];
    sources.extend(z_calib);
    let n: usize = sources.iter().map(|&s| tape.shape(s).0).sum();
    let targets = tape.constant(w_all.clone());
    let mut loss: Option<Var> = None;
    let (mut transport, mut plogp) = (0.0, 0.0);
    for &s in &sources {
        let cost = tape.pairwise_sqdist(s, targets);
        let mut plan = mixture_weights_batch(&tape.value(s), w_all, cfg.gamma)?;
        plan.as_mut_slice().iter_mut().for_each(|p| *p /= n as f64);
        let c = tape.value(cost);
        for (&p, &cij) in plan.as_slice().iter().zip(c.as_slice()) {
            transport += p * cij;
            if p > 0.0 {
                plogp += p * p.ln();
            }
        }
        let term = tape.sum(tape.mul_const(cost, plan));
        loss = Some(match loss {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let mut loss = tape.add_const(loss.expect("one source"), &Matrix::scalar(cfg.gamma * plogp));
    let mut supervised = 0.0;
    match z_calib {
        Some(zc) if tape.shape(zc).0 > 0 => {
            let sup = supervised_term(tape, zc, w_calib)?;
            supervised = tape.value(sup).item()?;
            if cfg.lambda > 0.0 {
                loss = tape.add(loss, tape.scale(sup, cfg.lambda));
            }
        }
        _ => {
            if cfg.lambda > 0.0 {
                log::warn!("empty calibration set: supervised term is 0");
            }
        }
    }
    Ok(JointLoss {
        loss,
        ot_term: transport + cfg.gamma * plogp,
        supervised,
        plan_entropy: -plogp,
    })
}

/// The trained real encoder and the cached transport targets.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub encoder: MlpEncoder,
    /// `h(x)` for the OT simulations followed by the calibration simulations.
    pub sim_embeddings: Matrix,
    pub report: TrainReport,
    /// Supervised calibration MSE per epoch (mean over minibatches).
    pub supervised_history: Vec<f64>,
}

struct Stage1<'a> {
    nse: &'a MlpEncoder,
    x_u: Matrix,
    x_calib_real: Option<Matrix>,
    w_all: Matrix,
    w_calib: Matrix,
    cfg: &'a JointLossConfig,
    with_ot: bool,
    seed: u64,
}

impl Stage1<'_> {
    fn run(self) -> Result<TransferOutcome> {
        let mut g = self.nse.clone();
        let mut adam = AdamState::new(&g.parameters(), self.cfg.lr);
        let batching = RngStream::new(self.seed, StreamId::Batching);
        let mut report = TrainReport::default();
        let mut sup_hist = Vec::new();
        let mut saved = snapshot(&g);

        'epochs: for epoch in 0..self.cfg.epochs {
            let batches = epoch_batches(
                self.x_u.rows(),
                self.cfg.batch_size,
                &mut batching.substream(epoch as u64),
            );
            let (mut total, mut sup) = (0.0, 0.0);
            for idx in &batches {
                let tape = Tape::new();
                let pv = g.bind(&tape, true);
                let zc = self
                    .x_calib_real
                    .as_ref()
                    .map(|x| g.forward(&tape, &pv, tape.constant(x.clone())));
                let (loss, s) = if self.with_ot {
                    let zb = g.forward(&tape, &pv, tape.constant(self.x_u.select_rows(idx)));
                    let jl = joint_loss(&tape, zb, zc, &self.w_all, &self.w_calib, self.cfg)?;
                    (jl.loss, jl.supervised)
                } else {
                    let zc = zc.ok_or(Error::EmptyCalib)?;
                    let st = supervised_term(&tape, zc, &self.w_calib)?;
                    let s = tape.value(st).item()?;
                    (tape.scale(st, self.cfg.lambda), s)
                };
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    report.diverged = true;
                    break 'epochs;
                }
                total += value;
                sup += s;
                let grads = tape.backward(loss)?;
                let gr = collect_grads(&grads, &pv, &g.parameters());
                adam.step(&mut g.parameters_mut(), &gr)?;
            }
            report.epoch_losses.push(total / batches.len() as f64);
            sup_hist.push(sup / batches.len() as f64);
            saved = snapshot(&g);
        }
        if report.diverged {
            restore(&mut g, &saved);
            report.warn("diverged");
        }
        Ok(TransferOutcome {
            encoder: g,
            sim_embeddings: self.w_all,
            report,
            supervised_history: sup_hist,
        })
    }
}

fn calib_matrices(calib: &[CalibTriple]) -> Result<Option<(Matrix, Matrix)>> {
    if calib.is_empty() {
        return Ok(None);
    }
    Ok(Some((
        stack_rows(calib.iter().map(|c| c.x_real.as_slice()))?,
        stack_rows(calib.iter().map(|c| c.x_sim.as_slice()))?,
    )))
}

/// Trains `g` (initialised at the frozen `nse`) on the joint loss. Targets
/// are `h` of the OT simulations and of the calibration simulations, cached
/// once; every step transports a minibatch of `d_u` plus all calibration reals.
pub fn train_transfer(
    d_u: &[LabeledObservation],
    d_ot: &[LabeledObservation],
    calib: &[CalibTriple],
    nse: &MlpEncoder,
    cfg: &JointLossConfig,
    seed: u64,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    if d_u.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let (x_u, _) = stack_pairs(d_u)?;
    let (x_ot, _) = stack_pairs(d_ot)?;
    let mut w_all = nse.encode_batch(&x_ot)?;
    let (x_calib_real, w_calib) = match calib_matrices(calib)? {
        Some((real, sim)) => {
            let w = nse.encode_batch(&sim)?;
            w_all = w_all.vstack(&w)?;
            (Some(real), w)
        }
        None => {
            if cfg.lambda > 0.0 {
                log::warn!("empty calibration set: supervised term is 0");
            }
            (None, Matrix::zeros(0, nse.net().output_dim()))
        }
    };
    Stage1 {
        nse,
        x_u,
        x_calib_real,
        w_all,
        w_calib,
        cfg,
        with_ot: true,
        seed,
    }
    .run()
}

/// Supervised-only fine-tuning of `g` (initialised at `nse`) on calibration
/// pairs: the same loop as [`train_transfer`] with the OT term removed.
/// Steps per epoch follow the minibatch count of `d_u`. The returned
/// `sim_embeddings` hold `h` of the OT simulations only.
pub fn rope_finetune(
    d_u: &[LabeledObservation],
    d_ot: &[LabeledObservation],
    calib: &[CalibTriple],
    nse: &MlpEncoder,
    cfg: &JointLossConfig,
    seed: u64,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let (real, sim) = calib_matrices(calib)?.ok_or(Error::EmptyCalib)?;
    if d_u.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let (x_u, _) = stack_pairs(d_u)?;
    let (x_ot, _) = stack_pairs(d_ot)?;
    Stage1 {
        nse,
        x_u,
        x_calib_real: Some(real),
        w_all: nse.encode_batch(&x_ot)?,
        w_calib: nse.encode_batch(&sim)?,
        cfg,
        with_ot: false,
        seed,
    }
    .run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::special::logsumexp_unchecked;
    use crate::numeric::{pairwise_sqdist, StreamId};
    use crate::simulate::{make_bundle, BundleSizes, SimulatorConfig};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, StreamId::Custom(11));
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    /// `−(γ/n) Σ_i logsumexp_j(−C_ij/γ) − γ log n + λ·mse`, written without
    /// any plan.
    fn soft_min_form(z: &Matrix, zc: &Matrix, w: &Matrix, wc: &Matrix, gamma: f64, lambda: f64) -> f64 {
        let src = z.vstack(zc).unwrap();
        let n = src.rows() as f64;
        let c = pairwise_sqdist(&src, w).unwrap();
        let lse: f64 = (0..c.rows())
            .map(|i| logsumexp_unchecked(&c.row(i).iter().map(|v| -v / gamma).collect::<Vec<_>>()))
            .sum();
        let mse = zc
            .as_slice()
            .iter()
            .zip(wc.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / zc.rows() as f64;
        -gamma / n * lse - gamma * n.ln() + lambda * mse
    }

    #[test]
    fn symmetric_point_has_zero_gradient() {
        let tape = Tape::new();
        let z = tape.leaf(Matrix::scalar(0.5));
        let w = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let cfg = JointLossConfig {
            gamma: 1.0,
            lambda: 0.0,
            ..JointLossConfig::default()
        };
        let jl = joint_loss(&tape, z, None, &w, &Matrix::zeros(0, 1), &cfg).unwrap();
        let g = tape.backward(jl.loss).unwrap();
        assert!(g.wrt(z).unwrap().get(0, 0).abs() < 1e-15);
    }

    #[test]
    fn value_matches_soft_min_form() {
        let (z, zc, w) = (random(5, 3, 1), random(2, 3, 2), random(7, 3, 3));
        let wc = random(2, 3, 4);
        let cfg = JointLossConfig {
            gamma: 0.7,
            lambda: 0.3,
            ..JointLossConfig::default()
        };
        let tape = Tape::new();
        let (zv, zcv) = (tape.leaf(z.clone()), tape.leaf(zc.clone()));
        let jl = joint_loss(&tape, zv, Some(zcv), &w, &wc, &cfg).unwrap();
        let value = tape.value(jl.loss).item().unwrap();
        let oracle = soft_min_form(&z, &zc, &w, &wc, 0.7, 0.3);
        assert!((value - oracle).abs() < 1e-10, "{value} vs {oracle}");
        assert!((jl.ot_term + 0.3 * jl.supervised - oracle).abs() < 1e-10);
    }

    #[test]
    fn stop_gradient_matches_envelope_finite_differences() {
        let (z, zc, w) = (random(4, 3, 5), random(3, 3, 6), random(6, 3, 7));
        let wc = random(3, 3, 8);
        let (gamma, lambda) = (0.5, 0.8);
        let cfg = JointLossConfig {
            gamma,
            lambda,
            ..JointLossConfig::default()
        };
        let tape = Tape::new();
        let (zv, zcv) = (tape.leaf(z.clone()), tape.leaf(zc.clone()));
        let jl = joint_loss(&tape, zv, Some(zcv), &w, &wc, &cfg).unwrap();
        let grads = tape.backward(jl.loss).unwrap();
        let h = 1e-5;
        for (which, base) in [(0, &z), (1, &zc)] {
            let analytic = grads.wrt(if which == 0 { zv } else { zcv }).unwrap();
            for k in 0..base.len() {
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    m.as_mut_slice()[k] += delta;
                    if which == 0 {
                        soft_min_form(&m, &zc, &w, &wc, gamma, lambda)
                    } else {
                        soft_min_form(&z, &m, &w, &wc, gamma, lambda)
                    }
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice()[k];
                assert!((a - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{a} vs {fd}");
            }
        }
    }

    #[test]
    fn perfect_pairs_have_zero_supervised_term() {
        let wc = random(4, 16, 9);
        let tape = Tape::new();
        let zc = tape.leaf(wc.clone());
        let jl = joint_loss(&tape, tape.leaf(random(3, 16, 10)), Some(zc), &random(5, 16, 11), &wc, &JointLossConfig::default())
            .unwrap();
        assert_eq!(jl.supervised, 0.0);
    }

    #[test]
    fn large_gamma_gives_near_uniform_plan() {
        let (n, m) = (6usize, 9usize);
        let tape = Tape::new();
        let cfg = JointLossConfig {
            gamma: 1e3,
            lambda: 0.0,
            ..JointLossConfig::default()
        };
        let jl = joint_loss(&tape, tape.leaf(random(n, 4, 12)), None, &random(m, 4, 13), &Matrix::zeros(0, 4), &cfg)
            .unwrap();
        assert!(((n * m) as f64).ln() - jl.plan_entropy < 1e-3);
    }

    fn small_bundle(seed: u64) -> crate::simulate::DatasetBundle {
        let sizes = BundleSizes {
            n_sbi: 0,
            n_u: 64,
            n_ot: 60,
            n_calib_pool: 40,
            n_test: 0,
        };
        make_bundle(&sizes, &SimulatorConfig::default(), (0.1, 0.5), seed).unwrap()
    }

    #[test]
    fn dominant_supervised_weight_fits_calibration_pairs() {
        let b = small_bundle(1);
        let nse = MlpEncoder::new(&mut RngStream::new(2, StreamId::Init));
        let cfg = JointLossConfig {
            lambda: 1e6,
            batch_size: 64,
            epochs: 400,
            lr: 3e-3,
            ..JointLossConfig::default()
        };
        let out = train_transfer(&b.d_u, &b.d_ot, &b.d_calib, &nse, &cfg, 3).unwrap();
        let real = stack_rows(b.d_calib.iter().map(|c| c.x_real.as_slice())).unwrap();
        let sim = stack_rows(b.d_calib.iter().map(|c| c.x_sim.as_slice())).unwrap();
        let z = out.encoder.encode_batch(&real).unwrap();
        let w = nse.encode_batch(&sim).unwrap();
        let mse = z.as_slice().iter().zip(w.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.rows() as f64;
        assert!(mse < 1e-2, "{mse}");
        assert_eq!(out.sim_embeddings.rows(), 100);
    }

    #[test]
    fn transfer_is_reproducible_and_leaves_nse_untouched() {
        let b = small_bundle(4);
        let nse = MlpEncoder::new(&mut RngStream::new(5, StreamId::Init));
        let before = nse.to_checkpoint().to_json_string();
        let cfg = JointLossConfig {
            batch_size: 32,
            epochs: 3,
            ..JointLossConfig::default()
        };
        let a = train_transfer(&b.d_u, &b.d_ot, &b.d_calib[..10], &nse, &cfg, 6).unwrap();
        let c = train_transfer(&b.d_u, &b.d_ot, &b.d_calib[..10], &nse, &cfg, 6).unwrap();
        assert_eq!(a.encoder.to_checkpoint(), c.encoder.to_checkpoint());
        assert_eq!(a.report, c.report);
        assert_eq!(nse.to_checkpoint().to_json_string(), before);
        let no_calib = train_transfer(&b.d_u, &b.d_ot, &[], &nse, &cfg, 6).unwrap();
        assert!(no_calib.supervised_history.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn finetune_decreases_calibration_error() {
        let b = small_bundle(7);
        let nse = MlpEncoder::new(&mut RngStream::new(8, StreamId::Init));
        let cfg = JointLossConfig {
            batch_size: 64,
            epochs: 10,
            ..JointLossConfig::default()
        };
        let out = rope_finetune(&b.d_u, &b.d_ot, &b.d_calib, &nse, &cfg, 9).unwrap();
        let h = &out.supervised_history;
        assert!(h.windows(2).all(|w| w[1] < w[0]), "{h:?}");
        assert_eq!(out.sim_embeddings.rows(), 60);
        assert!(matches!(
            rope_finetune(&b.d_u, &b.d_ot, &[], &nse, &cfg, 9),
            Err(Error::EmptyCalib)
        ));
    }
}
