//! Comparison estimators. Every builder returns one [`Posterior`] per test
//! observation, so evaluation never needs to know which estimator it scores.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{stack_rows, FlowModel, MlpEncoder};
use crate::numeric::{pairwise_sqdist, Matrix, RngStream, StreamId};
use crate::ot::{mixture_weights_batch, semibalanced_solve, sinkhorn_balanced, ExtendedRow, ExtendedSinkhorn, OtParams};
use crate::pipeline::amortized_posterior;
use crate::posterior::{Posterior, PosteriorMixture, MIXTURE_PRUNE};
use crate::simulate::{simulate_pendulum, Observation, ParameterVector, SimulatorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RopeFullTest,
    RopeSingleSample,
    OtOnlyFullTest,
    OtOnlySingleSample,
    FinetuneOnly,
    NpeDirect,
    SbiOracle,
    Prior,
    FrisbiJointOnly,
    FrisbiFull,
    FrisbiAmortizeOnly,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 11] = [
        BaselineKind::RopeFullTest,
        BaselineKind::RopeSingleSample,
        BaselineKind::OtOnlyFullTest,
        BaselineKind::OtOnlySingleSample,
        BaselineKind::FinetuneOnly,
        BaselineKind::NpeDirect,
        BaselineKind::SbiOracle,
        BaselineKind::Prior,
        BaselineKind::FrisbiJointOnly,
        BaselineKind::FrisbiFull,
        BaselineKind::FrisbiAmortizeOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::RopeFullTest => "rope_full_test",
            BaselineKind::RopeSingleSample => "rope_single_sample",
            BaselineKind::OtOnlyFullTest => "ot_only_full_test",
            BaselineKind::OtOnlySingleSample => "ot_only_single_sample",
            BaselineKind::FinetuneOnly => "finetune_only",
            BaselineKind::NpeDirect => "npe_direct",
            BaselineKind::SbiOracle => "sbi_oracle",
            BaselineKind::Prior => "prior",
            BaselineKind::FrisbiJointOnly => "frisbi_joint_only",
            BaselineKind::FrisbiFull => "frisbi_full",
            BaselineKind::FrisbiAmortizeOnly => "frisbi_amortize_only",
        }
    }

    /// Whether the estimator needs the whole test batch at once.
    pub fn is_transductive(self) -> bool {
        matches!(self, BaselineKind::RopeFullTest | BaselineKind::OtOnlyFullTest)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    /// Accepts the snake-case name or the variant name.
    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s || format!("{k:?}") == s)
            .ok_or_else(|| Error::Format(format!("unknown baseline {s:?}")))
    }
}

/// Coupling settings shared by the transport baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RopeConfig {
    pub ot: OtParams,
    /// Couple full test batches with the semi-balanced solver at
    /// `unbalanced_rho` instead of balanced Sinkhorn.
    pub unbalanced: bool,
    pub unbalanced_rho: f64,
    /// Sweep budget of each single-sample solve; the per-point coupling is
    /// warm-started from the converged plan of the unpaired set.
    pub row_max_iter: usize,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            ot: OtParams::default(),
            unbalanced: false,
            unbalanced_rho: 1.0,
            row_max_iter: 100,
        }
    }
}

fn mixtures(alpha: &Matrix, atoms: &Matrix, npe: &Arc<FlowModel>) -> Result<Vec<Posterior>> {
    (0..alpha.rows())
        .map(|i| {
            Ok(Posterior::Mixture(PosteriorMixture::new(
                alpha.row(i),
                atoms,
                npe.clone(),
                MIXTURE_PRUNE,
            )?))
        })
        .collect()
}

/// Mixture weights `α_i = n·P_i` of one joint coupling between all rows of
/// `z` and the atoms.
pub fn coupling_weights(z: &Matrix, atoms: &Matrix, cfg: &RopeConfig) -> Result<Matrix> {
    cfg.ot.validate()?;
    if atoms.rows() == 0 {
        return Err(Error::EmptyAtlas);
    }
    if z.rows() == 0 {
        return Err(Error::EmptyRequest);
    }
    let cost = pairwise_sqdist(z, atoms)?;
    let plan = if cfg.unbalanced {
        let params = OtParams {
            rho: cfg.unbalanced_rho,
            ..cfg.ot
        };
        semibalanced_solve(&cost, &params)?
    } else {
        sinkhorn_balanced(&cost, cfg.ot.gamma, cfg.ot.max_iter, cfg.ot.tol)?
    };
    plan.warn_if_not_converged("full-test coupling");
    let n = z.rows() as f64;
    let mut alpha = plan.matrix;
    alpha.as_mut_slice().iter_mut().for_each(|v| *v *= n);
    Ok(alpha)
}

/// Transductive estimator: one balanced coupling of the whole test batch
/// (embedded by `g`) with the simulation atoms.
pub fn rope_full_test(
    z_test: &Matrix,
    atoms: &Matrix,
    npe: &Arc<FlowModel>,
    cfg: &RopeConfig,
) -> Result<Vec<Posterior>> {
    mixtures(&coupling_weights(z_test, atoms, cfg)?, atoms, npe)
}

/// Couples each test point separately together with the unpaired set.
pub struct SingleSampleCoupler {
    solver: ExtendedSinkhorn,
    atoms: Matrix,
    npe: Arc<FlowModel>,
}

impl SingleSampleCoupler {
    /// `z_u` are the embedded unpaired reals; `params` drive the base solve
    /// and `row_max_iter` bounds each per-point solve.
    pub fn new(
        z_u: &Matrix,
        atoms: &Matrix,
        npe: Arc<FlowModel>,
        params: &OtParams,
        row_max_iter: usize,
    ) -> Result<Self> {
        params.validate()?;
        if z_u.rows() == 0 {
            return Err(Error::EmptyRequest);
        }
        if atoms.rows() == 0 {
            return Err(Error::EmptyAtlas);
        }
        let cost = pairwise_sqdist(z_u, atoms)?;
        Ok(Self {
            solver: ExtendedSinkhorn::new(&cost, params.gamma, params.max_iter, params.tol)?
                .with_row_limits(row_max_iter, params.tol),
            atoms: atoms.clone(),
            npe,
        })
    }

    /// Coupling of one embedded test point with the unpaired set.
    pub fn solve(&self, z: &[f64]) -> Result<ExtendedRow> {
        let zrow = Matrix::from_vec(1, z.len(), z.to_vec())?;
        let cost = pairwise_sqdist(&zrow, &self.atoms)?;
        self.solver.solve_row(cost.row(0))
    }

    /// Mixture weights of one embedded test point.
    pub fn weights(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve(z)?.alpha)
    }

    fn mixture(&self, alpha: &[f64]) -> Result<Posterior> {
        Ok(Posterior::Mixture(PosteriorMixture::new(
            alpha,
            &self.atoms,
            self.npe.clone(),
            MIXTURE_PRUNE,
        )?))
    }

    pub fn posterior(&self, z: &[f64]) -> Result<Posterior> {
        self.mixture(&self.weights(z)?)
    }
}

/// Single-sample estimator for one test embedding.
pub fn rope_single_sample(
    z_test: &[f64],
    z_u: &Matrix,
    atoms: &Matrix,
    npe: Arc<FlowModel>,
    cfg: &RopeConfig,
) -> Result<Posterior> {
    SingleSampleCoupler::new(z_u, atoms, npe, &cfg.ot, cfg.row_max_iter)?.posterior(z_test)
}

/// Trained components available to the builders. Missing parts make the
/// estimators that need them fail with a missing-dependency error.
#[derive(Debug, Clone, Default)]
pub struct TrainedParts {
    pub nse: Option<MlpEncoder>,
    pub npe: Option<Arc<FlowModel>>,
    /// Encoder fine-tuned on calibration pairs only.
    pub finetuned_encoder: Option<MlpEncoder>,
    /// Encoder from joint OT + supervised training.
    pub real_encoder: Option<MlpEncoder>,
    /// `h` of the OT simulations.
    pub ot_atoms: Option<Matrix>,
    /// `h` of the OT simulations and calibration simulations.
    pub transfer_atoms: Option<Matrix>,
    pub amortizer: Option<Arc<FlowModel>>,
    /// Amortizer distilled from full-test couplings of the unpaired set.
    pub rope_amortizer: Option<Arc<FlowModel>>,
}

fn need<'a, T>(part: &'a Option<T>, name: &str) -> Result<&'a T> {
    part.as_ref()
        .ok_or_else(|| Error::MissingDependency(name.to_string()))
}

/// Everything an estimator may look at besides trained parts.
pub struct BaselineInputs<'a> {
    pub test_x: &'a [Observation],
    /// Test labels; used only by the simulation oracle.
    pub test_theta: &'a [ParameterVector],
    /// Unpaired reals for single-sample couplings.
    pub d_u: &'a [Observation],
    pub simulator: &'a SimulatorConfig,
    pub rope: RopeConfig,
    pub gamma: f64,
    pub seed: u64,
}

fn encode_all(enc: &MlpEncoder, xs: &[Observation]) -> Result<Matrix> {
    if xs.is_empty() {
        return Err(Error::EmptyRequest);
    }
    enc.encode_batch(&stack_rows(xs.iter().map(Observation::as_slice))?)
}

fn flows(flow: &Arc<FlowModel>, z: &Matrix) -> Vec<Posterior> {
    (0..z.rows())
        .map(|i| Posterior::Flow {
            flow: flow.clone(),
            context: z.row(i).to_vec(),
        })
        .collect()
}

fn single_sample(enc: &MlpEncoder, parts: &TrainedParts, inputs: &BaselineInputs) -> Result<Vec<Posterior>> {
    let npe = need(&parts.npe, "npe")?;
    let atoms = need(&parts.ot_atoms, "ot atoms")?;
    let z_u = encode_all(enc, inputs.d_u)?;
    let coupler = SingleSampleCoupler::new(&z_u, atoms, npe.clone(), &inputs.rope.ot, inputs.rope.row_max_iter)?;
    let z = encode_all(enc, inputs.test_x)?;
    let mut capped = 0;
    let out = (0..z.rows())
        .map(|i| {
            let row = coupler.solve(z.row(i))?;
            capped += usize::from(!row.converged);
            coupler.mixture(&row.alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    if capped > 0 {
        log::warn!(
            "not-converged: {capped} of {} single-sample couplings stopped at {} sweeps",
            z.rows(),
            inputs.rope.row_max_iter
        );
    }
    Ok(out)
}

/// Per-test-point posteriors of one estimator.
pub fn build_baseline(kind: BaselineKind, inputs: &BaselineInputs, parts: &TrainedParts) -> Result<Vec<Posterior>> {
    let n = inputs.test_x.len();
    match kind {
        BaselineKind::Prior => Ok(vec![Posterior::Prior; n]),
        BaselineKind::NpeDirect => {
            let z = encode_all(need(&parts.nse, "nse")?, inputs.test_x)?;
            Ok(flows(need(&parts.npe, "npe")?, &z))
        }
        BaselineKind::FinetuneOnly => {
            let z = encode_all(need(&parts.finetuned_encoder, "finetuned encoder")?, inputs.test_x)?;
            Ok(flows(need(&parts.npe, "npe")?, &z))
        }
        BaselineKind::SbiOracle => {
            let nse = need(&parts.nse, "nse")?;
            if inputs.test_theta.len() != n {
                return Err(Error::Shape("test labels do not match test observations".into()));
            }
            let noise = RngStream::new(inputs.seed, StreamId::SimulatorNoise).substream(0x0ac1e);
            let sims = inputs
                .test_theta
                .iter()
                .enumerate()
                .map(|(i, t)| simulate_pendulum(t, 0.0, inputs.simulator, &mut noise.substream(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok(flows(need(&parts.npe, "npe")?, &encode_all(nse, &sims)?))
        }
        BaselineKind::RopeFullTest | BaselineKind::OtOnlyFullTest => {
            let enc = if kind == BaselineKind::RopeFullTest {
                need(&parts.finetuned_encoder, "finetuned encoder")?
            } else {
                need(&parts.nse, "nse")?
            };
            rope_full_test(
                &encode_all(enc, inputs.test_x)?,
                need(&parts.ot_atoms, "ot atoms")?,
                need(&parts.npe, "npe")?,
                &inputs.rope,
            )
        }
        BaselineKind::RopeSingleSample => {
            single_sample(need(&parts.finetuned_encoder, "finetuned encoder")?, parts, inputs)
        }
        BaselineKind::OtOnlySingleSample => single_sample(need(&parts.nse, "nse")?, parts, inputs),
        BaselineKind::FrisbiJointOnly => {
            let atoms = need(&parts.transfer_atoms, "transfer atoms")?;
            let z = encode_all(need(&parts.real_encoder, "real encoder")?, inputs.test_x)?;
            let alpha = mixture_weights_batch(&z, atoms, inputs.gamma)?;
            mixtures(&alpha, atoms, need(&parts.npe, "npe")?)
        }
        BaselineKind::FrisbiFull => {
            let g = need(&parts.real_encoder, "real encoder")?;
            let q = need(&parts.amortizer, "amortizer")?;
            inputs.test_x.iter().map(|x| amortized_posterior(g, q, x)).collect()
        }
        BaselineKind::FrisbiAmortizeOnly => {
            let g = need(&parts.finetuned_encoder, "finetuned encoder")?;
            let q = need(&parts.rope_amortizer, "rope amortizer")?;
            inputs.test_x.iter().map(|x| amortized_posterior(g, q, x)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{FlowConfig, Parameterized, EMBEDDING_DIM};
    use crate::simulate::{sample_prior, PriorBox};

    fn cloud(n: usize, seed: u64, shift: f64) -> Matrix {
        let mut rng = RngStream::new(seed, StreamId::Custom(71));
        Matrix::from_vec(
            n,
            EMBEDDING_DIM,
            (0..n * EMBEDDING_DIM).map(|_| shift + 0.5 * rng.normal()).collect(),
        )
        .unwrap()
    }

    fn flow() -> Arc<FlowModel> {
        let mut rng = RngStream::new(3, StreamId::Init);
        let mut f = FlowModel::new(FlowConfig::default(), &mut rng);
        for (k, p) in f.parameters_mut().into_iter().enumerate() {
            if k % 6 >= 4 {
                p.as_mut_slice().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
            }
        }
        Arc::new(f)
    }

    fn observations(n: usize, seed: u64) -> (Vec<Observation>, Vec<ParameterVector>) {
        let cfg = SimulatorConfig::default();
        let thetas = sample_prior(n, &mut RngStream::new(seed, StreamId::Prior)).unwrap();
        let mut noise = RngStream::new(seed, StreamId::SimulatorNoise);
        let xs = thetas
            .iter()
            .map(|t| simulate_pendulum(t, 0.3, &cfg, &mut noise))
            .collect::<Result<Vec<_>>>()
            .unwrap();
        (xs, thetas)
    }

    #[test]
    fn names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
            assert_eq!(format!("{k:?}").parse::<BaselineKind>().unwrap(), k);
        }
        assert!("rope".parse::<BaselineKind>().is_err());
        let transductive: Vec<_> = BaselineKind::ALL.into_iter().filter(|k| k.is_transductive()).collect();
        assert_eq!(
            transductive,
            [BaselineKind::RopeFullTest, BaselineKind::OtOnlyFullTest]
        );
    }

    #[test]
    fn coupling_rows_are_probability_vectors() {
        let z = cloud(12, 1, 0.0);
        let atoms = cloud(9, 2, 0.2);
        for unbalanced in [false, true] {
            let cfg = RopeConfig {
                unbalanced,
                ..RopeConfig::default()
            };
            let alpha = coupling_weights(&z, &atoms, &cfg).unwrap();
            for s in alpha.row_sums() {
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn huge_gamma_couples_uniformly() {
        let cfg = RopeConfig {
            ot: OtParams {
                gamma: 1e9,
                ..OtParams::default()
            },
            ..RopeConfig::default()
        };
        let alpha = coupling_weights(&cloud(5, 3, 0.0), &cloud(4, 4, 1.0), &cfg).unwrap();
        assert!(alpha.as_slice().iter().all(|&a| (a - 0.25).abs() < 1e-8));
    }

    #[test]
    fn full_test_weights_depend_on_the_batch() {
        let z = cloud(10, 5, 0.0);
        let atoms = cloud(10, 6, 0.0);
        let cfg = RopeConfig::default();
        let full = coupling_weights(&z, &atoms, &cfg).unwrap();
        let mut other = z.clone();
        for v in other.row_mut(9) {
            *v += 3.0;
        }
        let changed = coupling_weights(&other, &atoms, &cfg).unwrap();
        let diff = full
            .row(0)
            .iter()
            .zip(changed.row(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn single_sample_ignores_unpaired_order() {
        let z_u = cloud(15, 7, 0.0);
        let atoms = cloud(12, 8, 0.1);
        let perm: Vec<usize> = (0..15).rev().collect();
        let params = OtParams::default();
        let a = SingleSampleCoupler::new(&z_u, &atoms, flow(), &params, 10_000).unwrap();
        let b = SingleSampleCoupler::new(&z_u.select_rows(&perm), &atoms, flow(), &params, 10_000).unwrap();
        let z = cloud(1, 9, 0.0);
        let (wa, wb) = (a.weights(z.row(0)).unwrap(), b.weights(z.row(0)).unwrap());
        assert!((wa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in wa.iter().zip(&wb) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn prior_anchor_and_missing_parts() {
        let (xs, thetas) = observations(4, 10);
        let sim = SimulatorConfig::default();
        let inputs = BaselineInputs {
            test_x: &xs,
            test_theta: &thetas,
            d_u: &xs,
            simulator: &sim,
            rope: RopeConfig::default(),
            gamma: 0.5,
            seed: 1,
        };
        let parts = TrainedParts::default();
        let prior = build_baseline(BaselineKind::Prior, &inputs, &parts).unwrap();
        for (p, t) in prior.iter().zip(&thetas) {
            assert_eq!(p.log_prob(t).unwrap(), PriorBox::log_density());
        }
        for k in BaselineKind::ALL.into_iter().filter(|&k| k != BaselineKind::Prior) {
            assert!(
                matches!(build_baseline(k, &inputs, &parts), Err(Error::MissingDependency(_))),
                "{k}"
            );
        }
    }

    #[test]
    fn ot_only_equals_rope_when_encoders_coincide() {
        let (xs, thetas) = observations(6, 11);
        let (u, _) = observations(8, 12);
        let (ot, _) = observations(7, 13);
        let enc = MlpEncoder::new(&mut RngStream::new(4, StreamId::Init));
        let sim = SimulatorConfig::default();
        let inputs = BaselineInputs {
            test_x: &xs,
            test_theta: &thetas,
            d_u: &u,
            simulator: &sim,
            rope: RopeConfig::default(),
            gamma: 0.5,
            seed: 2,
        };
        let parts = TrainedParts {
            nse: Some(enc.clone()),
            finetuned_encoder: Some(enc.clone()),
            npe: Some(flow()),
            ot_atoms: Some(encode_all(&enc, &ot).unwrap()),
            ..TrainedParts::default()
        };
        for (a, b) in [
            (BaselineKind::RopeSingleSample, BaselineKind::OtOnlySingleSample),
            (BaselineKind::RopeFullTest, BaselineKind::OtOnlyFullTest),
        ] {
            let pa = build_baseline(a, &inputs, &parts).unwrap();
            let pb = build_baseline(b, &inputs, &parts).unwrap();
            for ((x, y), t) in pa.iter().zip(&pb).zip(&thetas) {
                assert_eq!(x.log_prob(t).unwrap(), y.log_prob(t).unwrap());
            }
        }
    }
}
