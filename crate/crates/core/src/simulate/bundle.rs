use log::warn;
use serde::{Deserialize, Serialize};

use super::{simulate_pendulum, Observation, ParameterVector, PriorBox, SimulatorConfig};
use crate::error::{Error, Result};
use crate::numeric::{RngStream, StreamId};

/// An observation with the parameters that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledObservation {
    pub theta: ParameterVector,
    pub x: Observation,
    /// Friction used to generate `x` (0 for the ideal simulator).
    pub friction: f64,
}

/// A real observation, its re-simulation, and the shared label.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibTriple {
    /// Position in the calibration pool; keys per-triple random streams.
    pub id: u64,
    pub theta: ParameterVector,
    pub x_real: Observation,
    pub x_sim: Observation,
    pub friction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BundleSizes {
    pub n_sbi: usize,
    pub n_u: usize,
    pub n_ot: usize,
    /// Size of the calibration pool folds draw their subsets from.
    pub n_calib_pool: usize,
    pub n_test: usize,
}

impl Default for BundleSizes {
    fn default() -> Self {
        Self {
            n_sbi: 1000,
            n_u: 1000,
            n_ot: 1000,
            n_calib_pool: 1000,
            n_test: 1000,
        }
    }
}

/// All splits of one benchmark instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    /// Simulated `(θ, x_s)` pairs for NPE training.
    pub d_sbi: Vec<LabeledObservation>,
    /// Unpaired real observations (labels kept only for diagnostics).
    pub d_u: Vec<LabeledObservation>,
    /// Simulations used as transport targets.
    pub d_ot: Vec<LabeledObservation>,
    pub d_calib: Vec<CalibTriple>,
    pub d_test: Vec<LabeledObservation>,
}

#[derive(Clone, Copy)]
enum Split {
    Sbi = 0,
    Unpaired = 1,
    Ot = 2,
    Calib = 3,
    Test = 4,
}

struct SplitStreams {
    prior: RngStream,
    friction: RngStream,
    noise: RngStream,
}

impl SplitStreams {
    fn new(seed: u64, split: Split) -> Self {
        let s = split as u64;
        Self {
            prior: RngStream::new(seed, StreamId::Prior).substream(s),
            friction: RngStream::new(seed, StreamId::Friction).substream(s),
            noise: RngStream::new(seed, StreamId::SimulatorNoise).substream(s),
        }
    }

    fn theta(&self, i: usize) -> ParameterVector {
        let mut rng = self.prior.substream(i as u64);
        super::sample_prior(1, &mut rng).expect("n = 1")[0]
    }

    fn friction(&self, i: usize, range: (f64, f64)) -> f64 {
        self.friction.substream(i as u64).uniform(range.0, range.1)
    }
}

/// Generates every split. Each sample draws from its own substreams, so the
/// bundle does not depend on generation order.
pub fn make_bundle(
    sizes: &BundleSizes,
    sim: &SimulatorConfig,
    friction_range: (f64, f64),
    seed: u64,
) -> Result<DatasetBundle> {
    if friction_range.0 < 0.0 || friction_range.1 < friction_range.0 {
        return Err(Error::NegativeFriction);
    }
    let simulated = |split: Split, n: usize| -> Result<Vec<LabeledObservation>> {
        let st = SplitStreams::new(seed, split);
        (0..n)
            .map(|i| {
                let theta = st.theta(i);
                let x = simulate_pendulum(&theta, 0.0, sim, &mut st.noise.substream(i as u64))?;
                Ok(LabeledObservation {
                    theta,
                    x,
                    friction: 0.0,
                })
            })
            .collect()
    };
    let real = |split: Split, n: usize| -> Result<Vec<LabeledObservation>> {
        let st = SplitStreams::new(seed, split);
        (0..n)
            .map(|i| {
                let theta = st.theta(i);
                let friction = st.friction(i, friction_range);
                let x =
                    simulate_pendulum(&theta, friction, sim, &mut st.noise.substream(i as u64))?;
                Ok(LabeledObservation { theta, x, friction })
            })
            .collect()
    };

    let calib_streams = SplitStreams::new(seed, Split::Calib);
    let sim_noise = calib_streams.noise.substream(u64::MAX);
    let d_calib = (0..sizes.n_calib_pool)
        .map(|i| {
            let theta = calib_streams.theta(i);
            let friction = calib_streams.friction(i, friction_range);
            let x_real = simulate_pendulum(
                &theta,
                friction,
                sim,
                &mut calib_streams.noise.substream(i as u64),
            )?;
            let x_sim = simulate_pendulum(&theta, 0.0, sim, &mut sim_noise.substream(i as u64))?;
            Ok(CalibTriple {
                id: i as u64,
                theta,
                x_real,
                x_sim,
                friction,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DatasetBundle {
        d_sbi: simulated(Split::Sbi, sizes.n_sbi)?,
        d_u: real(Split::Unpaired, sizes.n_u)?,
        d_ot: simulated(Split::Ot, sizes.n_ot)?,
        d_calib,
        d_test: real(Split::Test, sizes.n_test)?,
    })
}

/// Perturbs calibration labels with Gaussian noise of standard deviation
/// `rate × (prior width)` per dimension, clips to the prior box and
/// re-simulates `x_sim` from the noisy label. Real observations are untouched.
pub fn corrupt_labels(
    d_calib: &[CalibTriple],
    rate: f64,
    sim: &SimulatorConfig,
    rng: &RngStream,
) -> Result<Vec<CalibTriple>> {
    if rate < 0.0 {
        return Err(Error::NegativeNoise);
    }
    if rate != 0.0 && rate != 0.01 && rate != 0.10 {
        warn!("label noise rate {rate} outside the studied set {{0, 0.01, 0.1}}");
    }
    if rate == 0.0 {
        return Ok(d_calib.to_vec());
    }
    d_calib
        .iter()
        .map(|t| {
            let mut r = rng.substream(t.id);
            let noisy = [0, 1].map(|d| {
                PriorBox::clip(d, t.theta.get(d) + rate * PriorBox::width(d) * r.normal())
            });
            let theta = ParameterVector::from_array(noisy)?;
            let x_sim = simulate_pendulum(&theta, 0.0, sim, &mut r)?;
            Ok(CalibTriple {
                theta,
                x_sim,
                ..t.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sizes() -> BundleSizes {
        BundleSizes {
            n_sbi: 20,
            n_u: 15,
            n_ot: 12,
            n_calib_pool: 10,
            n_test: 8,
        }
    }

    #[test]
    fn sizes_and_reproducibility() {
        let sim = SimulatorConfig::default();
        let a = make_bundle(&small_sizes(), &sim, (0.1, 0.5), 3).unwrap();
        assert_eq!(a.d_sbi.len(), 20);
        assert_eq!(a.d_u.len(), 15);
        assert_eq!(a.d_ot.len(), 12);
        assert_eq!(a.d_calib.len(), 10);
        assert_eq!(a.d_test.len(), 8);
        let b = make_bundle(&small_sizes(), &sim, (0.1, 0.5), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.d_sbi.iter().chain(&a.d_ot).all(|o| o.friction == 0.0));
        assert!(a
            .d_u
            .iter()
            .chain(&a.d_test)
            .all(|o| (0.1..0.5).contains(&o.friction)));
    }

    #[test]
    fn splits_draw_distinct_parameters() {
        let a = make_bundle(&small_sizes(), &SimulatorConfig::default(), (0.1, 0.5), 3).unwrap();
        assert_ne!(a.d_sbi[0].theta, a.d_ot[0].theta);
        assert_ne!(a.d_u[0].theta, a.d_test[0].theta);
    }

    #[test]
    fn calib_sims_are_ideal_resimulations() {
        let sim = SimulatorConfig::default().noiseless();
        let a = make_bundle(&small_sizes(), &sim, (0.1, 0.5), 5).unwrap();
        for t in &a.d_calib {
            let again = simulate_pendulum(
                &t.theta,
                0.0,
                &sim,
                &mut RngStream::new(0, StreamId::SimulatorNoise),
            )
            .unwrap();
            assert_eq!(again, t.x_sim);
            assert_ne!(t.x_real, t.x_sim);
        }
    }

    #[test]
    fn prefix_stability() {
        // Growing a split does not change its existing samples.
        let sim = SimulatorConfig::default();
        let a = make_bundle(&small_sizes(), &sim, (0.1, 0.5), 3).unwrap();
        let bigger = BundleSizes {
            n_u: 30,
            ..small_sizes()
        };
        let b = make_bundle(&bigger, &sim, (0.1, 0.5), 3).unwrap();
        assert_eq!(a.d_u[..], b.d_u[..15]);
    }

    #[test]
    fn zero_noise_is_identity() {
        let sim = SimulatorConfig::default();
        let a = make_bundle(&small_sizes(), &sim, (0.1, 0.5), 3).unwrap();
        let rng = RngStream::new(1, StreamId::LabelNoise);
        assert_eq!(corrupt_labels(&a.d_calib, 0.0, &sim, &rng).unwrap(), a.d_calib);
        assert!(matches!(
            corrupt_labels(&a.d_calib, -0.1, &sim, &rng),
            Err(Error::NegativeNoise)
        ));
    }

    #[test]
    fn noise_scale_matches_rate() {
        let sim = SimulatorConfig::default();
        let sizes = BundleSizes {
            n_sbi: 1,
            n_u: 1,
            n_ot: 1,
            n_calib_pool: 1000,
            n_test: 1,
        };
        let a = make_bundle(&sizes, &sim, (0.1, 0.5), 8).unwrap();
        let rng = RngStream::new(2, StreamId::LabelNoise);
        let noisy = corrupt_labels(&a.d_calib, 0.10, &sim, &rng).unwrap();
        for d in 0..2 {
            // Clipping shrinks the spread near the walls, so compare interior triples.
            let target = 0.10 * PriorBox::width(d);
            let diffs: Vec<f64> = a
                .d_calib
                .iter()
                .zip(&noisy)
                .filter(|(c, _)| {
                    let v = c.theta.get(d);
                    v - PriorBox::LOWER[d] > 4.0 * target && PriorBox::UPPER[d] - v > 4.0 * target
                })
                .map(|(c, n)| n.theta.get(d) - c.theta.get(d))
                .collect();
            let sd = (diffs.iter().map(|x| x * x).sum::<f64>() / diffs.len() as f64).sqrt();
            assert!((sd / target - 1.0).abs() < 0.1, "dim {d}: sd {sd} vs {target}");
        }
        assert!(noisy.iter().all(|t| t.theta.in_box()));
        assert!(noisy.iter().zip(&a.d_calib).all(|(n, c)| n.x_real == c.x_real));
        let sigma = 0.01 * PriorBox::width(0);
        assert!((sigma - 0.009 * std::f64::consts::PI).abs() < 1e-15);
        assert!((sigma - 0.0283).abs() < 1e-4);
    }
}
