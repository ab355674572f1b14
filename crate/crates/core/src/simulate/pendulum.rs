use serde::{Deserialize, Serialize};

use super::ParameterVector;
use crate::error::{Error, Result};
use crate::numeric::RngStream;

/// Observation model of the pendulum benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    /// Standard deviation of additive Gaussian noise on each sample.
    pub sigma_obs: f64,
    /// Largest RK4 step.
    pub dt: f64,
    /// End of the observation window; samples are uniform on `[0, t_max]`.
    pub t_max: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            sigma_obs: 0.01,
            dt: 0.01,
            t_max: 10.0,
        }
    }
}

impl SimulatorConfig {
    pub fn noiseless(self) -> Self {
        Self {
            sigma_obs: 0.0,
            ..self
        }
    }

    /// Observation times `t_k = k·t_max/(N−1)`.
    pub fn sample_times(&self) -> Vec<f64> {
        let step = self.t_max / (Observation::LEN - 1) as f64;
        (0..Observation::LEN).map(|k| k as f64 * step).collect()
    }
}

/// Angle time series sampled on the observation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(Vec<f64>);

impl Observation {
    pub const LEN: usize = 100;

    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() != Self::LEN {
            return Err(Error::Shape(format!(
                "observation needs {} samples, got {}",
                Self::LEN,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite observation sample".into()));
        }
        Ok(Self(samples))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Dense RK4 output: one entry per integration step, including `t = 0`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub angle: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Angle at the observation times, before noise.
    pub samples: Vec<f64>,
}

/// Integrates `φ'' + friction·φ' + ω0² sin φ = 0` with `φ(0) = φ0`, `φ'(0) = 0`.
///
/// Each interval between observation times is split into the smallest number
/// of equal RK4 steps no longer than `cfg.dt`, so samples land on step
/// boundaries.
pub fn integrate_pendulum(
    theta: &ParameterVector,
    friction: f64,
    cfg: &SimulatorConfig,
) -> Result<Trajectory> {
    if friction < 0.0 {
        return Err(Error::NegativeFriction);
    }
    let w2 = theta.omega0 * theta.omega0;
    let accel = |phi: f64, vel: f64| -friction * vel - w2 * phi.sin();

    let interval = cfg.t_max / (Observation::LEN - 1) as f64;
    let substeps = (interval / cfg.dt - 1e-9).ceil().max(1.0) as usize;
    let h = interval / substeps as f64;

    let total = (Observation::LEN - 1) * substeps + 1;
    let mut times = Vec::with_capacity(total);
    let mut angle = Vec::with_capacity(total);
    let mut velocity = Vec::with_capacity(total);
    let mut samples = Vec::with_capacity(Observation::LEN);

    let (mut phi, mut vel) = (theta.phi0, 0.0);
    times.push(0.0);
    angle.push(phi);
    velocity.push(vel);
    samples.push(phi);
    for k in 1..Observation::LEN {
        for s in 0..substeps {
            let k1p = vel;
            let k1v = accel(phi, vel);
            let k2p = vel + 0.5 * h * k1v;
            let k2v = accel(phi + 0.5 * h * k1p, k2p);
            let k3p = vel + 0.5 * h * k2v;
            let k3v = accel(phi + 0.5 * h * k2p, k3p);
            let k4p = vel + h * k3v;
            let k4v = accel(phi + h * k3p, k4p);
            phi += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
            vel += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            times.push((k - 1) as f64 * interval + (s + 1) as f64 * h);
            angle.push(phi);
            velocity.push(vel);
        }
        samples.push(phi);
    }
    Ok(Trajectory {
        times,
        angle,
        velocity,
        samples,
    })
}

/// Simulates one observation. `friction = 0` is the ideal simulator; positive
/// friction is the damped emulator standing in for real data.
pub fn simulate_pendulum(
    theta: &ParameterVector,
    friction: f64,
    cfg: &SimulatorConfig,
    rng: &mut RngStream,
) -> Result<Observation> {
    let traj = integrate_pendulum(theta, friction, cfg)?;
    let mut samples = traj.samples;
    if cfg.sigma_obs > 0.0 {
        for s in &mut samples {
            *s += cfg.sigma_obs * rng.normal();
        }
    }
    Observation::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::StreamId;
    use proptest::prelude::*;

    fn rng() -> RngStream {
        RngStream::new(0, StreamId::SimulatorNoise)
    }

    #[test]
    fn equilibrium_stays_at_rest() {
        let cfg = SimulatorConfig::default().noiseless();
        for omega in [0.4, 1.0, 3.0] {
            let theta = ParameterVector::new(omega, 0.0).unwrap();
            let x = simulate_pendulum(&theta, 0.0, &cfg, &mut rng()).unwrap();
            assert!(x.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn small_angle_matches_cosine() {
        let cfg = SimulatorConfig::default().noiseless();
        let theta = ParameterVector::new(1.0, 0.1).unwrap();
        let x = simulate_pendulum(&theta, 0.0, &cfg, &mut rng()).unwrap();
        let dev = cfg
            .sample_times()
            .iter()
            .zip(x.as_slice())
            .map(|(t, v)| (v - 0.1 * t.cos()).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-3, "max deviation {dev}");
    }

    #[test]
    fn energy_conserved_without_friction() {
        let cfg = SimulatorConfig::default().noiseless();
        for (omega, phi) in [(1.7, 1.0), (1.0, 2.5), (0.5, -1.5)] {
            let theta = ParameterVector::new(omega, phi).unwrap();
            let traj = integrate_pendulum(&theta, 0.0, &cfg).unwrap();
            let energy = |p: f64, v: f64| 0.5 * v * v + omega * omega * (1.0 - p.cos());
            let e0 = energy(traj.angle[0], traj.velocity[0]);
            let drift = traj
                .angle
                .iter()
                .zip(&traj.velocity)
                .map(|(&p, &v)| (energy(p, v) - e0).abs())
                .fold(0.0, f64::max);
            assert!(drift < 1e-6, "energy drift {drift} at {theta:?}");
        }
    }

    #[test]
    fn grid_and_length() {
        let cfg = SimulatorConfig::default();
        let t = cfg.sample_times();
        assert_eq!(t.len(), 100);
        assert_eq!(t[0], 0.0);
        assert!((t[99] - 10.0).abs() < 1e-12);
        let traj = integrate_pendulum(&ParameterVector::new(1.0, 0.5).unwrap(), 0.2, &cfg).unwrap();
        assert!((traj.times.last().unwrap() - 10.0).abs() < 1e-9);
        assert!(traj.times.windows(2).all(|w| w[1] - w[0] <= cfg.dt + 1e-12));
    }

    #[test]
    fn negative_friction_rejected() {
        let theta = ParameterVector::new(1.0, 0.5).unwrap();
        let cfg = SimulatorConfig::default();
        assert!(matches!(
            simulate_pendulum(&theta, -0.1, &cfg, &mut rng()),
            Err(Error::NegativeFriction)
        ));
    }

    #[test]
    fn noise_is_seeded() {
        let theta = ParameterVector::new(1.0, 0.5).unwrap();
        let cfg = SimulatorConfig::default();
        let a = simulate_pendulum(&theta, 0.0, &cfg, &mut rng()).unwrap();
        let b = simulate_pendulum(&theta, 0.0, &cfg, &mut rng()).unwrap();
        assert_eq!(a, b);
    }

    /// Turning points of the dense trajectory (sign changes of φ').
    fn turning_amplitudes(traj: &Trajectory) -> Vec<f64> {
        traj.velocity
            .windows(2)
            .zip(traj.angle.windows(2))
            .filter(|(v, _)| v[0] != 0.0 && v[0].signum() != v[1].signum())
            .map(|(_, a)| a[0].abs().max(a[1].abs()))
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn damped_peaks_do_not_grow(
            omega in OMEGA_LO..std::f64::consts::PI,
            phi in 0.2f64..3.0,
            friction in 0.1f64..0.5,
        ) {
            let cfg = SimulatorConfig::default().noiseless();
            let theta = ParameterVector::new(omega, phi).unwrap();
            let traj = integrate_pendulum(&theta, friction, &cfg).unwrap();
            let amps = turning_amplitudes(&traj);
            for w in amps.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", amps);
            }
            // Local maxima of the sampled series.
            let s = &traj.samples;
            let peaks: Vec<f64> = (1..s.len() - 1)
                .filter(|&k| s[k] > s[k - 1] && s[k] >= s[k + 1])
                .map(|k| s[k])
                .collect();
            for w in peaks.windows(2) {
                prop_assert!(w[1] < w[0], "{:?}", peaks);
            }
        }
    }

    const OMEGA_LO: f64 = std::f64::consts::PI / 10.0;
}
