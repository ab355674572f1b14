//! Pendulum benchmark: ideal simulator, damped "real" emulator, uniform prior,
//! dataset splits and calibration-label corruption.

mod bundle;
mod pendulum;
mod prior;

pub use bundle::{
    corrupt_labels, make_bundle, BundleSizes, CalibTriple, DatasetBundle, LabeledObservation,
};
pub use pendulum::{integrate_pendulum, simulate_pendulum, Observation, SimulatorConfig, Trajectory};
pub use prior::{sample_prior, ParameterVector, PriorBox, OMEGA0_RANGE, PHI0_RANGE};
