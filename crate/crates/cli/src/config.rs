//! Experiment configuration: JSON with explicit defaults, unknown keys
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use frisbi::baselines::{BaselineKind, RopeConfig};
use frisbi::metrics::EvalConfig;
use frisbi::nets::FlowConfig;
use frisbi::pipeline::{AmortizeConfig, JointLossConfig, NpeConfig};
use frisbi::simulate::{BundleSizes, SimulatorConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sizes: BundleSizes,
    /// Calibration pairs drawn from the pool for each fold.
    pub n_calib: usize,
    /// Relative label noise on calibration parameters.
    pub noise_rate: f64,
    pub folds: usize,
    pub simulator: SimulatorConfig,
    /// Friction of the damped "real" pendulum is uniform on this range.
    pub friction_range: [f64; 2],
    pub flow: FlowConfig,
    pub npe: NpeConfig,
    pub transfer: JointLossConfig,
    pub amortize: AmortizeConfig,
    pub rope: RopeConfig,
    pub eval: EvalConfig,
    pub baselines: Vec<BaselineKind>,
    pub calib_sweep: Vec<usize>,
    pub noise_sweep: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: BundleSizes::default(),
            n_calib: 200,
            noise_rate: 0.0,
            folds: 5,
            simulator: SimulatorConfig::default(),
            friction_range: [0.1, 0.5],
            flow: FlowConfig::default(),
            npe: NpeConfig::default(),
            transfer: JointLossConfig::default(),
            amortize: AmortizeConfig::default(),
            rope: RopeConfig::default(),
            eval: EvalConfig::default(),
            baselines: BaselineKind::ALL.to_vec(),
            calib_sweep: vec![10, 50, 200, 1000],
            noise_sweep: vec![0.0, 0.01, 0.10],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            CliError::config(field, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("<file>", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("sizes.n_sbi", self.sizes.n_sbi),
            ("sizes.n_u", self.sizes.n_u),
            ("sizes.n_ot", self.sizes.n_ot),
            ("sizes.n_calib_pool", self.sizes.n_calib_pool),
            ("sizes.n_test", self.sizes.n_test),
            ("n_calib", self.n_calib),
            ("folds", self.folds),
            ("npe.batch_size", self.npe.batch_size),
            ("transfer.batch_size", self.transfer.batch_size),
            ("amortize.batch_size", self.amortize.batch_size),
            ("amortize.k", self.amortize.k),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(CliError::config(field, "must be at least 1"));
            }
        }
        if self.n_calib > self.sizes.n_calib_pool {
            return Err(CliError::config("n_calib", "exceeds sizes.n_calib_pool"));
        }
        if let Some(&n) = self.calib_sweep.iter().find(|&&n| n == 0 || n > self.sizes.n_calib_pool) {
            return Err(CliError::config("calib_sweep", format!("{n} outside 1..=n_calib_pool")));
        }
        if !(self.noise_rate >= 0.0) || self.noise_sweep.iter().any(|r| !(*r >= 0.0)) {
            return Err(CliError::config("noise_rate", "must be non-negative"));
        }
        if !(self.transfer.gamma > 0.0 && self.transfer.gamma.is_finite()) {
            return Err(CliError::config("transfer.gamma", "must be positive"));
        }
        if !(self.transfer.lambda >= 0.0) {
            return Err(CliError::config("transfer.lambda", "must be non-negative"));
        }
        if !(self.rope.ot.gamma > 0.0 && self.rope.ot.gamma.is_finite()) {
            return Err(CliError::config("rope.ot.gamma", "must be positive"));
        }
        if !(self.rope.ot.rho >= 0.0 && self.rope.unbalanced_rho >= 0.0) {
            return Err(CliError::config("rope.ot.rho", "must be non-negative"));
        }
        let [lo, hi] = self.friction_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(CliError::config("friction_range", "need 0 <= lo <= hi"));
        }
        if self.amortize.validate().is_err() {
            return Err(CliError::config("amortize", "k >= 1, weight_floor in [0, 1), max_atoms >= 1"));
        }
        if self.eval.samples_per_point < frisbi::metrics::MIN_SAMPLES {
            return Err(CliError::config(
                "eval.samples_per_point",
                format!("at least {}", frisbi::metrics::MIN_SAMPLES),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the fully defaulted config.
    pub fn hash(&self) -> String {
        Self::hash_text(&serde_json::to_string(self).expect("config serializes"))
    }

    /// Hex SHA-256 of `text`.
    pub fn hash_text(text: &str) -> String {
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Seed of fold `k`; folds are reproducible in isolation.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(1 + fold as u64)
    }
}
