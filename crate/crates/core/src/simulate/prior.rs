use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::RngStream;

/// Natural-frequency bounds `[π/10, π]`.
pub const OMEGA0_RANGE: (f64, f64) = (PI / 10.0, PI);
/// Initial-angle bounds `[−π, π]`.
pub const PHI0_RANGE: (f64, f64) = (-PI, PI);

/// The uniform prior box over `(ω0, φ0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorBox;

impl PriorBox {
    pub const LOWER: [f64; 2] = [OMEGA0_RANGE.0, PHI0_RANGE.0];
    pub const UPPER: [f64; 2] = [OMEGA0_RANGE.1, PHI0_RANGE.1];

    pub fn width(dim: usize) -> f64 {
        Self::UPPER[dim] - Self::LOWER[dim]
    }

    pub fn volume() -> f64 {
        Self::width(0) * Self::width(1)
    }

    /// `−log` of the box volume: the prior log-density everywhere inside.
    pub fn log_density() -> f64 {
        -Self::volume().ln()
    }

    pub fn center() -> ParameterVector {
        ParameterVector {
            omega0: 0.5 * (Self::LOWER[0] + Self::UPPER[0]),
            phi0: 0.5 * (Self::LOWER[1] + Self::UPPER[1]),
        }
    }

    pub fn clip(dim: usize, value: f64) -> f64 {
        value.clamp(Self::LOWER[dim], Self::UPPER[dim])
    }
}

/// Latent pendulum parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub omega0: f64,
    pub phi0: f64,
}

impl ParameterVector {
    /// Validated constructor: both components must lie in the closed prior box.
    pub fn new(omega0: f64, phi0: f64) -> Result<Self> {
        let p = Self { omega0, phi0 };
        if !p.in_box() {
            return Err(Error::Support(format!(
                "({omega0}, {phi0}) outside the prior box"
            )));
        }
        Ok(p)
    }

    pub fn from_array(v: [f64; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.omega0, self.phi0]
    }

    pub fn get(&self, dim: usize) -> f64 {
        match dim {
            0 => self.omega0,
            1 => self.phi0,
            _ => panic!("parameter dimension {dim} out of range"),
        }
    }

    pub fn in_box(&self) -> bool {
        self.as_array()
            .iter()
            .enumerate()
            .all(|(d, &v)| v >= PriorBox::LOWER[d] && v <= PriorBox::UPPER[d])
    }

    pub fn strictly_inside(&self) -> bool {
        self.as_array()
            .iter()
            .enumerate()
            .all(|(d, &v)| v > PriorBox::LOWER[d] && v < PriorBox::UPPER[d])
    }
}

/// Independent uniform draws over the prior box.
pub fn sample_prior(n: usize, rng: &mut RngStream) -> Result<Vec<ParameterVector>> {
    if n == 0 {
        return Err(Error::EmptyRequest);
    }
    Ok((0..n)
        .map(|_| ParameterVector {
            omega0: rng.uniform(OMEGA0_RANGE.0, OMEGA0_RANGE.1),
            phi0: rng.uniform(PHI0_RANGE.0, PHI0_RANGE.1),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::StreamId;

    #[test]
    fn omega_mean_within_three_sigma() {
        let mut rng = RngStream::new(1, StreamId::Prior);
        let n = 10_000;
        let draws = sample_prior(n, &mut rng).unwrap();
        let mean = draws.iter().map(|p| p.omega0).sum::<f64>() / n as f64;
        let expected = 0.5 * (OMEGA0_RANGE.0 + OMEGA0_RANGE.1);
        assert!((expected - 1.7279).abs() < 1e-4);
        let sd = PriorBox::width(0) / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * sd, "mean {mean}");
        assert!(draws.iter().all(ParameterVector::in_box));
    }

    #[test]
    fn single_draw_and_determinism() {
        let one = sample_prior(1, &mut RngStream::new(2, StreamId::Prior)).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].in_box());
        let a = sample_prior(5, &mut RngStream::new(9, StreamId::Prior)).unwrap();
        let b = sample_prior(5, &mut RngStream::new(9, StreamId::Prior)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_prior(0, &mut RngStream::new(9, StreamId::Prior)),
            Err(Error::EmptyRequest)
        ));
    }

    #[test]
    fn prior_log_density_value() {
        assert!((PriorBox::log_density() - (-2.8772464366)).abs() < 1e-9);
        assert!(ParameterVector::new(0.1, 0.0).is_err());
        assert!(ParameterVector::new(PI, -PI).is_ok());
    }
}
