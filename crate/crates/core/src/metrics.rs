//! Posterior evaluation: log-posterior probability (LPP) and average coverage
//! AUC (ACAUC).
//!
//! Coverage uses per-dimension equal-tailed credible intervals built from
//! symmetric order statistics of the posterior samples: with `N` sorted
//! samples and level `a`, the interval is `[s_(L), s_(N−1−L)]` with
//! `L = ⌊(N−1)(1−a)/2⌋`. Symmetric order statistics make the metric exactly
//! invariant to any strictly monotone reparameterisation of a dimension. The
//! level grid is padded with `a = 0` (the central pair of samples) and
//! `a = 1` (the sample range) so the integral spans the whole unit interval:
//! a posterior that never covers the truth scores `+0.5`, a calibrated one
//! scores `0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{RngStream, StreamId};
use crate::posterior::Posterior;
use crate::simulate::ParameterVector;

/// Smallest per-point sample budget accepted for coverage estimates.
pub const MIN_SAMPLES: usize = 256;

pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_point: usize,
    pub levels: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_point: 1024,
            levels: default_levels(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub level: f64,
    /// Empirical coverage per parameter dimension.
    pub coverage: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lpp: f64,
    pub lpp_per_point: Vec<f64>,
    pub acauc: f64,
    pub acauc_per_dim: [f64; 2],
    pub coverage_curve: Vec<CoveragePoint>,
    pub n_test: usize,
    pub posterior_samples_per_point: usize,
}

/// Mean of `log q(θ_i | x_i)` over the test points, with the per-point values.
pub fn lpp(posteriors: &[Posterior], truths: &[ParameterVector]) -> Result<(f64, Vec<f64>)> {
    if posteriors.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} posteriors for {} test points",
            posteriors.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let per: Vec<f64> = posteriors
        .iter()
        .zip(truths)
        .map(|(p, t)| p.log_prob(t))
        .collect::<Result<_>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

fn level_grid(levels: &[f64]) -> Result<Vec<f64>> {
    if levels.len() < 2 {
        return Err(Error::Format("coverage needs at least two levels".into()));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) || levels.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
        return Err(Error::Format("levels must be strictly increasing within [0, 1]".into()));
    }
    let mut grid = Vec::with_capacity(levels.len() + 2);
    if levels[0] > 0.0 {
        grid.push(0.0);
    }
    grid.extend_from_slice(levels);
    if *levels.last().expect("non-empty") < 1.0 {
        grid.push(1.0);
    }
    Ok(grid)
}

/// Index of the lower order statistic of the level-`a` interval.
fn lower_index(n: usize, a: f64) -> usize {
    (((n - 1) as f64) * (1.0 - a) / 2.0 + 1e-12).floor() as usize
}

/// Coverage counts accumulated point by point.
struct CoverageAccumulator {
    grid: Vec<f64>,
    hits: Vec<[usize; 2]>,
    points: usize,
}

impl CoverageAccumulator {
    fn new(levels: &[f64]) -> Result<Self> {
        let grid = level_grid(levels)?;
        Ok(Self {
            hits: vec![[0; 2]; grid.len()],
            grid,
            points: 0,
        })
    }

    fn add(&mut self, samples: &[ParameterVector], truth: &ParameterVector) -> Result<()> {
        let n = samples.len();
        if n < MIN_SAMPLES {
            return Err(Error::SampleBudget(format!(
                "{n} samples per point, need at least {MIN_SAMPLES}"
            )));
        }
        for d in 0..2 {
            let mut s: Vec<f64> = samples.iter().map(|p| p.get(d)).collect();
            s.sort_by(f64::total_cmp);
            let t = truth.get(d);
            for (k, &a) in self.grid.iter().enumerate() {
                let lo = lower_index(n, a);
                let hi = n - 1 - lo;
                if s[lo] <= t && t <= s[hi] {
                    self.hits[k][d] += 1;
                }
            }
        }
        self.points += 1;
        Ok(())
    }

    fn finish(&self) -> (f64, [f64; 2], Vec<CoveragePoint>) {
        let curve: Vec<CoveragePoint> = self
            .grid
            .iter()
            .zip(&self.hits)
            .map(|(&level, h)| CoveragePoint {
                level,
                coverage: [0, 1].map(|d| h[d] as f64 / self.points as f64),
            })
            .collect();
        let per_dim = [0, 1].map(|d| {
            curve
                .windows(2)
                .map(|w| {
                    let gap0 = w[0].level - w[0].coverage[d];
                    let gap1 = w[1].level - w[1].coverage[d];
                    0.5 * (gap0 + gap1) * (w[1].level - w[0].level)
                })
                .sum::<f64>()
        });
        (0.5 * (per_dim[0] + per_dim[1]), per_dim, curve)
    }
}

/// ACAUC from precomputed posterior samples (one sample set per test point).
/// Positive values mean the intervals cover less often than nominal
/// (overconfidence).
pub fn acauc(
    samples: &[Vec<ParameterVector>],
    truths: &[ParameterVector],
    levels: &[f64],
) -> Result<(f64, Vec<CoveragePoint>)> {
    if samples.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} sample sets for {} test points",
            samples.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let mut acc = CoverageAccumulator::new(levels)?;
    for (s, t) in samples.iter().zip(truths) {
        acc.add(s, t)?;
    }
    let (value, _, curve) = acc.finish();
    Ok((value, curve))
}

/// LPP and ACAUC of one estimator. Point `i` draws its samples from
/// substream `i` of the evaluation stream, so results do not depend on which
/// other points are evaluated.
pub fn evaluate(
    posteriors: &[Posterior],
    truths: &[ParameterVector],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let (mean_lpp, per_point) = lpp(posteriors, truths)?;
    let mut acc = CoverageAccumulator::new(&cfg.levels)?;
    let base = RngStream::new(seed, StreamId::Evaluation);
    for (i, (p, t)) in posteriors.iter().zip(truths).enumerate() {
        let samples = p.sample(cfg.samples_per_point, &mut base.substream(i as u64))?;
        acc.add(&samples, t)?;
    }
    let (value, per_dim, curve) = acc.finish();
    Ok(EvalReport {
        lpp: mean_lpp,
        lpp_per_point: per_point,
        acauc: value,
        acauc_per_dim: per_dim,
        coverage_curve: curve,
        n_test: truths.len(),
        posterior_samples_per_point: cfg.samples_per_point,
    })
}
