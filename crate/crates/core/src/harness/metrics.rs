//! Sample-based distances and held-out denoising loss.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::{ConditionEncoder, ContextBatch};
use crate::denoiser::{training_loss, ConditionalAnalyticDenoiser, Denoise, GaussianMixture, Preconditioning};
use crate::engine::Tensor;
use crate::error::{invalid, Result};
use crate::noise::{IntervalSet, SigmaLaw};
use crate::trainer::DataSource;

/// Exact W1 between two empirical distributions, `integral |F_a - F_b|`.
/// With equal sizes this is the mean of `|a_i - b_i|` over sorted samples.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("wasserstein1_1d needs non-empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("wasserstein1_1d needs finite samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while a.get(i) == Some(&next) {
            i += 1;
        }
        while b.get(j) == Some(&next) {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Mean W1 of the projections onto `n_projections` random unit vectors.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(invalid(format!(
            "sliced_wasserstein needs matching 2-D samples, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if n_projections == 0 {
        return Err(invalid("sliced_wasserstein needs at least one projection"));
    }
    let d = a.shape()[1];
    let project = |t: &Tensor, dir: &[f64]| -> Vec<f64> {
        t.data()
            .chunks(d)
            .map(|r| r.iter().zip(dir).map(|(x, u)| x * u).sum())
            .collect()
    };
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        total += wasserstein1_1d(&project(a, &dir), &project(b, &dir))?;
    }
    Ok(total / n_projections as f64)
}

/// Held-out draws for the denoising objective on one noise interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSet {
    pub x_clean: Tensor,
    pub conditions: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub eps: Tensor,
}

impl ValidationSet {
    pub fn draw(data: &dyn DataSource, law: &SigmaLaw, interval: &IntervalSet, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("validation needs n >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x_clean, conditions) = data.sample_batch(n, &mut rng);
        let sigmas = (0..n)
            .map(|_| law.sample_sigma(Some(interval), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let eps = Tensor::from_fn(x_clean.shape(), |_| rng.sample(StandardNormal));
        Ok(Self {
            x_clean,
            conditions,
            sigmas,
            eps,
        })
    }

    pub fn loss(&self, denoiser: &dyn Denoise, ctx: &ContextBatch, pc: &Preconditioning) -> Result<f64> {
        training_loss(denoiser, &self.x_clean, ctx, &self.eps, &self.sigmas, pc)
    }

    /// Loss of the exact posterior-mean denoiser of each row's condition.
    pub fn oracle_loss(&self, mixtures: &[GaussianMixture], pc: &Preconditioning) -> Result<f64> {
        let oracle = ConditionalAnalyticDenoiser {
            mixtures: mixtures.to_vec(),
            conditions: self.conditions.clone(),
        };
        self.loss(&oracle, &ContextBatch::empty(self.sigmas.len(), 1, 1), pc)
    }
}

/// Mean objective over `n` held-out draws with fully conditional contexts.
#[allow(clippy::too_many_arguments)]
pub fn per_interval_val_loss(
    denoiser: &dyn Denoise,
    data: &dyn DataSource,
    encoder: &ConditionEncoder,
    law: &SigmaLaw,
    interval: &IntervalSet,
    n: usize,
    seed: u64,
    pc: &Preconditioning,
) -> Result<f64> {
    let set = ValidationSet::draw(data, law, interval, n, seed)?;
    set.loss(denoiser, &encoder.conditional_batch(&set.conditions)?, pc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricName {
    SlicedWasserstein,
    Wasserstein1Marginal,
    PerIntervalLoss,
}

impl MetricName {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SlicedWasserstein => "sliced_wasserstein",
            Self::Wasserstein1Marginal => "wasserstein1_marginal",
            Self::PerIntervalLoss => "per_interval_loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: MetricName,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "name,value,n_samples,seed";
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.name.as_str(),
            self.value,
            self.n_samples,
            self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w1_basics() {
        assert_eq!(wasserstein1_1d(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1_1d(&[0.0; 5], &[1.0; 5]).unwrap(), 1.0);
        assert!(wasserstein1_1d(&[], &[1.0]).is_err());
        // unequal sizes: {0} vs {0, 1} has W1 = 0.5
        assert!((wasserstein1_1d(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((wasserstein1_1d(&[0.0, 1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn w1_uniform_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>() + 0.5).collect();
        assert!((wasserstein1_1d(&a, &b).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn sliced_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::from_fn(&[10_000, 2], |_| rng.sample(StandardNormal));
        let b = Tensor::from_fn(&[10_000, 2], |i| {
            rng.sample::<f64, _>(StandardNormal) + if i % 2 == 0 { 1.0 } else { 0.0 }
        });
        let sw = sliced_wasserstein(&a, &b, 64, &mut rng).unwrap();
        assert!((sw - 2.0 / std::f64::consts::PI).abs() < 0.05, "{sw}");
        assert!(sliced_wasserstein(&a, &Tensor::zeros(&[3, 3]), 4, &mut rng).is_err());
    }

    #[test]
    fn report_line() {
        let r = MetricReport {
            name: MetricName::PerIntervalLoss,
            value: 0.25,
            n_samples: 10,
            seed: 7,
        };
        assert_eq!(r.to_string(), "per_interval_loss,0.25,10,7");
    }
}
