//! Preconditioned denoisers, the weighted training loss, the score
//! relation, and the exact posterior-mean denoiser for isotropic Gaussian
//! mixtures.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::conditioning::ContextBatch;
use crate::engine::{Tensor, TensorError};
use crate::error::{invalid, Error, Result};

/// Anything that maps noisy samples to clean estimates.
///
/// `x` has a leading batch axis and `sigmas` holds one noise level per row.
pub trait Denoise: Send + Sync {
    fn denoise(&self, x: &Tensor, sigmas: &[f64], ctx: &ContextBatch) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub sigma_data: f64,
}

impl Default for Preconditioning {
    fn default() -> Self {
        Self { sigma_data: 0.5 }
    }
}

/// The scalars wrapped around the raw network at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub skip: f64,
    pub out: f64,
    pub input: f64,
    pub noise: f64,
}

impl Preconditioning {
    pub fn new(sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(invalid(format!("sigma_data must be positive, got {sigma_data}")));
        }
        Ok(Self { sigma_data })
    }

    fn sigma_star(&self, sigma: f64) -> f64 {
        (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn coefficients(&self, sigma: f64) -> Result<Coefficients> {
        check_sigma(sigma)?;
        let s = self.sigma_star(sigma);
        Ok(Coefficients {
            skip: (self.sigma_data / s).powi(2),
            out: sigma * self.sigma_data / s,
            input: 1.0 / s,
            noise: sigma.ln() / 4.0,
        })
    }

    /// Loss weight that cancels the output scale of the raw network.
    pub fn loss_weight(&self, sigma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        Ok((self.sigma_star(sigma) / (sigma * self.sigma_data)).powi(2))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive and finite, got {sigma}")));
    }
    Ok(())
}

fn check_batch(x: &Tensor, sigmas: &[f64]) -> Result<usize> {
    if x.ndim() == 0 || x.shape()[0] != sigmas.len() {
        return Err(invalid(format!(
            "batch of shape {:?} needs one sigma per row, got {}",
            x.shape(),
            sigmas.len()
        )));
    }
    Ok(x.numel() / sigmas.len().max(1))
}

/// `skip * x + out * F(input * x, noise)` per batch row.
///
/// `raw_net` receives the scaled input and the per-row noise-conditioning
/// scalars `ln(sigma)/4`.
pub fn precondition_forward<F>(raw_net: F, x: &Tensor, sigmas: &[f64], pc: &Preconditioning) -> Result<Tensor>
where
    F: FnOnce(&Tensor, &[f64]) -> Result<Tensor>,
{
    let row = check_batch(x, sigmas)?;
    let coefs = sigmas.iter().map(|&s| pc.coefficients(s)).collect::<Result<Vec<_>>>()?;
    let mut scaled = x.clone();
    for (chunk, c) in scaled.data_mut().chunks_mut(row.max(1)).zip(&coefs) {
        chunk.iter_mut().for_each(|v| *v *= c.input);
    }
    let noise: Vec<f64> = coefs.iter().map(|c| c.noise).collect();
    let f = raw_net(&scaled, &noise)?;
    if f.shape() != x.shape() {
        return Err(TensorError::shape("precondition_forward", x.shape(), f.shape()).into());
    }
    let mut out = f;
    for ((o, xi), c) in out
        .data_mut()
        .chunks_mut(row.max(1))
        .zip(x.data().chunks(row.max(1)))
        .zip(&coefs)
    {
        for (ov, xv) in o.iter_mut().zip(xi) {
            *ov = c.skip * xv + c.out * *ov;
        }
    }
    Ok(out)
}

/// Weighted squared reconstruction error of a given estimate: per row
/// `lambda(sigma) * ||d - x_clean||^2`, averaged over rows.
pub fn weighted_reconstruction_error(
    d: &Tensor,
    x_clean: &Tensor,
    sigmas: &[f64],
    pc: &Preconditioning,
) -> Result<f64> {
    if d.shape() != x_clean.shape() {
        return Err(TensorError::shape("training_loss", d.shape(), x_clean.shape()).into());
    }
    let row = check_batch(x_clean, sigmas)?;
    let mut total = 0.0;
    for ((dr, xr), &s) in d
        .data()
        .chunks(row.max(1))
        .zip(x_clean.data().chunks(row.max(1)))
        .zip(sigmas)
    {
        let se: f64 = dr.iter().zip(xr).map(|(a, b)| (a - b) * (a - b)).sum();
        total += pc.loss_weight(s)? * se;
    }
    Ok(total / sigmas.len() as f64)
}

/// Denoising loss at `x_clean + sigma * eps`.
pub fn training_loss(
    denoiser: &dyn Denoise,
    x_clean: &Tensor,
    ctx: &ContextBatch,
    eps: &Tensor,
    sigmas: &[f64],
    pc: &Preconditioning,
) -> Result<f64> {
    if eps.shape() != x_clean.shape() {
        return Err(TensorError::shape("training_loss", x_clean.shape(), eps.shape()).into());
    }
    let row = check_batch(x_clean, sigmas)?;
    for &s in sigmas {
        check_sigma(s)?;
    }
    let mut noisy = x_clean.clone();
    for ((v, e), i) in noisy.data_mut().iter_mut().zip(eps.data()).zip(0..) {
        *v += sigmas[i / row.max(1)] * e;
    }
    let d = denoiser.denoise(&noisy, sigmas, ctx)?;
    weighted_reconstruction_error(&d, x_clean, sigmas, pc)
}

/// `(D - x) / sigma^2`, the gradient of the log smoothed density.
pub fn score_from_denoiser(d: &Tensor, x: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("score needs sigma > 0, got {sigma}")));
    }
    let inv = 1.0 / (sigma * sigma);
    Ok(d.zip_map(x, |a, b| (a - b) * inv)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scale: f64,
}

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

impl GaussianMixture {
    /// Weights are normalized here; they only need to be non-negative with a
    /// positive sum.
    pub fn new(mut components: Vec<MixtureComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(invalid("mixture needs at least one component"));
        };
        let dim = first.mean.len();
        if dim == 0 {
            return Err(invalid("mixture components need a non-empty mean"));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(invalid(format!(
                    "component {k} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(invalid(format!("component {k} has weight {}", c.weight)));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(invalid(format!("component {k} has scale {}", c.scale)));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(invalid(format!("component {k} has a non-finite mean")));
            }
            total += c.weight;
        }
        if !(total > 0.0) {
            return Err(invalid("mixture weights sum to zero"));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Unnormalized log responsibilities `ln w_k + ln N(x; mu_k, (s_k^2+sigma^2) I)`.
    fn log_terms(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let d = self.dim() as f64;
        self.components
            .iter()
            .map(|c| {
                let var = c.scale * c.scale + sigma * sigma;
                let r2: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
                c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - r2 / (2.0 * var)
            })
            .collect()
    }

    fn responsibilities(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let logs = self.log_terms(x, sigma);
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::DegenerateMixture { sigma });
        }
        let mut r: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= z);
        Ok(r)
    }

    /// Log density of the mixture convolved with `N(0, sigma^2 I)`.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.check_point(x)?;
        let logs = self.log_terms(x, sigma);
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::DegenerateMixture { sigma });
        }
        Ok(m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(invalid(format!(
                "point has dimension {}, mixture has {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("point is not finite"));
        }
        Ok(())
    }

    /// Posterior mean `E[x_clean | x]` under Gaussian corruption of scale `sigma`.
    pub fn denoise_point(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("sigma must be non-negative, got {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        let r = self.responsibilities(x, sigma)?;
        let mut out = vec![0.0; x.len()];
        for (c, rk) in self.components.iter().zip(r) {
            let shrink = c.scale * c.scale / (c.scale * c.scale + sigma * sigma);
            for ((o, xi), m) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += rk * (m + shrink * (xi - m));
            }
        }
        Ok(out)
    }

    /// Exact gradient of [`log_density`](Self::log_density).
    pub fn score_point(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let r = self.responsibilities(x, sigma)?;
        let mut out = vec![0.0; x.len()];
        for (c, rk) in self.components.iter().zip(r) {
            let var = c.scale * c.scale + sigma * sigma;
            for ((o, xi), m) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += rk * (m - xi) / var;
            }
        }
        Ok(out)
    }

    /// Draws `n` samples from the mixture convolved with `N(0, sigma^2 I)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, sigma: f64, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (k, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let c = &self.components[pick];
            let s = (c.scale * c.scale + sigma * sigma).sqrt();
            for m in &c.mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + s * z);
            }
        }
        Tensor::new(vec![n, d], data).expect("sized by construction")
    }

    /// Row-wise [`denoise_point`](Self::denoise_point) over a `(batch, dim)` tensor.
    pub fn denoise_batch(&self, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
        if x.ndim() != 2 || x.shape()[1] != self.dim() {
            return Err(invalid(format!(
                "expected (batch, {}) input, got {:?}",
                self.dim(),
                x.shape()
            )));
        }
        check_batch(x, sigmas)?;
        let mut data = Vec::with_capacity(x.numel());
        for (i, &s) in sigmas.iter().enumerate() {
            data.extend(self.denoise_point(x.row(i), s)?);
        }
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }
}

impl fmt::Display for GaussianMixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.components {
            write!(f, "{}", c.weight)?;
            for m in &c.mean {
                write!(f, " {m}")?;
            }
            writeln!(f, " {}", c.scale)?;
        }
        Ok(())
    }
}

impl FromStr for GaussianMixture {
    type Err = Error;

    /// One component per line: `w mu_0 mu_1 ... s`. Blank lines and `#`
    /// comments are skipped.
    fn from_str(s: &str) -> Result<Self> {
        let mut comps = Vec::new();
        for (i, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let nums = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        msg: format!("{t:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if nums.len() < 3 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected `w mu_0 ... s`".into(),
                });
            }
            comps.push(MixtureComponent {
                weight: nums[0],
                mean: nums[1..nums.len() - 1].to_vec(),
                scale: nums[nums.len() - 1],
            });
        }
        GaussianMixture::new(comps)
    }
}

/// Ground-truth denoiser for mixture data; ignores the context.
#[derive(Clone, Debug)]
pub struct AnalyticDenoiser {
    pub mixture: GaussianMixture,
}

impl Denoise for AnalyticDenoiser {
    fn denoise(&self, x: &Tensor, sigmas: &[f64], _ctx: &ContextBatch) -> Result<Tensor> {
        self.mixture.denoise_batch(x, sigmas)
    }
}

/// One mixture per condition; each row uses the mixture of its condition.
#[derive(Clone, Debug)]
pub struct ConditionalAnalyticDenoiser {
    pub mixtures: Vec<GaussianMixture>,
    pub conditions: Vec<usize>,
}

impl Denoise for ConditionalAnalyticDenoiser {
    fn denoise(&self, x: &Tensor, sigmas: &[f64], _ctx: &ContextBatch) -> Result<Tensor> {
        if self.conditions.len() != sigmas.len() {
            return Err(invalid("one condition per row required"));
        }
        check_batch(x, sigmas)?;
        let mut data = Vec::with_capacity(x.numel());
        for (i, (&c, &s)) in self.conditions.iter().zip(sigmas).enumerate() {
            let gmm = self
                .mixtures
                .get(c)
                .ok_or_else(|| invalid(format!("no mixture for condition {c}")))?;
            data.extend(gmm.denoise_point(x.row(i), s)?);
        }
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }
}
