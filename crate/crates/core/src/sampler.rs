//! Deterministic probability-flow ODE sampling, `dx/dsigma = (x - D)/sigma`,
//! with per-evaluation expert routing and classifier-free guidance.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::conditioning::ContextBatch;
use crate::engine::{Tensor, TensorError};
use crate::ensemble::ExpertSource;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Euler,
    Heun,
    AdamsBashforth,
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            "ab" | "ab_multistep" => Ok(Solver::AdamsBashforth),
            _ => Err(invalid(format!("unknown solver {s:?} (euler, heun, ab_multistep)"))),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
            Solver::AdamsBashforth => "ab_multistep",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub solver: Solver,
    pub ab_order: usize,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 25,
            sigma_max: 80.0,
            sigma_min: 0.002,
            rho: 7.0,
            solver: Solver::Heun,
            ab_order: 3,
            guidance_scale: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(invalid("n_steps must be at least 1"));
        }
        if !(self.sigma_max > self.sigma_min && self.sigma_min > 0.0 && self.sigma_max.is_finite()) {
            return Err(invalid(format!(
                "need sigma_max > sigma_min > 0, got {} and {}",
                self.sigma_max, self.sigma_min
            )));
        }
        if !(self.rho > 0.0) {
            return Err(invalid("rho must be positive"));
        }
        if !(1..=4).contains(&self.ab_order) {
            return Err(invalid(format!("ab_order must be 1..=4, got {}", self.ab_order)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(invalid(format!(
                "guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// `n_steps + 1` noise levels from `sigma_max` to `sigma_min`, then 0.
pub fn sigma_steps(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_steps;
    if n == 1 {
        return Ok(vec![cfg.sigma_max, 0.0]);
    }
    let (a, b) = (cfg.sigma_max.powf(1.0 / cfg.rho), cfg.sigma_min.powf(1.0 / cfg.rho));
    let mut out: Vec<f64> = (0..n)
        .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(cfg.rho))
        .collect();
    out[0] = cfg.sigma_max;
    out[n - 1] = cfg.sigma_min;
    out.push(0.0);
    Ok(out)
}

/// `D_uncond + s (D_cond - D_uncond)`; exact at `s = 0` and `s = 1`.
pub fn guided_denoise(d_cond: &Tensor, d_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if d_cond.shape() != d_uncond.shape() {
        return Err(TensorError::shape("guided_denoise", d_cond.shape(), d_uncond.shape()).into());
    }
    if s == 0.0 {
        return Ok(d_uncond.clone());
    }
    if s == 1.0 {
        return Ok(d_cond.clone());
    }
    Ok(d_cond.zip_map(d_uncond, |c, u| u + s * (c - u))?)
}

fn slope(x: &Tensor, d: &Tensor, sigma: f64) -> Result<Tensor> {
    Ok(x.zip_map(d, |xv, dv| (xv - dv) / sigma)?)
}

fn axpy(x: &Tensor, h: f64, dx: &Tensor) -> Result<Tensor> {
    Ok(x.zip_map(dx, |a, b| a + h * b)?)
}

/// Slopes from earlier steps, newest last.
#[derive(Clone, Debug, Default)]
pub struct StepHistory {
    sigmas: Vec<f64>,
    slopes: Vec<Tensor>,
}

// 4-point Gauss-Legendre on [-1, 1], exact for the cubic Lagrange basis.
const GL_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// `∫_{t0}^{t1} L_j(t) dt` for the Lagrange basis on `nodes`.
fn ab_coefficients(nodes: &[f64], t0: f64, t1: f64) -> Vec<f64> {
    let (mid, half) = ((t0 + t1) / 2.0, (t1 - t0) / 2.0);
    (0..nodes.len())
        .map(|j| {
            GL_NODES
                .iter()
                .zip(GL_WEIGHTS)
                .map(|(&u, w)| {
                    let t = mid + half * u;
                    let l: f64 = (0..nodes.len())
                        .filter(|&m| m != j)
                        .map(|m| (t - nodes[m]) / (nodes[j] - nodes[m]))
                        .product();
                    w * l
                })
                .sum::<f64>()
                * half
        })
        .collect()
}

/// One step from `sigma_cur` to `sigma_next`.
///
/// `denoise` is the fully composed (routed, guided) denoiser at one noise
/// level for the whole batch.
pub fn ode_step(
    x: &Tensor,
    sigma_cur: f64,
    sigma_next: f64,
    denoise: &mut dyn FnMut(&Tensor, f64) -> Result<Tensor>,
    solver: Solver,
    ab_order: usize,
    history: &mut StepHistory,
) -> Result<Tensor> {
    if !(sigma_cur > 0.0) || !(sigma_next >= 0.0) || sigma_next >= sigma_cur {
        return Err(invalid(format!(
            "need sigma_cur > sigma_next >= 0, got {sigma_cur} -> {sigma_next}"
        )));
    }
    let h = sigma_next - sigma_cur;
    let d = denoise(x, sigma_cur)?;
    let k1 = slope(x, &d, sigma_cur)?;
    match solver {
        Solver::Euler => axpy(x, h, &k1),
        Solver::Heun => {
            let pred = axpy(x, h, &k1)?;
            if sigma_next == 0.0 {
                return Ok(pred);
            }
            let d2 = denoise(&pred, sigma_next)?;
            let k2 = slope(&pred, &d2, sigma_next)?;
            let avg = k1.zip_map(&k2, |a, b| 0.5 * (a + b))?;
            axpy(x, h, &avg)
        }
        Solver::AdamsBashforth => {
            history.sigmas.push(sigma_cur);
            history.slopes.push(k1);
            let keep = ab_order.max(1);
            if history.sigmas.len() > keep {
                let drop = history.sigmas.len() - keep;
                history.sigmas.drain(..drop);
                history.slopes.drain(..drop);
            }
            let coefs = ab_coefficients(&history.sigmas, sigma_cur, sigma_next);
            let mut out = x.clone();
            for (c, s) in coefs.iter().zip(&history.slopes) {
                for (o, v) in out.data_mut().iter_mut().zip(s.data()) {
                    *o += c * v;
                }
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub sigmas: Vec<f64>,
    /// State before each step, plus the final state.
    pub states: Vec<Tensor>,
    /// Model references used by each step's evaluations, in order.
    pub denoiser_ids: Vec<Vec<String>>,
}

/// Integrate from a given initial state, choosing the context per step.
pub fn integrate(
    source: &dyn ExpertSource,
    x_init: Tensor,
    ctx_for_step: &dyn Fn(usize) -> ContextBatch,
    ctx_uncond: &ContextBatch,
    cfg: &SamplerConfig,
) -> Result<(Tensor, Trajectory)> {
    let sigmas = sigma_steps(cfg)?;
    let b = x_init.shape().first().copied().unwrap_or(0);
    if ctx_uncond.len() != b {
        return Err(invalid(format!(
            "unconditional context has {} rows, state has {b}",
            ctx_uncond.len()
        )));
    }
    let mut x = x_init;
    let mut traj = Trajectory {
        sigmas: sigmas.clone(),
        states: vec![x.clone()],
        denoiser_ids: Vec::with_capacity(cfg.n_steps),
    };
    let mut history = StepHistory::default();
    let s = cfg.guidance_scale;
    for step in 0..cfg.n_steps {
        let ctx = ctx_for_step(step);
        if ctx.len() != b {
            return Err(invalid(format!("context has {} rows, state has {b}", ctx.len())));
        }
        let mut ids = Vec::new();
        let mut eval = |x: &Tensor, sigma: f64| -> Result<Tensor> {
            let (id, den) = source.select(sigma)?;
            ids.push(id.to_string());
            let sig = vec![sigma; b];
            if s == 0.0 {
                return den.denoise(x, &sig, ctx_uncond);
            }
            let cond = den.denoise(x, &sig, &ctx)?;
            if s == 1.0 {
                return Ok(cond);
            }
            let unc = den.denoise(x, &sig, ctx_uncond)?;
            guided_denoise(&cond, &unc, s)
        };
        x = ode_step(
            &x,
            sigmas[step],
            sigmas[step + 1],
            &mut eval,
            cfg.solver,
            cfg.ab_order,
            &mut history,
        )?;
        if !x.is_finite() {
            return Err(Error::NonFiniteState { step });
        }
        traj.denoiser_ids.push(ids);
        traj.states.push(x.clone());
    }
    Ok((x, traj))
}

/// `(rows, dim)` prior draw scaled by `sigma_max`.
pub fn prior_sample<R: Rng + ?Sized>(rows: usize, dim: usize, sigma_max: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(&[rows, dim], |_| sigma_max * rng.sample::<f64, _>(StandardNormal))
}

/// Draw from the prior and integrate to `sigma = 0`.
pub fn sample<R: Rng + ?Sized>(
    source: &dyn ExpertSource,
    dim: usize,
    ctx_cond: &ContextBatch,
    ctx_uncond: &ContextBatch,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(Tensor, Trajectory)> {
    cfg.validate()?;
    let x = prior_sample(ctx_cond.len(), dim, cfg.sigma_max, rng);
    integrate(source, x, &|_| ctx_cond.clone(), ctx_uncond, cfg)
}

/// Steps before the switch: `ceil(f * n_steps)`.
pub fn switch_step(switch_fraction: f64, n_steps: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&switch_fraction) {
        return Err(invalid(format!("switch fraction {switch_fraction} outside [0, 1]")));
    }
    Ok(((switch_fraction * n_steps as f64).ceil() as usize).min(n_steps))
}

/// Sample with `ctx1` for the first `ceil(f * n_steps)` steps and `ctx2`
/// afterwards.
#[allow(clippy::too_many_arguments)]
pub fn prompt_switch_sample<R: Rng + ?Sized>(
    source: &dyn ExpertSource,
    dim: usize,
    ctx1: &ContextBatch,
    ctx2: &ContextBatch,
    ctx_uncond: &ContextBatch,
    switch_fraction: f64,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let k = switch_step(switch_fraction, cfg.n_steps)?;
    let x = prior_sample(ctx1.len(), dim, cfg.sigma_max, rng);
    let (x0, _) = integrate(
        source,
        x,
        &|step| if step < k { ctx1.clone() } else { ctx2.clone() },
        ctx_uncond,
        cfg,
    )?;
    Ok(x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticDenoiser, GaussianMixture, MixtureComponent};
    use crate::ensemble::SingleExpert;
    use std::sync::Arc;

    fn gaussian(s: f64) -> SingleExpert {
        SingleExpert {
            name: "g".into(),
            denoiser: Arc::new(AnalyticDenoiser {
                mixture: GaussianMixture::new(vec![MixtureComponent {
                    weight: 1.0,
                    mean: vec![0.0, 0.0],
                    scale: s,
                }])
                .unwrap(),
            }),
        }
    }

    #[test]
    fn schedule_examples() {
        let one = SamplerConfig {
            n_steps: 1,
            ..SamplerConfig::default()
        };
        assert_eq!(sigma_steps(&one).unwrap(), vec![80.0, 0.0]);
        let cfg = SamplerConfig::default();
        let s = sigma_steps(&cfg).unwrap();
        assert_eq!(s.len(), 26);
        assert_eq!(s[0], 80.0);
        assert_eq!(s[24], 0.002);
        assert_eq!(s[25], 0.0);
        let direct = (80f64.powf(1.0 / 7.0) + (0.002f64.powf(1.0 / 7.0) - 80f64.powf(1.0 / 7.0)) / 24.0).powi(7);
        assert!((s[1] - direct).abs() < 1e-12);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn guidance_examples() {
        let c = Tensor::from_vec(vec![1.0, 0.0]);
        let u = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(guided_denoise(&c, &u, 1.0).unwrap(), c);
        assert_eq!(guided_denoise(&c, &u, 0.0).unwrap(), u);
        assert_eq!(guided_denoise(&c, &u, 7.5).unwrap().data(), &[7.5, 0.0]);
        assert!(guided_denoise(&c, &Tensor::zeros(&[3]), 2.0).is_err());
    }

    #[test]
    fn zero_slope_keeps_state() {
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap();
        for solver in [Solver::Euler, Solver::Heun, Solver::AdamsBashforth] {
            let mut h = StepHistory::default();
            let y = ode_step(&x, 2.0, 1.0, &mut |x, _| Ok(x.clone()), solver, 3, &mut h).unwrap();
            assert_eq!(y, x);
        }
        assert!(ode_step(
            &x,
            0.0,
            0.0,
            &mut |x, _| Ok(x.clone()),
            Solver::Euler,
            1,
            &mut StepHistory::default()
        )
        .is_err());
    }

    #[test]
    fn ab_coefficients_integrate_polynomials() {
        let nodes = [3.0, 2.5, 1.7];
        let c = ab_coefficients(&nodes, 3.0, 2.0);
        // the rule must integrate 1 and t exactly over [3, 2]
        assert!((c.iter().sum::<f64>() + 1.0).abs() < 1e-14);
        let t: f64 = c.iter().zip(nodes).map(|(c, n)| c * n).sum();
        assert!((t - (4.0 - 9.0) / 2.0).abs() < 1e-13);
    }

    #[test]
    fn gaussian_contraction() {
        let src = gaussian(0.5);
        let x = Tensor::new(vec![1, 2], vec![10.0, -5.0]).unwrap();
        let cfg = SamplerConfig {
            n_steps: 80,
            sigma_max: 10.0,
            ..SamplerConfig::default()
        };
        let ctx = ContextBatch::empty(1, 1, 1);
        let (x0, traj) = integrate(&src, x.clone(), &|_| ctx.clone(), &ctx, &cfg).unwrap();
        let k = (0.25f64 / 100.25).sqrt();
        assert!((x0.data()[0] / (10.0 * k) - 1.0).abs() < 2e-3);
        assert_eq!(traj.states.len(), 81);
        assert_eq!(traj.denoiser_ids[0], vec!["g", "g"]);
        assert_eq!(traj.denoiser_ids[79], vec!["g"]);
    }

    #[test]
    fn switch_steps() {
        assert_eq!(switch_step(0.0, 25).unwrap(), 0);
        assert_eq!(switch_step(1.0, 25).unwrap(), 25);
        assert_eq!(switch_step(0.07, 25).unwrap(), 2);
        assert!(switch_step(1.5, 25).is_err());
    }
}
