use std::sync::Arc;

use ediff::conditioning::ContextBatch;
use ediff::denoiser::{
    precondition_forward, score_from_denoiser, weighted_reconstruction_error, AnalyticDenoiser, Denoise,
    GaussianMixture, MixtureComponent, Preconditioning,
};
use ediff::engine::Tensor;
use ediff::ensemble::SingleExpert;
use ediff::sampler::{integrate, SamplerConfig, Solver};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn component(weight: f64, mean: Vec<f64>, scale: f64) -> MixtureComponent {
    MixtureComponent { weight, mean, scale }
}

fn three_blobs() -> GaussianMixture {
    GaussianMixture::new(vec![
        component(0.5, vec![0.8, 0.0], 0.15),
        component(0.3, vec![-0.4, 0.7], 0.2),
        component(0.2, vec![-0.4, -0.7], 0.1),
    ])
    .unwrap()
}

proptest! {
    #[test]
    fn exact_raw_output_round_trips_through_preconditioning(
        sigma in 0.002f64..80.0,
        x0 in -3.0f64..3.0,
        x1 in -3.0f64..3.0,
    ) {
        let pc = Preconditioning::default();
        let gmm = three_blobs();
        let x = Tensor::new(vec![1, 2], vec![x0, x1]).unwrap();
        let d = gmm.denoise_batch(&x, &[sigma]).unwrap();
        let c = pc.coefficients(sigma).unwrap();
        // the raw output that makes the wrapper reproduce d
        let f = d.zip_map(&x, |dv, xv| (dv - c.skip * xv) / c.out).unwrap();
        let back = precondition_forward(
            |scaled, noise| {
                assert_eq!(noise, &[sigma.ln() / 4.0]);
                assert!((scaled.data()[0] - x0 * c.input).abs() < 1e-12);
                Ok(f.clone())
            },
            &x,
            &[sigma],
            &pc,
        )
        .unwrap();
        let scale = d.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
        prop_assert!(back.max_abs_diff(&d).unwrap() <= 1e-12 * scale);
    }

    #[test]
    fn loss_weight_cancels_output_scale(sigma in 1e-4f64..1e3, sigma_data in 0.05f64..5.0) {
        let pc = Preconditioning::new(sigma_data).unwrap();
        let out = pc.coefficients(sigma).unwrap().out;
        prop_assert!((pc.loss_weight(sigma).unwrap() * out * out - 1.0).abs() < 1e-12);
    }
}

#[test]
fn posterior_mean_beats_every_perturbation() {
    let pc = Preconditioning::default();
    let gmm = three_blobs();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clean = gmm.sample(n, 0.0, &mut rng);
    let sigmas: Vec<f64> = (0..n).map(|i| [0.1, 0.4, 1.5][i % 3]).collect();
    let noisy = Tensor::from_fn(&[n, 2], |i| {
        clean.data()[i] + sigmas[i / 2] * rng.sample::<f64, _>(StandardNormal)
    });
    let d = gmm.denoise_batch(&noisy, &sigmas).unwrap();
    let best = weighted_reconstruction_error(&d, &clean, &sigmas, &pc).unwrap();
    for trial in 0..4 {
        let (a, b, f) = (
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(0.5..3.0),
        );
        let perturbed = Tensor::from_fn(&[n, 2], |i| {
            let x = noisy.data()[i];
            d.data()[i]
                + if i % 2 == 0 {
                    a * (f * x).sin()
                } else {
                    b * (f * x).cos()
                }
        });
        let worse = weighted_reconstruction_error(&perturbed, &clean, &sigmas, &pc).unwrap();
        assert!(worse > best, "trial {trial}: {worse} <= {best}");
    }
}

#[test]
fn score_has_zero_mean_under_the_smoothed_density() {
    let gmm = three_blobs();
    let n = 200_000;
    for (k, sigma) in [0.05, 0.5, 3.0].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + k as u64);
        let x = gmm.sample(n, sigma, &mut rng);
        let d = gmm.denoise_batch(&x, &vec![sigma; n]).unwrap();
        let score = score_from_denoiser(&d, &x, sigma).unwrap();
        for axis in 0..2 {
            let vals: Vec<f64> = score.data().iter().skip(axis).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let stderr = (var / n as f64).sqrt();
            assert!(
                mean.abs() < 3.0 * stderr,
                "sigma {sigma} axis {axis}: {mean} vs {stderr}"
            );
        }
    }
}

#[test]
fn symmetric_mixture_keeps_axis_trajectories_on_axis() {
    let gmm = GaussianMixture::new(vec![
        component(0.5, vec![1.0, 0.0], 0.3),
        component(0.5, vec![-1.0, 0.0], 0.3),
    ])
    .unwrap();
    let source = SingleExpert {
        name: "sym".into(),
        denoiser: Arc::new(AnalyticDenoiser { mixture: gmm }),
    };
    let ctx = ContextBatch::empty(3, 1, 1);
    // the axis of symmetry is x = 0
    let x = Tensor::new(vec![3, 2], vec![0.0, 40.0, 0.0, -12.0, 0.0, 3.0]).unwrap();
    for solver in [Solver::Heun, Solver::Euler, Solver::AdamsBashforth] {
        let cfg = SamplerConfig {
            solver,
            ..SamplerConfig::default()
        };
        let (_, traj) = integrate(&source, x.clone(), &|_| ctx.clone(), &ctx, &cfg).unwrap();
        for state in &traj.states {
            for row in 0..3 {
                assert!(state.data()[row * 2].abs() < 1e-9);
            }
        }
    }
}

/// Gaussian oracle whose mean moves to `shift` when the context carries any
/// global conditioning.
struct ShiftedGaussian {
    shift: [f64; 2],
}

impl Denoise for ShiftedGaussian {
    fn denoise(&self, x: &Tensor, sigmas: &[f64], ctx: &ContextBatch) -> ediff::Result<Tensor> {
        let s2 = 0.25;
        Ok(Tensor::from_fn(x.shape(), |i| {
            let (row, axis) = (i / 2, i % 2);
            let on = ctx.global.row(row).iter().any(|&g| g != 0.0);
            let mean = if on { self.shift[axis] } else { 0.0 };
            let k = s2 / (s2 + sigmas[row] * sigmas[row]);
            mean + k * (x.data()[i] - mean)
        }))
    }
}

#[test]
fn guidance_between_zero_and_one_interpolates_affine_denoisers() {
    let source = SingleExpert {
        name: "affine".into(),
        denoiser: Arc::new(ShiftedGaussian { shift: [1.5, -0.5] }),
    };
    let uncond = ContextBatch::empty(4, 2, 3);
    let mut cond = ContextBatch::empty(4, 2, 3);
    cond.global = Tensor::full(&[4, 3], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[4, 2], |_| 80.0 * rng.sample::<f64, _>(StandardNormal));
    let run = |s: f64| {
        let cfg = SamplerConfig {
            guidance_scale: s,
            n_steps: 18,
            ..SamplerConfig::default()
        };
        integrate(&source, x.clone(), &|_| cond.clone(), &uncond, &cfg)
            .unwrap()
            .0
    };
    let (x0, x1) = (run(0.0), run(1.0));
    assert!(x0.max_abs_diff(&x1).unwrap() > 0.5);
    for s in [0.25, 0.5, 0.9] {
        let xs = run(s);
        let line = x0.zip_map(&x1, |a, b| a + s * (b - a)).unwrap();
        assert!(xs.max_abs_diff(&line).unwrap() < 1e-9, "s = {s}");
    }
}
