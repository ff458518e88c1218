use std::sync::Arc;

use ediff::conditioning::ContextBatch;
use ediff::denoiser::Denoise;
use ediff::engine::Tensor;
use ediff::ensemble::{ExpertId, SingleExpert};
use ediff::harness::experiments::{
    draw_samples, guidance_sweep, prompt_switch_curve, pww_demo, sampler_config, Workbench,
};
use ediff::harness::metrics::{sliced_wasserstein, wasserstein1_1d, ValidationSet};
use ediff::harness::{Config, ToyDataset};
use ediff::nets::{build_denoiser, DenoiserModel, PreconditionedDenoiser};
use ediff::sampler::SamplerConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn perturbed(wb: &Workbench, seed: u64) -> DenoiserModel {
    let mut model = build_denoiser(&wb.spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    model
}

/// Returns the clean rows it was built from, whatever the input.
struct Memorized(Tensor);

impl Denoise for Memorized {
    fn denoise(&self, _: &Tensor, _: &[f64], _: &ContextBatch) -> ediff::Result<Tensor> {
        Ok(self.0.clone())
    }
}

#[test]
fn validation_loss_reference_points() {
    let wb = Workbench::from_config(&Config::parse("seed=3").unwrap()).unwrap();
    let interval = "9,511".parse::<ExpertId>().unwrap().interval_set(&wb.law).unwrap();
    let set = ValidationSet::draw(&wb.data, &wb.law, &interval, 3000, 11).unwrap();
    let n = set.sigmas.len();
    let empty = ContextBatch::empty(n, 1, 1);

    assert_eq!(set.loss(&Memorized(set.x_clean.clone()), &empty, &wb.pc).unwrap(), 0.0);

    let floor = set.oracle_loss(wb.data.mixtures(), &wb.pc).unwrap();
    assert!(floor > 0.0);

    // a zero network leaves only the skip path
    let zero = PreconditionedDenoiser::new(Arc::new(build_denoiser(&wb.spec).unwrap()));
    let ctx = wb.encoder.conditional_batch(&set.conditions).unwrap();
    let got = set.loss(&zero, &ctx, &wb.pc).unwrap();
    let sd = 0.5f64;
    let mut expected = 0.0;
    for i in 0..n {
        let s = set.sigmas[i];
        let se: f64 = set
            .x_clean
            .row(i)
            .iter()
            .zip(set.eps.row(i))
            .map(|(x, e)| (sd * sd * e - s * x).powi(2))
            .sum();
        expected += se / (sd * sd * (s * s + sd * sd));
    }
    expected /= n as f64;
    assert!((got - expected).abs() <= 1e-10 * expected, "{got} vs {expected}");
    assert!(got >= floor);
}

fn sample_vec(seed: u64, n: usize, shift: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()
}

proptest! {
    #[test]
    fn wasserstein_is_symmetric_and_translates(
        seed in any::<u64>(),
        na in 1usize..40,
        nb in 1usize..40,
        c in -3.0f64..3.0,
    ) {
        let a = sample_vec(seed, na, 0.0);
        let b = sample_vec(seed ^ 1, nb, 0.5);
        let ab = wasserstein1_1d(&a, &b).unwrap();
        prop_assert!((ab - wasserstein1_1d(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(wasserstein1_1d(&a, &a).unwrap() == 0.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
        prop_assert!((wasserstein1_1d(&a, &shifted).unwrap() - c.abs()).abs() <= 1e-9);
    }

    #[test]
    fn unequal_sizes_match_replicated_samples(seed in any::<u64>(), na in 1usize..12, nb in 1usize..12) {
        let a = sample_vec(seed, na, 0.0);
        let b = sample_vec(seed ^ 2, nb, 0.3);
        // replicating each sample leaves the empirical law unchanged
        let rep = |v: &[f64], k: usize| v.iter().flat_map(|x| std::iter::repeat_n(*x, k)).collect::<Vec<_>>();
        let (ra, rb) = (rep(&a, nb), rep(&b, na));
        let reference = wasserstein1_1d(&ra, &rb).unwrap();
        prop_assert!((wasserstein1_1d(&a, &b).unwrap() - reference).abs() <= 1e-10);
    }

    #[test]
    fn sliced_wasserstein_is_symmetric(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[n, 3], |_| rng.sample(StandardNormal));
        let b = Tensor::from_fn(&[n + 3, 3], |_| 1.0 + rng.sample::<f64, _>(StandardNormal));
        let ab = sliced_wasserstein(&a, &b, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let ba = sliced_wasserstein(&b, &a, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(sliced_wasserstein(&a, &a, 4, &mut rng).unwrap() == 0.0);
    }
}

#[test]
fn prompt_switch_endpoints_are_exact() {
    let cfg = Config::parse("seed=5\nn_samples=64\nn_steps=12").unwrap();
    let wb = Workbench::from_config(&cfg).unwrap();
    let points = prompt_switch_curve(&wb, perturbed(&wb, 1), &cfg).unwrap();
    let first = points.iter().find(|p| p.fraction == 0.0).unwrap();
    let last = points.iter().find(|p| p.fraction == 1.0).unwrap();
    assert_eq!(first.dist_ctx2, 0.0);
    assert_eq!(last.dist_ctx1, 0.0);
    assert!(last.dist_ctx2 > 0.0);
}

#[test]
fn unguided_sampling_ignores_the_condition() {
    let cfg = Config::parse("seed=6\nn_steps=10").unwrap();
    let wb = Workbench::from_config(&cfg).unwrap();
    let source = SingleExpert {
        name: "m".into(),
        denoiser: Arc::new(PreconditionedDenoiser::new(Arc::new(perturbed(&wb, 2)))),
    };
    let run = |s: f64, c: usize| {
        let scfg = SamplerConfig {
            guidance_scale: s,
            ..sampler_config(&cfg).unwrap()
        };
        draw_samples(&wb, &source, &[c; 16], &scfg, 4).unwrap()
    };
    assert_eq!(run(0.0, 0), run(0.0, 3));
    assert_ne!(run(1.0, 0), run(1.0, 3));
    let sweep = guidance_sweep(&wb, perturbed(&wb, 2), &cfg, &[0.0, 0.0]).unwrap();
    assert_eq!(sweep[0], sweep[1]);
}

#[test]
fn zero_strength_painting_matches_the_baseline() {
    let cfg = Config::parse("seed=8\nn_samples=4\nn_steps=6\nw_prime=0\nwidth=8\ndepth=1").unwrap();
    let wb = Workbench::with_dataset(&cfg, ToyDataset::tiny_image_layout()).unwrap();
    let demo = pww_demo(&wb, perturbed(&wb, 3), &cfg).unwrap();
    assert_eq!(demo.baseline, demo.painted);
    assert_eq!(demo.baseline_fraction, demo.painted_fraction);
}
