use std::collections::BTreeMap;
use std::sync::Arc;

use ediff::conditioning::ContextBatch;
use ediff::denoiser::{AnalyticDenoiser, Denoise, GaussianMixture, MixtureComponent};
use ediff::ensemble::{split_node, BranchSchedule, EnsembleRouter, ExpertId, ExpertNode, RoutedExperts, SingleExpert};
use ediff::harness::Config;
use ediff::noise::{NodeId, SigmaLaw};
use ediff::sampler::{sample, SamplerConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_partition(rng: &mut ChaCha8Rng, splits: usize) -> Vec<NodeId> {
    let mut leaves = vec![NodeId::ROOT];
    for _ in 0..splits {
        let i = rng.random_range(0..leaves.len());
        let (a, b) = leaves[i].children().unwrap();
        leaves.splice(i..=i, [a, b]);
    }
    leaves
}

fn router_over(law: SigmaLaw, nodes: &[NodeId]) -> EnsembleRouter {
    let mut r = EnsembleRouter::new(law);
    for n in nodes {
        r.push(&n.to_string(), &format!("model-{n}")).unwrap();
    }
    r
}

#[test]
fn routing_is_total_and_single_valued() {
    let law = SigmaLaw::default();
    let config_d = EnsembleRouter::config_d(law, "a", "b", "c").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tree = router_over(law, &random_partition(&mut rng, 12));
    for router in [config_d, tree] {
        assert!(router.validate_partition().is_empty());
        for _ in 0..100_000 {
            let sigma = law.sample_sigma(None, &mut rng).unwrap();
            router.route(sigma).unwrap();
        }
        for sigma in [0.002, 80.0, law.quantile_sigma(0.5).unwrap()] {
            router.route(sigma).unwrap();
        }
    }
}

#[test]
fn full_level_routing_agrees_with_interval_membership() {
    let law = SigmaLaw::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for level in 1..=6u32 {
        let nodes: Vec<NodeId> = (0..1u64 << level).map(|i| NodeId::new(level, i).unwrap()).collect();
        let router = router_over(law, &nodes);
        for _ in 0..2000 {
            let sigma = law.sample_sigma(None, &mut rng).unwrap();
            let owner = nodes
                .iter()
                .find(|n| law.interval_bounds(**n).unwrap().contains(sigma))
                .unwrap();
            assert_eq!(router.route(sigma).unwrap(), format!("model-{owner}"));
        }
    }
}

#[test]
fn split_then_merge_samples_like_the_parent() {
    let law = SigmaLaw::default();
    let parent = ExpertNode {
        id: ExpertId::Node(NodeId::ROOT),
        model_ref: "root".into(),
        trained_iters: 100,
    };
    let (lo, hi) = split_node(&parent).unwrap();
    assert_eq!((lo.trained_iters, lo.model_ref.as_str()), (0, "root"));
    let den: Arc<dyn Denoise> = Arc::new(AnalyticDenoiser {
        mixture: GaussianMixture::new(vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.3, -0.2],
            scale: 0.4,
        }])
        .unwrap(),
    });
    let mut split = EnsembleRouter::new(law);
    split.push(&lo.id.to_string(), "lo").unwrap();
    split.push(&hi.id.to_string(), "hi").unwrap();
    let routed = RoutedExperts::new(
        split,
        BTreeMap::from([("lo".to_string(), den.clone()), ("hi".to_string(), den.clone())]),
    )
    .unwrap();
    // merging discards the children and keeps the parent
    let merged = SingleExpert {
        name: parent.model_ref.clone(),
        denoiser: den,
    };
    let ctx = ContextBatch::empty(8, 1, 1);
    let cfg = SamplerConfig::default();
    let a = sample(&routed, 2, &ctx, &ctx, &cfg, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap()
        .0;
    let b = sample(&merged, 2, &ctx, &ctx, &cfg, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap()
        .0;
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn router_text_round_trips(seed in any::<u64>(), splits in 0usize..10) {
        let law = SigmaLaw::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let router = router_over(law, &random_partition(&mut rng, splits));
        prop_assert_eq!(EnsembleRouter::parse(law, &router.to_string()).unwrap(), router);
    }

    #[test]
    fn schedule_text_round_trips(seed in any::<u64>(), iters in prop::collection::vec(0u64..5000, 1..8)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = String::new();
        let mut trained = vec![NodeId::ROOT];
        text.push_str(&format!("node=0,0 init=fresh iters={}\n", iters[0]));
        for &n in &iters[1..] {
            let parent = trained[rng.random_range(0..trained.len())];
            let (a, b) = parent.children().unwrap();
            let child = if rng.random_bool(0.5) { a } else { b };
            text.push_str(&format!("node={child} init={parent} iters={n}\n"));
            trained.push(child);
        }
        let schedule = BranchSchedule::parse(&text).unwrap();
        prop_assert_eq!(BranchSchedule::parse(&schedule.to_string()).unwrap(), schedule);
    }

    #[test]
    fn config_snapshot_round_trips(seed in any::<u64>(), lr in 1e-6f64..1.0, steps in 1usize..200) {
        let cfg = Config::parse(&format!("seed={seed}\nlr={lr}\nn_steps={steps}")).unwrap();
        let again = Config::parse(&cfg.snapshot()).unwrap();
        prop_assert_eq!(again.snapshot(), cfg.snapshot());
        prop_assert_eq!(again.get::<f64>("lr").unwrap(), lr);
    }
}

#[test]
fn toy_schedule_config_d_is_a_partition() {
    let schedule = BranchSchedule::toy();
    let targets: Vec<String> = schedule.entries.iter().map(|e| e.target.to_string()).collect();
    for name in ["9,511", "~9,511,~4,0", "3,0"] {
        assert!(targets.iter().any(|t| t == name), "{name} is not trained");
    }
    let router = EnsembleRouter::config_d(SigmaLaw::default(), "9,511", "~9,511,~4,0", "3,0").unwrap();
    assert!(router.validate_partition().is_empty());
}
