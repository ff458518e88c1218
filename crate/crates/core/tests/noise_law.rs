use ediff::noise::{NodeId, SigmaLaw};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

proptest! {
    #[test]
    fn quantile_is_strictly_increasing(mut qs in prop::collection::vec(1e-9f64..1.0, 2..40)) {
        let law = SigmaLaw::default();
        qs.sort_by(f64::total_cmp);
        qs.dedup();
        let sigmas: Vec<f64> = qs.iter().map(|&q| law.quantile_sigma(q).unwrap()).collect();
        for w in sigmas.windows(2) {
            prop_assert!(w[0] < w[1], "{:?}", w);
        }
    }

    #[test]
    fn quantile_round_trips_through_the_normal_cdf(q in 1e-6f64..0.999999) {
        let law = SigmaLaw::default();
        let oracle = Normal::new(-1.2, 1.2).unwrap();
        let sigma = law.quantile_sigma(q).unwrap();
        prop_assert!((oracle.cdf(sigma.ln()) - q).abs() < 1e-8);
        prop_assert!((law.cdf(sigma) - q).abs() < 1e-8);
    }
}

#[test]
fn each_level_partitions_the_positive_axis() {
    let law = SigmaLaw::default();
    for level in 0..=10u32 {
        let n = 1u64 << level;
        let mut prev_hi = 0.0;
        for i in 0..n {
            let b = law.interval_bounds(NodeId::new(level, i).unwrap()).unwrap();
            assert_eq!(b.lo, prev_hi, "level {level} node {i} leaves a gap or overlaps");
            assert!(b.lo < b.hi);
            prev_hi = b.hi;
            if level < 10 {
                let (l, r) = NodeId::new(level, i).unwrap().children().unwrap();
                let (l, r) = (law.interval_bounds(l).unwrap(), law.interval_bounds(r).unwrap());
                assert_eq!((l.lo, l.hi, r.lo, r.hi), (b.lo, l.hi, l.hi, b.hi));
            }
        }
        assert_eq!(prev_hi, f64::INFINITY, "level {level} does not reach infinity");
    }
}

#[test]
fn empirical_mass_matches_each_level() {
    let law = SigmaLaw::default();
    let n = 1_000_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws: Vec<f64> = (0..n).map(|_| law.sample_sigma(None, &mut rng).unwrap()).collect();
    for level in 1..=5u32 {
        let k = 1u64 << level;
        let p = 1.0 / k as f64;
        let tol = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
        for i in 0..k {
            let b = law.interval_bounds(NodeId::new(level, i).unwrap()).unwrap();
            let mass = draws.iter().filter(|&&s| b.contains(s)).count() as f64 / n as f64;
            assert!((mass - p).abs() <= tol, "level {level} node {i}: {mass} vs {p} ± {tol}");
        }
    }
}
