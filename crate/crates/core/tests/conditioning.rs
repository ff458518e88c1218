use ediff::conditioning::{assemble_context, ConditionEncoder, EmbedConfig};
use ediff::harness::ToyDataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// p-value of the chi-square independence test on a 2x2 table of drop events.
fn independence_p(pairs: &[(bool, bool)]) -> f64 {
    let mut table = [[0.0f64; 2]; 2];
    for &(a, b) in pairs {
        table[a as usize][b as usize] += 1.0;
    }
    let n = pairs.len() as f64;
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let expected = rows[i] * cols[j] / n;
            stat += (table[i][j] - expected).powi(2) / expected;
        }
    }
    ChiSquared::new(1.0).unwrap().sf(stat)
}

#[test]
fn drop_events_are_independent_across_slots_and_steps() {
    let cfg = EmbedConfig::default();
    let data = ToyDataset::gmm2d_conditional(4).unwrap();
    let enc = ConditionEncoder::new(&cfg, &data.descriptors()).unwrap();
    let slots = enc.slots(1).unwrap();
    let null = vec![0.0; cfg.dim];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let masks: Vec<[bool; 3]> = (0..100_000)
        .map(|_| assemble_context(&slots, &null, true, &mut rng).unwrap().active_mask)
        .collect();
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let pairs: Vec<(bool, bool)> = masks.iter().map(|m| (m[a], m[b])).collect();
        let p = independence_p(&pairs);
        assert!(p > 0.001, "slots {a} and {b}: p = {p}");
    }
    for slot in 0..3 {
        let pairs: Vec<(bool, bool)> = masks.windows(2).map(|w| (w[0][slot], w[1][slot])).collect();
        let p = independence_p(&pairs);
        assert!(p > 0.001, "slot {slot} across steps: p = {p}");
    }
}

#[test]
fn dropped_conditions_are_indistinguishable() {
    let cfg = EmbedConfig {
        dropout_text_a: 1.0,
        dropout_text_b: 1.0,
        dropout_image: 1.0,
        ..EmbedConfig::default()
    };
    let data = ToyDataset::gmm2d_conditional(4).unwrap();
    let enc = ConditionEncoder::new(&cfg, &data.descriptors()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = enc.training_batch(&[0, 1, 2, 3], &mut rng).unwrap();
    let b = enc.training_batch(&[3, 3, 1, 0], &mut rng).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, enc.unconditional_batch(4));
}
