use std::collections::BTreeMap;
use std::sync::Arc;

use ediff::conditioning::{ConditionDescriptors, ConditionEncoder, EmbedConfig};
use ediff::denoiser::{GaussianMixture, MixtureComponent, Preconditioning};
use ediff::engine::Tensor;
use ediff::ensemble::{BranchSchedule, ExpertId};
use ediff::harness::metrics::{per_interval_val_loss, ValidationSet};
use ediff::harness::ToyDataset;
use ediff::nets::{build_denoiser, DenoiserNetSpec, PreconditionedDenoiser};
use ediff::noise::{NodeId, SigmaLaw};
use ediff::trainer::{
    run_branch_schedule, train_interval, CheckpointRegistry, DataSource, MetricLog, NodeTraining, OptimizerConfig,
    TrainSetup,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Unconditional 2-D Gaussian data.
struct SingleGaussian {
    mean: [f64; 2],
    scale: f64,
}

impl SingleGaussian {
    fn mixture(&self) -> GaussianMixture {
        GaussianMixture::new(vec![MixtureComponent {
            weight: 1.0,
            mean: self.mean.to_vec(),
            scale: self.scale,
        }])
        .unwrap()
    }
}

impl DataSource for SingleGaussian {
    fn dim(&self) -> usize {
        2
    }
    fn n_conditions(&self) -> usize {
        1
    }
    fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
        let x = Tensor::from_fn(&[n, 2], |i| {
            self.mean[i % 2] + self.scale * rng.sample::<f64, _>(StandardNormal)
        });
        (x, vec![0; n])
    }
}

fn encoder(n_conditions: usize) -> ConditionEncoder {
    let descriptors = ConditionDescriptors {
        tokens: (0..n_conditions).map(|c| vec![vec![c as f64, 1.0]]).collect(),
        style: (0..n_conditions).map(|c| vec![c as f64]).collect(),
    };
    ConditionEncoder::new(&EmbedConfig::default(), &descriptors).unwrap()
}

fn setup<'a>(data: &'a dyn DataSource, enc: &'a ConditionEncoder, lr: f64, ema_decay: f64) -> TrainSetup<'a> {
    TrainSetup {
        data,
        encoder: enc,
        law: SigmaLaw::default(),
        pc: Preconditioning::default(),
        opt: OptimizerConfig {
            lr,
            ..OptimizerConfig::default()
        },
        ema_decay,
    }
}

fn spec() -> DenoiserNetSpec {
    DenoiserNetSpec::mlp(2, 32, 2, 16, 3)
}

fn run(schedule: &str, setup: &TrainSetup<'_>, seed: u64) -> CheckpointRegistry {
    run_branch_schedule(
        &BranchSchedule::parse(schedule).unwrap(),
        setup,
        &spec(),
        &BTreeMap::new(),
        seed,
        "t",
    )
    .unwrap()
}

#[test]
fn zero_iterations_leave_the_model_untouched() {
    let data = SingleGaussian {
        mean: [0.0; 2],
        scale: 0.5,
    };
    let enc = encoder(1);
    let s = setup(&data, &enc, 1e-3, 0.99);
    let fresh = build_denoiser(&spec()).unwrap();
    let mut state = NodeTraining::start(fresh.clone(), s.ema_decay).unwrap();
    let interval = ExpertId::Node(NodeId::ROOT).interval_set(&s.law).unwrap();
    let mut log = MetricLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    train_interval(&mut state, &s, &interval, 0, &mut rng, &mut log, "t", "0,0").unwrap();
    assert_eq!(state.model.to_bytes(), fresh.to_bytes());
    assert_eq!(state.ema_model().unwrap().to_bytes(), fresh.to_bytes());
    assert!(log.rows.is_empty());
}

#[test]
fn logged_noise_levels_stay_inside_the_interval() {
    let data = SingleGaussian {
        mean: [0.0; 2],
        scale: 0.5,
    };
    let enc = encoder(1);
    let s = setup(&data, &enc, 1e-3, 0.99);
    let reg = run(
        "node=0,0 init=fresh iters=5\nnode=2,1 init=0,0 iters=20\nnode=~9,511,~4,0 init=0,0 iters=20",
        &s,
        2,
    );
    for row in &reg.log.rows {
        let id: ExpertId = row.node.parse().unwrap();
        let (lo, hi) = id.interval_set(&s.law).unwrap().hull(&s.law).unwrap();
        assert!(
            row.mean_sigma > lo && row.mean_sigma <= hi,
            "{row:?} outside ({lo}, {hi}]"
        );
        assert!(row.loss.is_finite());
    }
    assert_eq!(reg.log.rows.len(), 45);
}

#[test]
fn children_start_from_the_parent_ema_and_runs_repeat() {
    let data = ToyDataset::gmm2d_conditional(4).unwrap();
    let enc = encoder(4);
    let s = setup(&data, &enc, 1e-3, 0.9);
    let schedule = "node=0,0 init=fresh iters=30\nnode=1,0 init=0,0 iters=5\nnode=1,1 init=0,0 iters=5";
    let a = run(schedule, &s, 9);
    let parent = a.ema["0,0"].to_bytes();
    assert_eq!(a.initial["1,0"].to_bytes(), parent);
    assert_eq!(a.initial["1,1"].to_bytes(), parent);
    assert_ne!(a.raw["0,0"].to_bytes(), parent);
    let b = run(schedule, &s, 9);
    for name in ["0,0", "1,0", "1,1"] {
        assert_eq!(a.raw[name].to_bytes(), b.raw[name].to_bytes());
        assert_eq!(a.ema[name].to_bytes(), b.ema[name].to_bytes());
    }
    assert_eq!(a.log.to_csv(), b.log.to_csv());
}

#[test]
fn zero_decay_ema_tracks_the_raw_weights() {
    let data = SingleGaussian {
        mean: [0.2, -0.1],
        scale: 0.5,
    };
    let enc = encoder(1);
    let reg = run("node=0,0 init=fresh iters=12", &setup(&data, &enc, 1e-3, 0.0), 4);
    assert_eq!(reg.ema["0,0"].to_bytes(), reg.raw["0,0"].to_bytes());
}

#[test]
fn single_gaussian_training_reaches_the_oracle_floor() {
    let data = SingleGaussian {
        mean: [0.3, -0.2],
        scale: 0.5,
    };
    let enc = encoder(1);
    let s = setup(&data, &enc, 2e-3, 0.99);
    let reg = run("node=0,0 init=fresh iters=2000", &s, 5);
    let interval = ExpertId::Node(NodeId::ROOT).interval_set(&s.law).unwrap();
    let set = ValidationSet::draw(&data, &s.law, &interval, 10_000, 77).unwrap();
    let floor = set.oracle_loss(&[data.mixture()], &s.pc).unwrap();
    let den = PreconditionedDenoiser::new(Arc::new(reg.ema["0,0"].clone()));
    let loss = set
        .loss(&den, &enc.conditional_batch(&set.conditions).unwrap(), &s.pc)
        .unwrap();
    assert!(loss <= 1.1 * floor, "loss {loss} vs floor {floor}");
}

#[test]
fn finetuned_child_is_no_worse_on_its_interval() {
    let mut passes = 0;
    let mut report = Vec::new();
    for seed in [7u64, 13, 42] {
        let data = ToyDataset::gmm2d_conditional(4).unwrap();
        let enc = encoder(4);
        let s = setup(&data, &enc, 2e-3, 0.99);
        let reg = run("node=0,0 init=fresh iters=400\nnode=1,1 init=0,0 iters=200", &s, seed);
        let interval = "1,1".parse::<ExpertId>().unwrap().interval_set(&s.law).unwrap();
        let loss = |name: &str| {
            let den = PreconditionedDenoiser::new(Arc::new(reg.ema[name].clone()));
            per_interval_val_loss(&den, &data, &enc, &s.law, &interval, 4000, 1000 + seed, &s.pc).unwrap()
        };
        let (parent, child) = (loss("0,0"), loss("1,1"));
        passes += (child <= parent * 1.05) as usize;
        report.push((seed, parent, child));
    }
    assert!(passes >= 2, "{report:?}");
}
