//! Toy-scale diagnostic experiments writing CSV and PPM artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::Config;
use super::data::{
    color_fraction, image_condition, position_mask, ToyDataset, ToyKind, IMAGE_CHANNELS, IMAGE_SIDE, PALETTE,
};
use super::images::{heatmap, image_grid};
use super::metrics::{sliced_wasserstein, MetricName, MetricReport, ValidationSet};
use crate::attention::{probe_csv, AttentionProbe, PhraseMask, PwwConfig, PwwInput};
use crate::conditioning::{ConditionEncoder, EmbedConfig};
use crate::denoiser::{Denoise, Preconditioning};
use crate::engine::Tensor;
use crate::ensemble::{BranchSchedule, EnsembleRouter, ExpertId, ExpertSource, RoutedExperts, SingleExpert};
use crate::error::{invalid, Error, Result};
use crate::nets::{
    attention_probe, build_denoiser, load_checkpoint, DenoiserModel, DenoiserNetSpec, PreconditionedDenoiser,
};
use crate::noise::{IntervalSet, SigmaLaw};
use crate::sampler::{prompt_switch_sample, sample, SamplerConfig};
use crate::trainer::{run_branch_schedule, CheckpointRegistry, DataSource, OptimizerConfig, TrainSetup};

pub const EXPERIMENTS: [&str; 5] = [
    "branch_vs_baseline",
    "prompt_switch_curve",
    "attention_probe",
    "guidance_sweep",
    "pww_demo",
];
pub const SWITCH_FRACTIONS: [f64; 5] = [0.0, 0.07, 0.3, 0.6, 1.0];
pub const DEFAULT_SEEDS: [u64; 3] = [7, 13, 42];
const EVAL_SEED_OFFSET: u64 = 0x00E7_A15E;

/// Dataset, encoder, network spec and optimizer settings of one run.
pub struct Workbench {
    pub data: ToyDataset,
    pub encoder: ConditionEncoder,
    pub spec: DenoiserNetSpec,
    pub law: SigmaLaw,
    pub pc: Preconditioning,
    pub opt: OptimizerConfig,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Workbench {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let kind: ToyKind = cfg.str("dataset").parse()?;
        let data = ToyDataset::new(kind, cfg.get("n_conditions")?)?;
        Self::with_dataset(cfg, data)
    }

    pub fn with_dataset(cfg: &Config, data: ToyDataset) -> Result<Self> {
        let seed: u64 = cfg.get("seed")?;
        let d_embed: usize = cfg.get("d_embed")?;
        let encoder = ConditionEncoder::new(
            &EmbedConfig {
                dim: d_embed,
                ..EmbedConfig::default()
            },
            &data.descriptors(),
        )?;
        let (width, depth) = (cfg.get("width")?, cfg.get("depth")?);
        let mut spec = match data.kind {
            ToyKind::Gmm2dConditional => DenoiserNetSpec::mlp(data.dim(), width, depth, d_embed, seed),
            ToyKind::TinyImageLayout => {
                DenoiserNetSpec::tiny_unet(IMAGE_SIDE, IMAGE_CHANNELS, width, depth, d_embed, seed)
            }
        };
        spec.n_heads = cfg.get("n_heads")?;
        spec.validate()?;
        let opt = OptimizerConfig {
            lr: cfg.get("lr")?,
            weight_decay: cfg.get("weight_decay")?,
            batch_size: cfg.get("batch_size")?,
            ..OptimizerConfig::default()
        };
        opt.validate()?;
        Ok(Self {
            data,
            encoder,
            spec,
            law: SigmaLaw::default(),
            pc: Preconditioning::default(),
            opt,
            ema_decay: cfg.get("ema_decay")?,
            seed,
        })
    }

    pub fn setup(&self) -> TrainSetup<'_> {
        TrainSetup {
            data: &self.data,
            encoder: &self.encoder,
            law: self.law,
            pc: self.pc,
            opt: self.opt,
            ema_decay: self.ema_decay,
        }
    }

    pub fn train(&self, schedule: &BranchSchedule, run_id: &str) -> Result<CheckpointRegistry> {
        run_branch_schedule(schedule, &self.setup(), &self.spec, &BTreeMap::new(), self.seed, run_id)
    }

    /// EMA weights after `iters` steps on the full noise law.
    pub fn train_shared(&self, iters: u64, run_id: &str) -> Result<DenoiserModel> {
        let schedule = BranchSchedule::parse(&format!("node=0,0 init=fresh iters={iters}"))?;
        let mut reg = self.train(&schedule, run_id)?;
        reg.ema
            .remove("0,0")
            .ok_or_else(|| Error::MissingCheckpoint("0,0".into()))
    }

    /// The configured checkpoint, or a freshly trained shared model.
    pub fn model(&self, cfg: &Config) -> Result<DenoiserModel> {
        match cfg.opt("ckpt") {
            Some(p) => {
                let m = load_checkpoint(Path::new(p))?;
                if m.spec().data_dim != self.data.dim() {
                    return Err(invalid(format!(
                        "checkpoint data_dim {} does not match dataset dim {}",
                        m.spec().data_dim,
                        self.data.dim()
                    )));
                }
                Ok(m)
            }
            None => self.train_shared(cfg.get("iters")?, "shared"),
        }
    }

    /// Rows cycle through the conditions.
    pub fn cycled_conditions(&self, n: usize) -> Vec<usize> {
        (0..n).map(|i| i % self.data.n_conditions).collect()
    }

    /// Clean data rows matching `conditions`, drawn from a fixed seed.
    pub fn reference(&self, conditions: &[usize], seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = conditions
            .iter()
            .map(|&c| Ok(self.data.sample_condition(c, 1, &mut rng)?.into_data()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_rows(&rows)?)
    }
}

pub fn sampler_config(cfg: &Config) -> Result<SamplerConfig> {
    let s = SamplerConfig {
        n_steps: cfg.get("n_steps")?,
        solver: cfg.str("solver").parse()?,
        ab_order: cfg.get("ab_order")?,
        guidance_scale: cfg.get("guidance")?,
        ..SamplerConfig::default()
    };
    s.validate()?;
    Ok(s)
}

fn single(model: DenoiserModel, name: &str) -> SingleExpert {
    SingleExpert {
        name: name.to_string(),
        denoiser: Arc::new(PreconditionedDenoiser::new(Arc::new(model))),
    }
}

/// Conditional samples, one row per entry of `conditions`.
pub fn draw_samples(
    wb: &Workbench,
    source: &dyn ExpertSource,
    conditions: &[usize],
    scfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    let ctx = wb.encoder.conditional_batch(conditions)?;
    let unc = wb.encoder.unconditional_batch(conditions.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(source, wb.data.dim(), &ctx, &unc, scfg, &mut rng)?.0)
}

fn mean_row_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.ndim() != 2 || a.shape()[0] == 0 {
        return Err(invalid("distance needs two equal non-empty 2-D tensors"));
    }
    let d = a.shape()[1];
    let total: f64 = a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.shape()[0] as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalLoss {
    pub interval: String,
    pub baseline: f64,
    pub ensemble: f64,
    pub oracle: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchComparison {
    pub seed: u64,
    pub baseline_iters: u64,
    pub losses: Vec<IntervalLoss>,
    pub sw_baseline: f64,
    pub sw_ensemble: f64,
    pub n_samples: usize,
}

impl BranchComparison {
    /// Ensemble no worse on at least one interval and within `tolerance`
    /// relative on every other.
    pub fn specialization_holds(&self, tolerance: f64) -> bool {
        let better = self.losses.iter().any(|l| l.ensemble <= l.baseline);
        let close = self.losses.iter().all(|l| l.ensemble <= l.baseline * (1.0 + tolerance));
        better && close
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,interval,baseline_loss,ensemble_loss,oracle_loss\n");
        for l in &self.losses {
            let oracle = l.oracle.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},\"{}\",{},{},{}",
                self.seed, l.interval, l.baseline, l.ensemble, oracle
            );
        }
        s
    }

    pub fn reports(&self) -> Vec<MetricReport> {
        let mut out: Vec<MetricReport> = self
            .losses
            .iter()
            .flat_map(|l| [l.baseline, l.ensemble])
            .map(|v| MetricReport {
                name: MetricName::PerIntervalLoss,
                value: v,
                n_samples: 0,
                seed: self.seed,
            })
            .collect();
        for v in [self.sw_baseline, self.sw_ensemble] {
            out.push(MetricReport {
                name: MetricName::SlicedWasserstein,
                value: v,
                n_samples: self.n_samples,
                seed: self.seed,
            });
        }
        out
    }
}

/// Shared baseline for `iters` steps versus a two-expert ensemble whose
/// shared phase and two finetunes consume the same number of samples.
pub fn branch_vs_baseline(wb: &Workbench, cfg: &Config) -> Result<BranchComparison> {
    let iters: u64 = cfg.get("iters")?;
    if iters < 4 {
        return Err(invalid("branch_vs_baseline needs iters >= 4"));
    }
    let baseline = wb.train(
        &BranchSchedule::parse(&format!("node=0,0 init=fresh iters={iters}"))?,
        "baseline",
    )?;
    let (shared, child) = (iters / 2, iters / 4);
    let ensemble = wb.train(
        &BranchSchedule::parse(&format!(
            "node=0,0 init=fresh iters={shared}\nnode=1,0 init=0,0 iters={child}\nnode=1,1 init=0,0 iters={}",
            iters - shared - child
        ))?,
        "ensemble",
    )?;
    let base_model = Arc::new(baseline.ema["0,0"].clone());
    let base_den = PreconditionedDenoiser::new(base_model.clone());
    let n_eval: usize = cfg.get("n_eval")?;
    let eval_seed = wb.seed.wrapping_add(EVAL_SEED_OFFSET);
    let mut experts: BTreeMap<String, Arc<dyn Denoise>> = BTreeMap::new();
    let mut losses = Vec::new();
    for node in ["1,0", "1,1"] {
        let id: ExpertId = node.parse()?;
        let interval = id.interval_set(&wb.law)?;
        let model = ensemble
            .ema_of(&id)
            .ok_or_else(|| Error::MissingCheckpoint(node.into()))?;
        let den = PreconditionedDenoiser::new(Arc::new(model.clone()));
        let set = ValidationSet::draw(&wb.data, &wb.law, &interval, n_eval, eval_seed)?;
        let ctx = wb.encoder.conditional_batch(&set.conditions)?;
        let oracle = match wb.data.mixtures() {
            [] => None,
            m => Some(set.oracle_loss(m, &wb.pc)?),
        };
        losses.push(IntervalLoss {
            interval: node.to_string(),
            baseline: set.loss(&base_den, &ctx, &wb.pc)?,
            ensemble: set.loss(&den, &ctx, &wb.pc)?,
            oracle,
        });
        experts.insert(node.to_string(), Arc::new(den));
    }
    let mut router = EnsembleRouter::new(wb.law);
    router.push("1,0", "1,0")?;
    router.push("1,1", "1,1")?;
    let routed = RoutedExperts::new(router, experts)?;
    let n: usize = cfg.get("n_samples")?;
    let scfg = sampler_config(cfg)?;
    let conds = wb.cycled_conditions(n);
    let reference = wb.reference(&conds, eval_seed)?;
    let sample_seed = wb.seed.wrapping_add(1);
    let x_base = draw_samples(
        wb,
        &single((*base_model).clone(), "baseline"),
        &conds,
        &scfg,
        sample_seed,
    )?;
    let x_ens = draw_samples(wb, &routed, &conds, &scfg, sample_seed)?;
    let n_proj: usize = cfg.get("n_projections")?;
    let sw = |x: &Tensor| sliced_wasserstein(x, &reference, n_proj, &mut ChaCha8Rng::seed_from_u64(eval_seed));
    Ok(BranchComparison {
        seed: wb.seed,
        baseline_iters: iters,
        losses,
        sw_baseline: sw(&x_base)?,
        sw_ensemble: sw(&x_ens)?,
        n_samples: n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchPoint {
    pub fraction: f64,
    pub switch_step: usize,
    pub dist_ctx1: f64,
    pub dist_ctx2: f64,
}

/// Distance of prompt-switched outputs to the two single-prompt outputs.
pub fn prompt_switch_curve(wb: &Workbench, model: DenoiserModel, cfg: &Config) -> Result<Vec<SwitchPoint>> {
    let (c1, c2): (usize, usize) = (cfg.get("condition")?, cfg.get("switch_to")?);
    let n: usize = cfg.get("n_samples")?;
    let scfg = sampler_config(cfg)?;
    let source = single(model, "shared");
    let ctx1 = wb.encoder.conditional_batch(&vec![c1; n])?;
    let ctx2 = wb.encoder.conditional_batch(&vec![c2; n])?;
    let unc = wb.encoder.unconditional_batch(n);
    let seed = wb.seed.wrapping_add(2);
    let run = |f: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prompt_switch_sample(&source, wb.data.dim(), &ctx1, &ctx2, &unc, f, &scfg, &mut rng)
    };
    let only1 = draw_samples(wb, &source, &vec![c1; n], &scfg, seed)?;
    let only2 = draw_samples(wb, &source, &vec![c2; n], &scfg, seed)?;
    SWITCH_FRACTIONS
        .iter()
        .map(|&f| {
            let x = run(f)?;
            Ok(SwitchPoint {
                fraction: f,
                switch_step: crate::sampler::switch_step(f, scfg.n_steps)?,
                dist_ctx1: mean_row_distance(&x, &only1)?,
                dist_ctx2: mean_row_distance(&x, &only2)?,
            })
        })
        .collect()
}

pub fn switch_csv(points: &[SwitchPoint]) -> String {
    let mut s = String::from("fraction,switch_step,dist_to_ctx1_output,dist_to_ctx2_output\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.fraction, p.switch_step, p.dist_ctx1, p.dist_ctx2);
    }
    s
}

/// Default probe grid: 12 log-spaced levels from 0.01 to 80.
pub fn probe_sigmas(cfg: &Config) -> Result<Vec<f64>> {
    let given = cfg.f64_list("sigma")?;
    if !given.is_empty() {
        return Ok(given);
    }
    let (lo, hi) = (0.01f64.ln(), 80f64.ln());
    Ok((0..12).map(|i| (lo + (hi - lo) * i as f64 / 11.0).exp()).collect())
}

/// Attention statistics of noisy held-out data at each noise level.
pub fn attention_probe_grid(
    wb: &Workbench,
    model: &DenoiserModel,
    sigmas: &[f64],
    n: usize,
) -> Result<Vec<AttentionProbe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(wb.seed.wrapping_add(EVAL_SEED_OFFSET));
    let (x_clean, conds) = wb.data.sample_batch(n, &mut rng);
    let eps = Tensor::from_fn(x_clean.shape(), |_| rand::Rng::sample(&mut rng, StandardNormal));
    let ctx = wb.encoder.conditional_batch(&conds)?;
    sigmas
        .iter()
        .map(|&s| {
            let x = x_clean.zip_map(&eps, |a, e| a + s * e)?;
            attention_probe(model, &x, s, &ctx, &wb.pc)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePoint {
    pub scale: f64,
    pub sliced_w: f64,
    pub alignment: f64,
}

pub fn guidance_scales() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.5).collect()
}

/// Fidelity and condition alignment over the guidance grid.
pub fn guidance_sweep(
    wb: &Workbench,
    model: DenoiserModel,
    cfg: &Config,
    scales: &[f64],
) -> Result<Vec<GuidancePoint>> {
    let n: usize = cfg.get("n_samples")?;
    let n_proj: usize = cfg.get("n_projections")?;
    let base = sampler_config(cfg)?;
    let source = single(model, "shared");
    let conds = wb.cycled_conditions(n);
    let eval_seed = wb.seed.wrapping_add(EVAL_SEED_OFFSET);
    let reference = wb.reference(&conds, eval_seed)?;
    let k = wb.data.n_conditions;
    scales
        .iter()
        .map(|&s| {
            let scfg = SamplerConfig {
                guidance_scale: s,
                ..base.clone()
            };
            let x = draw_samples(wb, &source, &conds, &scfg, wb.seed.wrapping_add(3))?;
            let mut sw = 0.0;
            for c in 0..k {
                let rows: Vec<usize> = (0..n).filter(|i| conds[*i] == c).collect();
                let pick = |t: &Tensor| -> Result<Tensor> {
                    Ok(Tensor::from_rows(
                        &rows.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>(),
                    )?)
                };
                let mut rng = ChaCha8Rng::seed_from_u64(eval_seed.wrapping_add(c as u64));
                sw += sliced_wasserstein(&pick(&x)?, &pick(&reference)?, n_proj, &mut rng)?;
            }
            let hits = (0..n)
                .map(|i| wb.data.classify(x.row(i)).map(|c| usize::from(c == conds[i])))
                .sum::<Result<usize>>()?;
            Ok(GuidancePoint {
                scale: s,
                sliced_w: sw / k as f64,
                alignment: hits as f64 / n as f64,
            })
        })
        .collect()
}

pub fn guidance_csv(points: &[GuidancePoint]) -> String {
    let mut s = String::from("guidance,sliced_wasserstein,alignment_rate\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.scale, p.sliced_w, p.alignment);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct PwwDemo {
    pub w_prime: f64,
    pub color: usize,
    pub painted_position: usize,
    pub baseline_fraction: f64,
    pub painted_fraction: f64,
    pub baseline: Tensor,
    pub painted: Tensor,
}

/// Paints the blob color of the prompt into the opposite corner.
pub fn pww_demo(wb: &Workbench, model: DenoiserModel, cfg: &Config) -> Result<PwwDemo> {
    if wb.data.kind != ToyKind::TinyImageLayout {
        return Err(invalid("pww_demo needs dataset=tiny_image"));
    }
    let color = cfg.get::<usize>("condition")? % PALETTE.len();
    let (prompt_pos, painted_pos) = (0, 3);
    let w_prime: f64 = cfg.get("w_prime")?;
    let n: usize = cfg.get("n_samples")?;
    let scfg = sampler_config(cfg)?;
    let conds = vec![image_condition(color, prompt_pos); n];
    let mask = position_mask(painted_pos)?;
    let color_token = wb.encoder.slot_offsets()[1];
    let pww = PwwInput {
        masks: vec![PhraseMask::new(mask.clone(), vec![0, color_token])?],
        cfg: PwwConfig::new(w_prime)?,
    };
    let model = Arc::new(model);
    let plain = SingleExpert {
        name: "plain".into(),
        denoiser: Arc::new(PreconditionedDenoiser::new(model.clone())),
    };
    let painted = SingleExpert {
        name: "painted".into(),
        denoiser: Arc::new(PreconditionedDenoiser {
            pww: Some(pww),
            ..PreconditionedDenoiser::new(model)
        }),
    };
    let seed = wb.seed.wrapping_add(4);
    let x_plain = draw_samples(wb, &plain, &conds, &scfg, seed)?;
    let x_paint = draw_samples(wb, &painted, &conds, &scfg, seed)?;
    let frac = |x: &Tensor| -> Result<f64> {
        let mut t = 0.0;
        for i in 0..n {
            t += color_fraction(x.row(i), &mask, color)?;
        }
        Ok(t / n as f64)
    };
    Ok(PwwDemo {
        w_prime,
        color,
        painted_position: painted_pos,
        baseline_fraction: frac(&x_plain)?,
        painted_fraction: frac(&x_paint)?,
        baseline: x_plain,
        painted: x_paint,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentOutput {
    pub files: Vec<PathBuf>,
    pub reports: Vec<MetricReport>,
}

fn write(out: &mut ExperimentOutput, dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, bytes)?;
    out.files.push(p);
    Ok(())
}

/// Runs a named experiment and writes its artifacts into `dir`.
pub fn run_experiment(name: &str, cfg: &Config, dir: &Path) -> Result<ExperimentOutput> {
    if !EXPERIMENTS.contains(&name) {
        return Err(Error::Config(format!(
            "unknown experiment `{name}` (expected one of {})",
            EXPERIMENTS.join(", ")
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut out = ExperimentOutput::default();
    match name {
        "branch_vs_baseline" => {
            let wb = Workbench::from_config(cfg)?;
            let cmp = branch_vs_baseline(&wb, cfg)?;
            write(&mut out, dir, "branch_vs_baseline.csv", cmp.to_csv())?;
            let sw = format!(
                "seed,model,sliced_wasserstein,n_samples\n{0},baseline,{1},{3}\n{0},ensemble,{2},{3}\n",
                cmp.seed, cmp.sw_baseline, cmp.sw_ensemble, cmp.n_samples
            );
            write(&mut out, dir, "branch_vs_baseline_sw.csv", sw)?;
            out.reports = cmp.reports();
        }
        "prompt_switch_curve" => {
            let wb = Workbench::from_config(cfg)?;
            let points = prompt_switch_curve(&wb, wb.model(cfg)?, cfg)?;
            write(&mut out, dir, "prompt_switch_curve.csv", switch_csv(&points))?;
        }
        "attention_probe" => {
            let wb = Workbench::from_config(cfg)?;
            let model = wb.model(cfg)?;
            let probes = attention_probe_grid(&wb, &model, &probe_sigmas(cfg)?, 256)?;
            write(&mut out, dir, "attention_probe.csv", probe_csv(&probes))?;
            let rows: Vec<Vec<f64>> = probes.iter().map(|p| p.token_mass.clone()).collect();
            write(&mut out, dir, "attention_probe.ppm", heatmap(&rows, 8)?.to_ppm())?;
        }
        "guidance_sweep" => {
            let wb = Workbench::from_config(cfg)?;
            let points = guidance_sweep(&wb, wb.model(cfg)?, cfg, &guidance_scales())?;
            write(&mut out, dir, "guidance_sweep.csv", guidance_csv(&points))?;
        }
        "pww_demo" => {
            let wb = Workbench::with_dataset(cfg, ToyDataset::tiny_image_layout())?;
            let demo = pww_demo(&wb, wb.model(cfg)?, cfg)?;
            let csv = format!(
                "w_prime,color,painted_position,baseline_fraction,painted_fraction\n{},{},{},{},{}\n",
                demo.w_prime, demo.color, demo.painted_position, demo.baseline_fraction, demo.painted_fraction
            );
            write(&mut out, dir, "pww_demo.csv", csv)?;
            let rows = |t: &Tensor| (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
            for (file, t) in [("pww_baseline.ppm", &demo.baseline), ("pww_painted.ppm", &demo.painted)] {
                let r = rows(t);
                let refs: Vec<&[f64]> = r.iter().map(Vec::as_slice).collect();
                write(&mut out, dir, file, image_grid(&refs, 8, 4)?.to_ppm())?;
            }
        }
        _ => unreachable!("checked above"),
    }
    if !out.reports.is_empty() {
        let mut s = format!("{}\n", MetricReport::CSV_HEADER);
        for r in &out.reports {
            let _ = writeln!(s, "{r}");
        }
        write(&mut out, dir, "metrics.csv", s)?;
    }
    Ok(out)
}

/// Fresh model for the configured dataset and spec (no training).
pub fn untrained_model(cfg: &Config) -> Result<DenoiserModel> {
    build_denoiser(&Workbench::from_config(cfg)?.spec)
}

/// The interval named by the `interval` key.
pub fn config_interval(cfg: &Config, law: &SigmaLaw) -> Result<IntervalSet> {
    IntervalSet::parse(law, cfg.str("interval"))
}
