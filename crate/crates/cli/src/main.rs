use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ediff::denoiser::Denoise;
use ediff::ensemble::{BranchSchedule, EnsembleRouter, ExpertSource, RoutedExperts, SingleExpert};
use ediff::harness::data::ToyKind;
use ediff::harness::experiments::{config_interval, draw_samples, run_experiment, sampler_config, Workbench};
use ediff::harness::images::image_grid;
use ediff::harness::metrics::{sliced_wasserstein, MetricName, MetricReport, ValidationSet};
use ediff::harness::{write_manifest, Config};
use ediff::nets::{load_checkpoint, PreconditionedDenoiser};

#[derive(Parser, Debug)]
#[command(
    name = "ediff",
    version,
    about = "Toy expert-ensemble diffusion: training, sampling and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one shared denoiser on the full noise law
    Train(RunArgs),
    /// Run a branch schedule and write every node's checkpoints
    Branch(RunArgs),
    /// Draw samples from a checkpoint or a router of checkpoints
    Sample(RunArgs),
    /// Record per-token attention mass over a noise-level grid
    Probe(RunArgs),
    /// Held-out loss on an interval and sliced-Wasserstein to the data
    Eval(RunArgs),
    /// Run a named experiment
    Experiment(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `key=value` or `--key value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Branch(_) => "branch",
            Command::Sample(_) => "sample",
            Command::Probe(_) => "probe",
            Command::Eval(_) => "eval",
            Command::Experiment(_) => "experiment",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Train(a)
            | Command::Branch(a)
            | Command::Sample(a)
            | Command::Probe(a)
            | Command::Eval(a)
            | Command::Experiment(a) => a,
        }
    }
}

fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        if let Some(flag) = tok.strip_prefix("--") {
            match flag.split_once('=') {
                Some((k, v)) => out.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().with_context(|| format!("missing value for --{flag}"))?;
                    out.push((flag.to_string(), v.clone()));
                }
            }
        } else if let Some((k, v)) = tok.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            bail!("expected key=value or --key value, got {tok:?}");
        }
    }
    Ok(out)
}

fn load_config(args: &RunArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for (k, v) in parse_overrides(&args.overrides)? {
        cfg.set(&k, &v)?;
    }
    Ok(cfg)
}

fn output_dir(cfg: &Config, command: &str) -> PathBuf {
    if let Some(out) = cfg.opt("out") {
        return PathBuf::from(out);
    }
    let root = std::env::var_os("EDIFF_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let leaf = match (command, cfg.opt("name")) {
        ("experiment", Some(name)) => format!("{name}-seed{}", cfg.str("seed")),
        _ => format!("{command}-seed{}", cfg.str("seed")),
    };
    root.join(leaf)
}

/// The configured checkpoint, or a router over checkpoints in `ckpt_dir`.
fn expert_source(cfg: &Config, wb: &Workbench) -> Result<Box<dyn ExpertSource>> {
    if let Some(router_path) = cfg.opt("router") {
        let text = std::fs::read_to_string(router_path).with_context(|| format!("reading router {router_path}"))?;
        let router = EnsembleRouter::parse(wb.law, &text)?;
        let dir = PathBuf::from(cfg.opt("ckpt_dir").unwrap_or("."));
        let mut experts: BTreeMap<String, Arc<dyn Denoise>> = BTreeMap::new();
        for name in router.model_refs() {
            let model = load_checkpoint(&dir.join(&name))?;
            experts.insert(name, Arc::new(PreconditionedDenoiser::new(Arc::new(model))));
        }
        return Ok(Box::new(RoutedExperts::new(router, experts)?));
    }
    let Some(ckpt) = cfg.opt("ckpt") else {
        return Err(ediff::Error::Config("set `ckpt` or `router`".into()).into());
    };
    let model = load_checkpoint(Path::new(ckpt))?;
    Ok(Box::new(SingleExpert {
        name: ckpt.to_string(),
        denoiser: Arc::new(PreconditionedDenoiser::new(Arc::new(model))),
    }))
}

fn write_rows_csv(path: &Path, conditions: &[usize], x: &ediff::engine::Tensor) -> Result<()> {
    let d = x.shape()[1];
    let mut s = String::from("condition");
    for j in 0..d {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for (i, c) in conditions.iter().enumerate() {
        let _ = write!(s, "{c}");
        for v in x.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

const CONFIG_D: [(&str, &str); 3] = [("9,511", "9,511"), ("~9,511,~3,0", "~9,511,~4,0"), ("3,0", "3,0")];

fn run(command: &Command, cfg: &Config, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    match command {
        Command::Train(_) => {
            let wb = Workbench::from_config(cfg)?;
            let schedule = BranchSchedule::parse(&format!("node=0,0 init=fresh iters={}", cfg.str("iters")))?;
            wb.train(&schedule, "train")?.save(dir)?;
        }
        Command::Branch(_) => {
            let wb = Workbench::from_config(cfg)?;
            let schedule = match cfg.str("schedule") {
                "toy" => BranchSchedule::toy(),
                path => BranchSchedule::parse(
                    &std::fs::read_to_string(path).with_context(|| format!("reading schedule {path}"))?,
                )?,
            };
            let reg = wb.train(&schedule, "branch")?;
            reg.save(dir)?;
            if CONFIG_D.iter().all(|(_, node)| reg.ema.contains_key(*node)) {
                let mut router = EnsembleRouter::new(wb.law);
                for (expr, node) in CONFIG_D {
                    router.push(expr, &format!("{node}.ema.ckpt"))?;
                }
                let violations = router.validate_partition();
                if !violations.is_empty() {
                    bail!("assembled router is not a partition: {violations:?}");
                }
                std::fs::write(dir.join("router.txt"), router.to_string())?;
            }
        }
        Command::Sample(_) => {
            let wb = Workbench::from_config(cfg)?;
            let source = expert_source(cfg, &wb)?;
            let n: usize = cfg.get("n_samples")?;
            let condition: usize = cfg.get("condition")?;
            let conds = vec![condition; n];
            let x = draw_samples(&wb, source.as_ref(), &conds, &sampler_config(cfg)?, cfg.get("seed")?)?;
            write_rows_csv(&dir.join("samples.csv"), &conds, &x)?;
            if wb.data.kind == ToyKind::TinyImageLayout {
                let rows: Vec<&[f64]> = (0..n.min(64)).map(|i| x.row(i)).collect();
                image_grid(&rows, 8, 4)?.write(&dir.join("samples.ppm"))?;
            }
        }
        Command::Probe(_) => {
            run_experiment("attention_probe", cfg, dir)?;
        }
        Command::Eval(_) => {
            let wb = Workbench::from_config(cfg)?;
            let source = expert_source(cfg, &wb)?;
            let seed: u64 = cfg.get("seed")?;
            let n_eval: usize = cfg.get("n_eval")?;
            let interval = config_interval(cfg, &wb.law)?;
            let set = ValidationSet::draw(&wb.data, &wb.law, &interval, n_eval, seed)?;
            // rows grouped by the expert that owns their noise level
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, &s) in set.sigmas.iter().enumerate() {
                groups.entry(source.select(s)?.0.to_string()).or_default().push(i);
            }
            let mut loss = 0.0;
            for rows in groups.values() {
                let pick = |t: &ediff::engine::Tensor| -> Result<ediff::engine::Tensor> {
                    Ok(ediff::engine::Tensor::from_rows(
                        &rows.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>(),
                    )?)
                };
                let sub = ValidationSet {
                    x_clean: pick(&set.x_clean)?,
                    conditions: rows.iter().map(|&i| set.conditions[i]).collect(),
                    sigmas: rows.iter().map(|&i| set.sigmas[i]).collect(),
                    eps: pick(&set.eps)?,
                };
                let (_, den) = source.select(sub.sigmas[0])?;
                let ctx = wb.encoder.conditional_batch(&sub.conditions)?;
                loss += sub.loss(den, &ctx, &wb.pc)? * rows.len() as f64;
            }
            let n: usize = cfg.get("n_samples")?;
            let conds = wb.cycled_conditions(n);
            let x = draw_samples(&wb, source.as_ref(), &conds, &sampler_config(cfg)?, seed)?;
            let reference = wb.reference(&conds, seed.wrapping_add(1))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sw = sliced_wasserstein(&x, &reference, cfg.get("n_projections")?, &mut rng)?;
            let reports = [
                MetricReport {
                    name: MetricName::PerIntervalLoss,
                    value: loss / n_eval as f64,
                    n_samples: n_eval,
                    seed,
                },
                MetricReport {
                    name: MetricName::SlicedWasserstein,
                    value: sw,
                    n_samples: n,
                    seed,
                },
            ];
            let mut s = format!("{}\n", MetricReport::CSV_HEADER);
            for r in &reports {
                let _ = writeln!(s, "{r}");
            }
            std::fs::write(dir.join("metrics.csv"), s)?;
        }
        Command::Experiment(_) => {
            let name = cfg
                .opt("name")
                .ok_or_else(|| ediff::Error::Config("experiment needs `name`".into()))?;
            run_experiment(name, cfg, dir)?;
        }
    }
    Ok(())
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<ediff::Error>(),
            Some(ediff::Error::Config(_) | ediff::Error::Parse { .. } | ediff::Error::InvalidArgument(_))
        )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(cli.command.args()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let dir = output_dir(&cfg, cli.command.name());
    let start = Instant::now();
    let result = run(&cli.command, &cfg, &dir).and_then(|()| {
        Ok(write_manifest(
            &dir,
            cli.command.name(),
            &cfg,
            start.elapsed().as_secs_f64(),
        )?)
    });
    match result {
        Ok(()) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
