use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use polyvit::checkpoint::Checkpoint;
use polyvit::config::RunConfig;
use polyvit::data::{Splits, SyntheticTask};
use polyvit::model::{HeadInit, LossKind, PolyViT, TaskSpec};
use polyvit::schedule::ScheduleKind;
use polyvit::tensor::{DType, Element};
use polyvit::tokenizer::{Geometry, Modality};
use polyvit::trainer::{cotrain, evaluate, linear_probe, EvalRecord, OptimizerState, ProbeConfig};
use polyvit::transfer::InflateStrategy;

/// Co-train one transformer across image, video and audio tasks.
#[derive(Parser)]
#[command(name = "polyvit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic data following a config file.
    Train(TrainArgs),
    /// Fit a fresh linear head on frozen features.
    Probe(ProbeArgs),
    /// Evaluate a checkpoint on one task split.
    Eval(EvalArgs),
    /// Write the task-sampling schedule of a config.
    Schedule(ScheduleArgs),
    /// Print the parameter breakdown of a config or preset.
    Params(ParamsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training, schedule and init seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    /// Checkpoint path (overrides `train.out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step log path (overrides `train.log`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A task of the checkpoint's config, or a new task name together with
    /// --modality and --classes.
    #[arg(long)]
    task: String,
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long)]
    classes: Option<usize>,
    /// Input extents of the probe data, e.g. 4x8x8x3.
    #[arg(long)]
    input: Option<String>,
    /// Patch extents of the probe data, e.g. 2x4x4.
    #[arg(long)]
    patch: Option<String>,
    /// Convert an existing tokenizer when the checkpoint has none for this
    /// input. Bare `--convert` replicates 2D kernels across frames; pass
    /// central_frame or replicate_scaled to override.
    #[arg(long, num_args = 0..=1, default_missing_value = "default")]
    convert: Option<String>,
    #[arg(long, default_value_t = 200)]
    steps: u64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Task name or index.
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    kind: Option<ScheduleKind>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Probe(a) => probe(a),
        Command::Eval(a) => eval(a),
        Command::Schedule(a) => schedule(a),
        Command::Params(a) => params(a),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn synthetic_splits(config: &RunConfig) -> Result<Vec<Splits>> {
    (0..config.tasks.len())
        .map(|j| config.synthetic(j).generate().map_err(Into::into))
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
        config.schedule_seed = seed;
        config.init.seed = seed;
    }
    if let Some(kind) = a.schedule {
        config.schedule_kind = kind;
    }
    if a.out.is_some() {
        config.out = a.out;
    }
    if a.log.is_some() {
        config.log = a.log;
    }
    match config.precision {
        DType::F32 => train_with::<f32>(&config),
        DType::F64 => train_with::<f64>(&config),
    }
}

fn train_with<T: Element>(config: &RunConfig) -> Result<()> {
    let mut model: PolyViT<T> = config.build_model()?;
    let plan = config.plan(None)?;
    let splits = synthetic_splits(config)?;
    let train: Vec<_> = splits.iter().map(|s| &s.train).collect();
    let mut state = OptimizerState::new(config.train.momentum, model.tasks.len());
    let mut hook = |m: &PolyViT<T>, step: u64| -> polyvit::Result<Vec<EvalRecord>> {
        let mut out = Vec::new();
        for (j, s) in splits.iter().enumerate() {
            let (metric, value) = evaluate(m, j, &s.val)?;
            let r = EvalRecord {
                step,
                task: j,
                split: "val".into(),
                metric,
                value,
            };
            println!("{r}");
            out.push(r);
        }
        Ok(out)
    };
    let log = cotrain(&mut model, &plan, &train, &config.train, &mut state, &mut hook)?;
    for (j, t) in config.tasks.iter().enumerate() {
        let (metric, value) = evaluate(&model, j, &splits[j].test)?;
        println!("final task={} split=test {metric}={value}", t.spec.name);
    }
    if let Some(path) = &config.log {
        let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write!(f, "{log}")?;
    }
    if let Some(path) = &config.out {
        Checkpoint::from_model(config, &model, Some(&state))?.save(path)?;
        println!("checkpoint {}", path.display());
    }
    Ok(())
}

fn parse_extents(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad extents `{s}`")))
        .collect()
}

fn probe(a: ProbeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    match ck.config()?.precision {
        DType::F32 => probe_with::<f32>(&ck, &a),
        DType::F64 => probe_with::<f64>(&ck, &a),
    }
}

fn probe_with<T: Element>(ck: &Checkpoint, a: &ProbeArgs) -> Result<()> {
    let (config, model, _) = ck.to_model::<T>()?;
    let (mut spec, geometry, noise, data_seed) = match config.task_index(&a.task) {
        Some(j) => {
            let s = config.synthetic(j);
            (config.tasks[j].spec.clone(), s.geometry, s.noise, s.seed)
        }
        None => {
            let (Some(modality), Some(classes)) = (a.modality, a.classes) else {
                bail!("task `{}` is not in the checkpoint; pass --modality and --classes", a.task);
            };
            let geometry = match (&a.input, &a.patch) {
                (Some(i), Some(p)) => Geometry::new(modality, parse_extents(i)?, parse_extents(p)?)?,
                (None, None) => match model.tokenizers.get(&modality) {
                    Some(t) => t.geometry.clone(),
                    None => bail!("the checkpoint has no {modality} tokenizer; pass --input and --patch"),
                },
                _ => bail!("--input and --patch go together"),
            };
            let mut spec = TaskSpec::new(a.task.clone(), modality, classes);
            spec.loss = LossKind::Softmax;
            (spec, geometry, a.noise, a.seed + 1)
        }
    };
    spec.steps = a.steps;
    spec.lr = a.lr;
    spec.warmup = 0;
    spec.head_init = HeadInit::Zeros;
    spec.mixup_alpha = 0.0;
    let convert = match a.convert.as_deref() {
        None => None,
        Some("default") => Some((geometry.clone(), InflateStrategy::Replicate)),
        Some(s) => Some((geometry.clone(), s.parse::<InflateStrategy>()?)),
    };
    let mut synth = SyntheticTask::new(geometry, spec.classes, data_seed);
    synth.noise = noise;
    synth.multilabel = spec.loss.is_multilabel();
    let splits = synth.generate()?;
    let probe_config = ProbeConfig {
        seed: a.seed,
        convert,
        ..ProbeConfig::default()
    };
    let r = linear_probe(&model, &spec, &splits.train, Some(&splits.test), &probe_config)?;
    println!(
        "probe task={} {}: train={} test={}",
        spec.name,
        r.metric,
        r.train_metric,
        r.eval_metric.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    match ck.config()?.precision {
        DType::F32 => eval_with::<f32>(&ck, &a),
        DType::F64 => eval_with::<f64>(&ck, &a),
    }
}

fn eval_with<T: Element>(ck: &Checkpoint, a: &EvalArgs) -> Result<()> {
    let (config, model, _) = ck.to_model::<T>()?;
    let j = match config.task_index(&a.task) {
        Some(j) => j,
        None => match a.task.parse::<usize>() {
            Ok(j) if j < config.tasks.len() => j,
            _ => bail!("no task `{}` (known: {})", a.task, config.task_names().join(", ")),
        },
    };
    let splits = config.synthetic(j).generate()?;
    let (metric, value) = evaluate(&model, j, splits.get(&a.split)?)?;
    println!("eval task={} split={} {metric}={value}", config.tasks[j].spec.name, a.split);
    Ok(())
}

fn schedule(a: ScheduleArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let plan = config.plan(a.kind)?;
    fs::write(&a.dump, plan.dump(&config.task_names())).with_context(|| format!("writing {}", a.dump.display()))?;
    let stats = plan.stats();
    println!("kind = {}", plan.kind);
    println!("length = {}", stats.len);
    println!("longest_run = {}", stats.longest_run);
    for (t, c) in config.task_names().iter().zip(&stats.counts) {
        println!("count.{t} = {c} ({:.4}%)", 100.0 * *c as f64 / stats.len.max(1) as f64);
    }
    Ok(())
}

fn params(a: ParamsArgs) -> Result<()> {
    let config = match (&a.config, &a.preset) {
        (Some(p), _) => load_config(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => unreachable!("clap requires one of the two"),
    };
    println!("{}", config.param_breakdown());
    Ok(())
}
