//! Run configuration: `key = value` text with dotted keys and `#` comments.
//!
//! ```text
//! preset = toy3            # optional, applied first
//! model.layers = 2
//! modality.image.input = 8x8x3
//! modality.image.patch = 4x4
//! task.shapes.modality = image
//! task.shapes.classes = 4
//! schedule.kind = weighted
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SyntheticTask;
use crate::error::{Error, Result};
use crate::model::{HeadInit, LossKind, ModelConfig, ParamBreakdown, PolyViT, TaskSpec};
use crate::schedule::{ScheduleKind, SchedulePlan};
use crate::tensor::{DType, Element};
use crate::tokenizer::{Geometry, Modality};
use crate::trainer::{TrainConfig, WarmupCounter};
use crate::transfer::{init_polyvit, InflateStrategy, PretrainedViT};

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityConfig {
    pub geometry: Geometry,
    /// Residual-branch drop probability (stochastic depth).
    pub drop_path: f64,
    /// Minibatch size for tasks of this modality; falls back to
    /// `optim.batch_size`.
    pub batch: Option<usize>,
}

/// Synthetic data standing in for a task's dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub spec: TaskSpec,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitSource {
    Scratch,
    /// A synthetic pretrained image ViT, converted per modality.
    Pretrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub source: InitSource,
    pub inflate: InflateStrategy,
    /// Geometry of the pretrained image model; defaults to the image
    /// modality's geometry.
    pub pretrained: Option<Geometry>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub precision: DType,
    pub modalities: Vec<ModalityConfig>,
    pub tasks: Vec<TaskConfig>,
    pub schedule_kind: ScheduleKind,
    pub schedule_seed: u64,
    /// Explicit task order for the task-by-task schedule.
    pub schedule_order: Option<Vec<String>>,
    pub train: TrainConfig,
    pub init: InitConfig,
    /// Checkpoint written at the end of `train`.
    pub out: Option<PathBuf>,
    /// Per-step training log.
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                layers: 2,
                width: 16,
                heads: 2,
                mlp_dim: 64,
                adapt_layers: 0,
            },
            precision: DType::F32,
            modalities: Vec::new(),
            tasks: Vec::new(),
            schedule_kind: ScheduleKind::Weighted,
            schedule_seed: 0,
            schedule_order: None,
            train: TrainConfig::default(),
            init: InitConfig {
                source: InitSource::Scratch,
                inflate: InflateStrategy::CentralFrame,
                pretrained: None,
                seed: 0,
            },
            out: None,
            log: None,
        }
    }
}

pub const PRESETS: [&str; 2] = ["base9", "toy3"];

/// ViT-Base with nine image, video and audio tasks at full input size.
const BASE9: &str = "
model.layers = 12
model.width = 768
model.heads = 12
model.mlp_dim = 3072
model.adapt_layers = 0
modality.image.input = 384x384x3
modality.image.patch = 16x16
modality.image.batch = 512
modality.video.input = 32x224x224x3
modality.video.patch = 4x16x16
modality.video.batch = 64
modality.audio.input = 800x128x1
modality.audio.patch = 16x16
modality.audio.batch = 64
modality.audio.drop_path = 0.3
task.C100.modality = image
task.C100.classes = 100
task.C100.steps = 10000
task.C100.lr = 0.03
task.C100.warmup = 500
task.C100.head_init = lecun_normal
task.C10.modality = image
task.C10.classes = 10
task.C10.steps = 10000
task.C10.lr = 0.03
task.C10.warmup = 500
task.C10.head_init = lecun_normal
task.Pets.modality = image
task.Pets.classes = 37
task.Pets.steps = 500
task.Pets.lr = 0.03
task.Pets.warmup = 100
task.Pets.head_init = lecun_normal
task.R45.modality = image
task.R45.classes = 45
task.R45.steps = 2500
task.R45.lr = 0.1
task.R45.warmup = 200
task.R45.head_init = lecun_normal
task.Im1K.modality = image
task.Im1K.classes = 1000
task.Im1K.steps = 20000
task.Im1K.lr = 0.03
task.Im1K.warmup = 500
task.Im1K.head_init = lecun_normal
task.K400.modality = video
task.K400.classes = 400
task.K400.steps = 100700
task.K400.lr = 0.1
task.K400.warmup = 8392
task.K400.head_init = zeros
task.MiT.modality = video
task.MiT.classes = 339
task.MiT.steps = 123600
task.MiT.lr = 0.25
task.MiT.warmup = 30900
task.MiT.head_init = zeros
task.MiniAS.modality = audio
task.MiniAS.classes = 527
task.MiniAS.loss = sigmoid
task.MiniAS.steps = 15900
task.MiniAS.lr = 0.5
task.MiniAS.warmup = 795
task.MiniAS.head_init = zeros
task.MiniAS.mixup = 0.3
task.VGG.modality = audio
task.VGG.classes = 309
task.VGG.steps = 135000
task.VGG.lr = 0.5
task.VGG.warmup = 6750
task.VGG.head_init = zeros
task.VGG.mixup = 0.3
schedule.kind = weighted
schedule.order = C100,MiT,K400,MiniAS,VGG,Pets,C10,Im1K,R45
optim.momentum = 0.9
";

/// A desk-scale model with one small synthetic task per modality.
const TOY3: &str = "
model.layers = 3
model.width = 6
model.heads = 2
model.mlp_dim = 12
model.adapt_layers = 0
modality.image.input = 8x8x3
modality.image.patch = 4x4
modality.video.input = 4x8x8x3
modality.video.patch = 2x4x4
modality.audio.input = 16x8x1
modality.audio.patch = 4x4
modality.audio.drop_path = 0.3
task.image4.modality = image
task.image4.classes = 4
task.image4.steps = 600
task.image4.lr = 0.025
task.image4.warmup = 20
task.image4.head_init = lecun_normal
task.video4.modality = video
task.video4.classes = 4
task.video4.steps = 600
task.video4.lr = 0.025
task.video4.warmup = 20
task.video4.head_init = lecun_normal
task.audio4.modality = audio
task.audio4.classes = 4
task.audio4.steps = 600
task.audio4.lr = 0.025
task.audio4.warmup = 20
task.audio4.head_init = lecun_normal
task.audio4.mixup = 0.3
schedule.kind = weighted
schedule.order = image4,video4,audio4
optim.batch_size = 8
";

fn preset_text(name: &str) -> Option<&'static str> {
    match name {
        "base9" => Some(BASE9),
        "toy3" => Some(TOY3),
        _ => None,
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("invalid value `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_extents(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split('x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::config(key, format!("expected extents like 16x16, got `{value}`")))
        })
        .collect()
}

fn fmt_extents(e: &[usize]) -> String {
    e.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn wrap<V>(key: &str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(key, other.to_string()),
    })
}

#[derive(Default)]
struct ModalityDraft {
    input: Option<Vec<usize>>,
    patch: Option<Vec<usize>>,
    allow_crop: bool,
    drop_path: f64,
    batch: Option<usize>,
}

struct TaskDraft {
    name: String,
    modality: Option<Modality>,
    classes: Option<usize>,
    loss: LossKind,
    steps: u64,
    lr: f64,
    warmup: u64,
    head_init: HeadInit,
    mixup: f64,
    data: DataConfig,
}

impl TaskDraft {
    fn new(name: &str, index: usize) -> Self {
        Self {
            name: name.to_string(),
            modality: None,
            classes: None,
            loss: LossKind::Softmax,
            steps: 1,
            lr: 0.03,
            warmup: 0,
            head_init: HeadInit::Zeros,
            mixup: 0.0,
            data: DataConfig {
                noise: 0.5,
                train: 128,
                val: 64,
                test: 64,
                seed: index as u64 + 1,
            },
        }
    }
}

#[derive(Default)]
struct Draft {
    model: BTreeMap<&'static str, usize>,
    precision: Option<DType>,
    modalities: BTreeMap<Modality, ModalityDraft>,
    tasks: Vec<TaskDraft>,
    schedule_kind: Option<ScheduleKind>,
    schedule_seed: Option<u64>,
    schedule_order: Option<Vec<String>>,
    train: TrainConfig,
    init_source: Option<InitSource>,
    inflate: Option<InflateStrategy>,
    pretrained_input: Option<Vec<usize>>,
    pretrained_patch: Option<Vec<usize>>,
    init_seed: Option<u64>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
}

impl Draft {
    fn task(&mut self, name: &str) -> &mut TaskDraft {
        if let Some(i) = self.tasks.iter().position(|t| t.name == name) {
            return &mut self.tasks[i];
        }
        let i = self.tasks.len();
        self.tasks.push(TaskDraft::new(name, i));
        &mut self.tasks[i]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["model", field] => {
                let f = match *field {
                    "layers" => "layers",
                    "width" => "width",
                    "heads" => "heads",
                    "mlp_dim" => "mlp_dim",
                    "adapt_layers" => "adapt_layers",
                    "precision" => {
                        self.precision = Some(match value {
                            "f32" => DType::F32,
                            "f64" => DType::F64,
                            _ => return Err(Error::config(key, format!("expected f32 or f64, got `{value}`"))),
                        });
                        return Ok(());
                    }
                    _ => return Err(Error::config(key, "unknown key")),
                };
                self.model.insert(f, parse_value(key, value)?);
            }
            ["modality", m, field] => {
                let m: Modality = wrap(key, m.parse())?;
                let d = self.modalities.entry(m).or_default();
                match *field {
                    "input" => d.input = Some(parse_extents(key, value)?),
                    "patch" => d.patch = Some(parse_extents(key, value)?),
                    "allow_crop" => d.allow_crop = parse_bool(key, value)?,
                    "drop_path" => {
                        let p: f64 = parse_value(key, value)?;
                        if !(0.0..1.0).contains(&p) {
                            return Err(Error::config(key, "drop probability must lie in [0, 1)"));
                        }
                        d.drop_path = p;
                    }
                    "batch" => d.batch = Some(parse_value(key, value)?),
                    _ => return Err(Error::config(key, "unknown key")),
                }
            }
            ["task", name, rest @ ..] => {
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    return Err(Error::config(key, "task names use letters, digits, `_` and `-`"));
                }
                let t = self.task(name);
                match rest {
                    ["modality"] => t.modality = Some(wrap(key, value.parse())?),
                    ["classes"] => t.classes = Some(parse_value(key, value)?),
                    ["loss"] => t.loss = wrap(key, value.parse())?,
                    ["steps"] => t.steps = parse_value(key, value)?,
                    ["lr"] => t.lr = parse_value(key, value)?,
                    ["warmup"] => t.warmup = parse_value(key, value)?,
                    ["head_init"] => t.head_init = wrap(key, value.parse())?,
                    ["mixup"] => t.mixup = parse_value(key, value)?,
                    ["data", "noise"] => t.data.noise = parse_value(key, value)?,
                    ["data", "train"] => t.data.train = parse_value(key, value)?,
                    ["data", "val"] => t.data.val = parse_value(key, value)?,
                    ["data", "test"] => t.data.test = parse_value(key, value)?,
                    ["data", "seed"] => t.data.seed = parse_value(key, value)?,
                    _ => return Err(Error::config(key, "unknown key")),
                }
            }
            ["schedule", "kind"] => self.schedule_kind = Some(wrap(key, value.parse())?),
            ["schedule", "seed"] => self.schedule_seed = Some(parse_value(key, value)?),
            ["schedule", "order"] => {
                self.schedule_order = Some(value.split(',').map(|s| s.trim().to_string()).collect())
            }
            ["optim", "momentum"] => self.train.momentum = parse_value(key, value)?,
            ["optim", "batch_size"] => self.train.batch_size = parse_value(key, value)?,
            ["optim", "warmup_counter"] => self.train.warmup_counter = wrap(key, value.parse::<WarmupCounter>())?,
            ["optim", "cosine"] => self.train.cosine_decay = parse_bool(key, value)?,
            ["train", "seed"] => self.train.seed = parse_value(key, value)?,
            ["train", "eval_every"] => self.train.eval_every = parse_value(key, value)?,
            ["train", "out"] => self.out = Some(PathBuf::from(value)),
            ["train", "log"] => self.log = Some(PathBuf::from(value)),
            ["init", "from"] => {
                self.init_source = Some(match value {
                    "scratch" => InitSource::Scratch,
                    "pretrained" => InitSource::Pretrained,
                    _ => return Err(Error::config(key, format!("expected scratch or pretrained, got `{value}`"))),
                })
            }
            ["init", "inflate"] => self.inflate = Some(wrap(key, value.parse())?),
            ["init", "pretrained_input"] => self.pretrained_input = Some(parse_extents(key, value)?),
            ["init", "pretrained_patch"] => self.pretrained_patch = Some(parse_extents(key, value)?),
            ["init", "seed"] => self.init_seed = Some(parse_value(key, value)?),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn finish(self) -> Result<RunConfig> {
        let width = self.model.get("width").copied().unwrap_or(16);
        let model = ModelConfig {
            layers: self.model.get("layers").copied().unwrap_or(2),
            width,
            heads: self.model.get("heads").copied().unwrap_or(2),
            mlp_dim: self.model.get("mlp_dim").copied().unwrap_or(4 * width),
            adapt_layers: self.model.get("adapt_layers").copied().unwrap_or(0),
        };
        wrap("model", model.validate())?;

        let mut modalities = Vec::new();
        for (m, d) in self.modalities {
            let key = format!("modality.{m}");
            let input = d
                .input
                .ok_or_else(|| Error::config(format!("{key}.input"), "missing"))?;
            let patch = d
                .patch
                .ok_or_else(|| Error::config(format!("{key}.patch"), "missing"))?;
            let geometry = Geometry {
                modality: m,
                input,
                patch,
                allow_crop: d.allow_crop,
            };
            wrap(&format!("{key}.input"), geometry.validate())?;
            if d.batch == Some(0) {
                return Err(Error::config(format!("{key}.batch"), "must be positive"));
            }
            modalities.push(ModalityConfig {
                geometry,
                drop_path: d.drop_path,
                batch: d.batch,
            });
        }

        let mut tasks = Vec::new();
        for t in self.tasks {
            let key = format!("task.{}", t.name);
            let modality = t
                .modality
                .ok_or_else(|| Error::config(format!("{key}.modality"), "missing"))?;
            let geometry = modalities
                .iter()
                .find(|m| m.geometry.modality == modality)
                .map(|m| m.geometry.clone())
                .ok_or_else(|| {
                    Error::config(format!("{key}.modality"), format!("no modality.{modality} section"))
                })?;
            let classes = t
                .classes
                .ok_or_else(|| Error::config(format!("{key}.classes"), "missing"))?;
            let spec = TaskSpec {
                name: t.name.clone(),
                modality,
                classes,
                loss: t.loss,
                steps: t.steps,
                lr: t.lr,
                warmup: t.warmup,
                head_init: t.head_init,
                mixup_alpha: t.mixup,
            };
            wrap(&key, spec.validate())?;
            if t.data.train == 0 || t.data.val == 0 || t.data.test == 0 {
                return Err(Error::config(format!("{key}.data"), "split sizes must be positive"));
            }
            if !(t.data.noise.is_finite() && t.data.noise >= 0.0) {
                return Err(Error::config(format!("{key}.data.noise"), "must be a non-negative number"));
            }
            if classes > geometry.input.iter().product::<usize>() {
                return Err(Error::config(
                    format!("{key}.classes"),
                    "more classes than input values; synthetic templates cannot be orthogonal",
                ));
            }
            tasks.push(TaskConfig { spec, data: t.data });
        }
        if tasks.is_empty() {
            return Err(Error::config("task", "no tasks defined"));
        }
        let used: BTreeSet<Modality> = tasks.iter().map(|t| t.spec.modality).collect();
        if let Some(m) = modalities.iter().find(|m| !used.contains(&m.geometry.modality)) {
            return Err(Error::config(
                format!("modality.{}", m.geometry.modality),
                "no task uses this modality",
            ));
        }

        if let Some(order) = &self.schedule_order {
            let names: BTreeSet<&str> = tasks.iter().map(|t| t.spec.name.as_str()).collect();
            let given: BTreeSet<&str> = order.iter().map(String::as_str).collect();
            if given != names || order.len() != names.len() {
                return Err(Error::config("schedule.order", "must list every task exactly once"));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::config("optim.momentum", "must lie in [0, 1)"));
        }

        let mut train = self.train;
        if modalities.iter().any(|m| m.batch.is_some()) {
            train.task_batches = tasks
                .iter()
                .map(|t| {
                    modalities
                        .iter()
                        .find(|m| m.geometry.modality == t.spec.modality)
                        .and_then(|m| m.batch)
                        .unwrap_or(train.batch_size)
                })
                .collect();
        }

        let source = self.init_source.unwrap_or(InitSource::Scratch);
        let pretrained = match (self.pretrained_input, self.pretrained_patch) {
            (Some(input), Some(patch)) => Some(wrap("init.pretrained_input", Geometry::new(Modality::Image, input, patch))?),
            (None, None) => None,
            _ => {
                return Err(Error::config(
                    "init.pretrained_input",
                    "pretrained_input and pretrained_patch go together",
                ))
            }
        };
        if source == InitSource::Pretrained
            && pretrained.is_none()
            && !modalities.iter().any(|m| m.geometry.modality == Modality::Image)
        {
            return Err(Error::config("init.pretrained_input", "needed when there is no image modality"));
        }

        Ok(RunConfig {
            model,
            precision: self.precision.unwrap_or(DType::F32),
            modalities,
            tasks,
            schedule_kind: self.schedule_kind.unwrap_or(ScheduleKind::Weighted),
            schedule_seed: self.schedule_seed.unwrap_or(train.seed),
            schedule_order: self.schedule_order,
            init: InitConfig {
                source,
                inflate: self.inflate.unwrap_or(InflateStrategy::CentralFrame),
                pretrained,
                seed: self.init_seed.unwrap_or(train.seed),
            },
            train,
            out: self.out,
            log: self.log,
        })
    }
}

fn feed(draft: &mut Draft, text: &str, allow_preset: bool) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
        if key.is_empty() || value.is_empty() {
            return Err(Error::config(
                if key.is_empty() { format!("line {}", n + 1) } else { key.to_string() },
                "empty key or value",
            ));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::config(key, "given more than once"));
        }
        if key == "preset" {
            if !allow_preset {
                return Err(Error::config(key, "presets cannot be nested"));
            }
            continue;
        }
        draft.set(key, value)?;
    }
    Ok(())
}

impl RunConfig {
    /// Parses configuration text; a `preset` line applies that preset first
    /// and the remaining keys override it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut draft = Draft::default();
        let preset = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == "preset")
            .map(|(_, v)| v.trim().to_string());
        if let Some(name) = preset {
            let body = preset_text(&name)
                .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}` (known: {})", PRESETS.join(", "))))?;
            feed(&mut draft, body, false)?;
        }
        feed(&mut draft, text, true)?;
        draft.finish()
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::parse(&format!("preset = {name}\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "model.layers = {}", m.layers);
        let _ = writeln!(s, "model.width = {}", m.width);
        let _ = writeln!(s, "model.heads = {}", m.heads);
        let _ = writeln!(s, "model.mlp_dim = {}", m.mlp_dim);
        let _ = writeln!(s, "model.adapt_layers = {}", m.adapt_layers);
        let _ = writeln!(s, "model.precision = {}", self.precision.name());
        for mc in &self.modalities {
            let g = &mc.geometry;
            let p = format!("modality.{}", g.modality);
            let _ = writeln!(s, "{p}.input = {}", fmt_extents(&g.input));
            let _ = writeln!(s, "{p}.patch = {}", fmt_extents(&g.patch));
            let _ = writeln!(s, "{p}.allow_crop = {}", g.allow_crop);
            let _ = writeln!(s, "{p}.drop_path = {}", mc.drop_path);
            if let Some(b) = mc.batch {
                let _ = writeln!(s, "{p}.batch = {b}");
            }
        }
        for t in &self.tasks {
            let (sp, d) = (&t.spec, &t.data);
            let p = format!("task.{}", sp.name);
            let _ = writeln!(s, "{p}.modality = {}", sp.modality);
            let _ = writeln!(s, "{p}.classes = {}", sp.classes);
            let _ = writeln!(s, "{p}.loss = {}", sp.loss.name());
            let _ = writeln!(s, "{p}.steps = {}", sp.steps);
            let _ = writeln!(s, "{p}.lr = {}", sp.lr);
            let _ = writeln!(s, "{p}.warmup = {}", sp.warmup);
            let _ = writeln!(s, "{p}.head_init = {}", sp.head_init.name());
            let _ = writeln!(s, "{p}.mixup = {}", sp.mixup_alpha);
            let _ = writeln!(s, "{p}.data.noise = {}", d.noise);
            let _ = writeln!(s, "{p}.data.train = {}", d.train);
            let _ = writeln!(s, "{p}.data.val = {}", d.val);
            let _ = writeln!(s, "{p}.data.test = {}", d.test);
            let _ = writeln!(s, "{p}.data.seed = {}", d.seed);
        }
        let _ = writeln!(s, "schedule.kind = {}", self.schedule_kind);
        let _ = writeln!(s, "schedule.seed = {}", self.schedule_seed);
        if let Some(order) = &self.schedule_order {
            let _ = writeln!(s, "schedule.order = {}", order.join(","));
        }
        let t = &self.train;
        let _ = writeln!(s, "optim.momentum = {}", t.momentum);
        let _ = writeln!(s, "optim.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "optim.warmup_counter = {}", t.warmup_counter.name());
        let _ = writeln!(s, "optim.cosine = {}", t.cosine_decay);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.eval_every = {}", t.eval_every);
        if let Some(p) = &self.out {
            let _ = writeln!(s, "train.out = {}", p.display());
        }
        if let Some(p) = &self.log {
            let _ = writeln!(s, "train.log = {}", p.display());
        }
        let i = &self.init;
        let _ = writeln!(
            s,
            "init.from = {}",
            match i.source {
                InitSource::Scratch => "scratch",
                InitSource::Pretrained => "pretrained",
            }
        );
        let _ = writeln!(s, "init.inflate = {}", i.inflate);
        if let Some(g) = &i.pretrained {
            let _ = writeln!(s, "init.pretrained_input = {}", fmt_extents(&g.input));
            let _ = writeln!(s, "init.pretrained_patch = {}", fmt_extents(&g.patch));
        }
        let _ = writeln!(s, "init.seed = {}", i.seed);
        s
    }

    pub fn geometries(&self) -> Vec<Geometry> {
        self.modalities.iter().map(|m| m.geometry.clone()).collect()
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|t| t.spec.clone()).collect()
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.spec.name.clone()).collect()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.spec.name == name)
    }

    pub fn budgets(&self) -> Vec<u64> {
        self.tasks.iter().map(|t| t.spec.steps).collect()
    }

    /// Analytic parameter breakdown (nothing is allocated).
    pub fn param_breakdown(&self) -> ParamBreakdown {
        ParamBreakdown::from_layout(&self.model, &self.geometries(), &self.task_specs())
    }

    /// The schedule for `kind` (default: the configured kind). Task-by-task
    /// uses `schedule.order` when given.
    pub fn plan(&self, kind: Option<ScheduleKind>) -> Result<SchedulePlan> {
        let kind = kind.unwrap_or(self.schedule_kind);
        let budgets = self.budgets();
        match (kind, &self.schedule_order) {
            (ScheduleKind::TaskByTask, Some(order)) => {
                let idx: Vec<usize> = order
                    .iter()
                    .map(|n| self.task_index(n).expect("validated order"))
                    .collect();
                SchedulePlan::task_by_task_in_order(&budgets, &idx, self.schedule_seed)
            }
            _ => SchedulePlan::build(kind, &budgets, self.schedule_seed),
        }
    }

    /// Synthetic data generator for task `j`.
    pub fn synthetic(&self, j: usize) -> SyntheticTask {
        let t = &self.tasks[j];
        let geometry = self
            .modalities
            .iter()
            .find(|m| m.geometry.modality == t.spec.modality)
            .map(|m| m.geometry.clone())
            .expect("validated modality");
        SyntheticTask {
            geometry,
            classes: t.spec.classes,
            noise: t.data.noise,
            train: t.data.train,
            val: t.data.val,
            test: t.data.test,
            seed: t.data.seed,
            multilabel: t.spec.loss.is_multilabel(),
        }
    }

    /// Builds the initial model: random, or converted from a synthetic
    /// pretrained image ViT drawn from `init.seed`.
    pub fn build_model<T: Element>(&self) -> Result<PolyViT<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init.seed);
        let mut model = match self.init.source {
            InitSource::Scratch => PolyViT::random(self.model, &self.geometries(), self.task_specs(), &mut rng)?,
            InitSource::Pretrained => {
                let geometry = match &self.init.pretrained {
                    Some(g) => g.clone(),
                    None => self
                        .modalities
                        .iter()
                        .find(|m| m.geometry.modality == Modality::Image)
                        .map(|m| m.geometry.clone())
                        .ok_or_else(|| Error::config("init.pretrained_input", "missing"))?,
                };
                let vit = PretrainedViT::random(&self.model, geometry, &mut rng)?;
                init_polyvit(
                    &vit,
                    self.model.adapt_layers,
                    &self.geometries(),
                    self.task_specs(),
                    self.init.inflate,
                    &mut rng,
                )?
            }
        };
        model.encoder.drop_path = self.drop_paths();
        Ok(model)
    }

    pub fn drop_paths(&self) -> BTreeMap<Modality, f64> {
        self.modalities
            .iter()
            .map(|m| (m.geometry.modality, m.drop_path))
            .collect()
    }
}
