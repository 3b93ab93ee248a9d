//! Co-training over a schedule plan with one shared momentum state, and
//! frozen-trunk linear probing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::data::{Batcher, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Param, ParamGrads};
use crate::metrics::{accuracy, mean_average_precision};
use crate::model::{Head, LossKind, PolyViT, TaskSpec};
use crate::schedule::{SchedulePlan, Step};
use crate::tensor::{Element, Tensor, Var};
use crate::tokenizer::Geometry;
use crate::transfer::{with_converted_modality, InflateStrategy};

/// Which step counter drives warmup during co-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmupCounter {
    /// Global step against the summed warmup of all tasks.
    Global,
    /// Each task's own step count against its own warmup.
    PerTask,
}

impl WarmupCounter {
    pub fn name(self) -> &'static str {
        match self {
            WarmupCounter::Global => "global",
            WarmupCounter::PerTask => "per_task",
        }
    }
}

impl FromStr for WarmupCounter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(WarmupCounter::Global),
            "per_task" => Ok(WarmupCounter::PerTask),
            _ => Err(Error::Training(format!("unknown warmup counter `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub momentum: f64,
    pub batch_size: usize,
    /// Per-task minibatch sizes; empty means `batch_size` for every task.
    pub task_batches: Vec<usize>,
    pub warmup_counter: WarmupCounter,
    /// Cosine decay to zero after warmup instead of a constant rate.
    pub cosine_decay: bool,
    pub seed: u64,
    /// Run the eval hook every this many steps (0 = only at the end).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            batch_size: 8,
            task_batches: Vec::new(),
            warmup_counter: WarmupCounter::Global,
            cosine_decay: false,
            seed: 0,
            eval_every: 0,
        }
    }
}

/// Linear warmup from zero to `base` over `warmup` steps, then constant, or
/// cosine-decayed to zero at `total` steps when `cosine` is set.
pub fn lr_at(base: f64, step: u64, warmup: u64, cosine: Option<u64>) -> f64 {
    if warmup > 0 && step < warmup {
        return base * step as f64 / warmup as f64;
    }
    match cosine {
        Some(total) if total > warmup => {
            let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
        _ => base,
    }
}

/// A single heavy-ball momentum state shared by every task:
/// `m ← μ·m + g`, `θ ← θ − lr·m`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub buffers: BTreeMap<String, Tensor<T>>,
    /// Updates applied to each parameter.
    pub updates: BTreeMap<String, u64>,
    pub global_step: u64,
    pub task_steps: Vec<u64>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(momentum: f64, tasks: usize) -> Self {
        Self {
            momentum,
            buffers: BTreeMap::new(),
            updates: BTreeMap::new(),
            global_step: 0,
            task_steps: vec![0; tasks],
        }
    }

    /// Applies one update to every parameter that has a gradient; the rest
    /// (and their momentum) are left alone.
    pub fn sgd_step<'p>(
        &mut self,
        params: impl IntoIterator<Item = &'p mut Param<T>>,
        grads: &ParamGrads<T>,
        lr: f64,
    ) -> Result<()>
    where
        T: 'p,
    {
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(lr);
        for p in params {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            if g.shape() != p.value.shape() {
                return Err(Error::Training(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            let m = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            if m.shape() != g.shape() {
                return Err(Error::Training(format!("momentum buffer for {} has the wrong shape", p.name)));
            }
            for ((mv, &gv), pv) in m.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *mv = mu * *mv + gv;
                *pv = *pv - lr * *mv;
            }
            *self.updates.entry(p.name.clone()).or_insert(0) += 1;
        }
        Ok(())
    }
}

/// Convex mixing of a batch with a permutation of itself:
/// `x'_i = λ·x_i + (1−λ)·x_σ(i)`, labels alike.
pub fn mixup_with<T: Element>(inputs: &mut [Tensor<T>], targets: &mut Tensor<T>, lambda: f64, perm: &[usize]) -> Result<()> {
    let b = inputs.len();
    if b < 2 {
        return Err(Error::Training("mixup needs a batch of at least 2".into()));
    }
    if perm.len() != b || targets.shape().first() != Some(&b) {
        return Err(Error::Training("mixup permutation or targets do not match the batch".into()));
    }
    let l = T::from_f64_lossy(lambda);
    let r = T::from_f64_lossy(1.0 - lambda);
    let orig_x: Vec<Tensor<T>> = inputs.to_vec();
    for (i, x) in inputs.iter_mut().enumerate() {
        *x = orig_x[i].zip_map(&orig_x[perm[i]], |a, c| l * a + r * c)?;
    }
    let c = targets.len() / b;
    let orig_t = targets.data().to_vec();
    for (i, row) in targets.data_mut().chunks_mut(c).enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = l * orig_t[i * c + k] + r * orig_t[perm[i] * c + k];
        }
    }
    Ok(())
}

/// Mixup with `λ ~ Beta(α, α)` and a random pairing; returns `λ`.
pub fn mixup<T: Element>(inputs: &mut [Tensor<T>], targets: &mut Tensor<T>, alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Training(format!("mixup alpha must be positive, got {alpha}")));
    }
    if inputs.len() < 2 {
        return Err(Error::Training("mixup needs a batch of at least 2".into()));
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::Training(e.to_string()))?
        .sample(rng);
    let mut perm: Vec<usize> = (0..inputs.len()).collect();
    perm.shuffle(rng);
    mixup_with(inputs, targets, lambda, &perm)?;
    Ok(lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// `None` for an accumulated update over all tasks.
    pub task: Option<usize>,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub task: usize,
    pub split: String,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.task {
            Some(j) => write!(f, "step={} task={} loss={} lr={}", self.step, j, self.loss, self.lr),
            None => write!(f, "step={} task=all loss={} lr={}", self.step, self.loss, self.lr),
        }
    }
}

impl fmt::Display for EvalRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "eval step={} task={} split={} {}={}",
            self.step, self.task, self.split, self.metric, self.value
        )
    }
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(f, "{s}")?;
        }
        for e in &self.evals {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Metric name and value of `model` on task `task` over `data`: accuracy for
/// single-label tasks, mAP for multilabel ones.
pub fn evaluate<T: Element>(model: &PolyViT<T>, task: usize, data: &Dataset) -> Result<(&'static str, f64)> {
    let spec = model
        .tasks
        .get(task)
        .ok_or_else(|| Error::Training(format!("no task {task}")))?;
    let logits = batched_logits(data, spec.classes, |inputs| model.logits(task, inputs))?;
    metric_for(spec.loss, &logits, &data.labels(&data.all_indices()))
}

fn metric_for<T: Element>(loss: LossKind, scores: &Tensor<T>, labels: &[Vec<u32>]) -> Result<(&'static str, f64)> {
    Ok(match loss {
        LossKind::Softmax => ("accuracy", accuracy(scores, labels)?),
        LossKind::Sigmoid => ("mAP", mean_average_precision(scores, labels)?),
    })
}

const EVAL_CHUNK: usize = 64;

fn batched_logits<T: Element>(
    data: &Dataset,
    width: usize,
    mut f: impl FnMut(&[Tensor<T>]) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let idx = data.all_indices();
    let mut out = Vec::with_capacity(idx.len() * width);
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend_from_slice(f(&data.inputs(chunk))?.data());
    }
    Ok(Tensor::new([idx.len(), width], out)?)
}

fn stream_seed(seed: u64, task: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(task as u64 + 1)
}

/// Per-task minibatch streams for co-training.
pub struct TaskStreams<'d> {
    data: Vec<&'d Dataset>,
    batchers: Vec<Batcher>,
}

impl<'d> TaskStreams<'d> {
    pub fn new(data: Vec<&'d Dataset>, batches: &[usize], seed: u64) -> Result<Self> {
        if batches.len() != data.len() {
            return Err(Error::Training(format!(
                "{} batch sizes for {} data sources",
                batches.len(),
                data.len()
            )));
        }
        let batchers = data
            .iter()
            .zip(batches)
            .enumerate()
            .map(|(j, (d, &b))| Batcher::new(d.len(), b, stream_seed(seed, j)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { data, batchers })
    }

    pub fn next<T: Element>(&mut self, task: usize) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let d = self
            .data
            .get(task)
            .ok_or_else(|| Error::Training(format!("no data source for task {task}")))?;
        let idx = self.batchers[task].next_batch();
        Ok((d.inputs(&idx), d.targets(&idx)))
    }

    /// Skips `n` minibatches of `task` without materializing them.
    pub fn skip(&mut self, task: usize, n: u64) {
        for _ in 0..n {
            self.batchers[task].next_batch();
        }
    }
}

/// Records the loss of one single-task minibatch on `graph`.
fn task_loss<T: Element>(
    model: &PolyViT<T>,
    graph: &mut Graph<'_, T>,
    task: usize,
    inputs: &[Tensor<T>],
    targets: &Tensor<T>,
) -> Result<Var> {
    let logits = model.forward(graph, task, inputs)?;
    model.loss(graph, task, logits, targets)
}

fn check_finite(loss: f64, step: u64, task: Option<usize>) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let who = task.map_or("all".to_string(), |j| j.to_string());
    Err(Error::Training(format!("non-finite loss {loss} at step {step} (task {who})")))
}

/// Called with the model and global step; returns evaluation records.
pub type EvalHook<'h, T> = dyn FnMut(&PolyViT<T>, u64) -> Result<Vec<EvalRecord>> + 'h;

/// Co-trains `model` on `plan`. `train[j]` feeds task `j`; `hook` is called
/// with the model and global step every `eval_every` steps and after the
/// last step, and its records are appended to the log.
pub fn cotrain<T: Element>(
    model: &mut PolyViT<T>,
    plan: &SchedulePlan,
    train: &[&Dataset],
    config: &TrainConfig,
    state: &mut OptimizerState<T>,
    hook: &mut EvalHook<'_, T>,
) -> Result<TrainLog> {
    let t = model.tasks.len();
    if plan.num_tasks() != t {
        return Err(Error::Training(format!(
            "plan covers {} tasks, model has {t}",
            plan.num_tasks()
        )));
    }
    if train.len() != t {
        return Err(Error::Training(format!(
            "{} data sources for {t} tasks",
            train.len()
        )));
    }
    for (j, (d, spec)) in train.iter().zip(&model.tasks).enumerate() {
        if d.classes != spec.classes || d.modality != spec.modality {
            return Err(Error::Training(format!(
                "data source {j} does not match task {}",
                spec.name
            )));
        }
    }
    if state.task_steps.len() != t {
        state.task_steps.resize(t, 0);
    }
    let batches = if config.task_batches.is_empty() {
        vec![config.batch_size; t]
    } else {
        config.task_batches.clone()
    };
    let mut streams = TaskStreams::new(train.to_vec(), &batches, config.seed)?;
    for (j, &n) in state.task_steps.iter().enumerate() {
        streams.skip(j, n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ state.global_step.wrapping_mul(0xD1B5_4A32_D192_ED03));
    rng.set_stream(u64::MAX);
    let total_warmup: u64 = model.tasks.iter().map(|s| s.warmup).sum();
    let cosine = config.cosine_decay.then_some(plan.len() as u64);
    let mut log = TrainLog::default();

    for &step in &plan.steps {
        let global = state.global_step;
        let (loss, lr, grads, task) = match step {
            Step::Task(j) => {
                let spec = &model.tasks[j];
                let (mut inputs, mut targets) = streams.next::<T>(j)?;
                if spec.mixup_alpha > 0.0 {
                    mixup(&mut inputs, &mut targets, spec.mixup_alpha, &mut rng)?;
                }
                let lr = match config.warmup_counter {
                    WarmupCounter::Global => lr_at(spec.lr, global, total_warmup, cosine),
                    WarmupCounter::PerTask => lr_at(spec.lr, state.task_steps[j], spec.warmup, cosine),
                };
                let mut graph = Graph::new(Mode::Train).with_rng(&mut rng);
                let loss = task_loss(model, &mut graph, j, &inputs, &targets)?;
                let value = graph.value(loss).item().map_or(f64::NAN, T::to_f64_lossy);
                check_finite(value, global, Some(j))?;
                (value, lr, graph.gradients(loss)?, Some(j))
            }
            Step::AllTasks => {
                let (loss, lr, grads) = accumulated_update(model, &mut streams, &mut rng, state, config, total_warmup, cosine)?;
                check_finite(loss, global, None)?;
                (loss, lr, grads, None)
            }
        };
        state.sgd_step(model.params_mut(), &grads, lr)?;
        state.global_step += 1;
        match task {
            Some(j) => state.task_steps[j] += 1,
            None => state.task_steps.iter_mut().for_each(|c| *c += 1),
        }
        log.steps.push(StepRecord {
            step: global,
            task,
            loss,
            lr,
        });
        if config.eval_every > 0 && state.global_step.is_multiple_of(config.eval_every) {
            log.evals.extend(hook(model, state.global_step)?);
        }
    }
    if config.eval_every == 0 || !state.global_step.is_multiple_of(config.eval_every) {
        log.evals.extend(hook(model, state.global_step)?);
    }
    Ok(log)
}

/// Sums every task's minibatch loss on one tape; the update uses the
/// smallest base learning rate across tasks.
fn accumulated_update<T: Element>(
    model: &PolyViT<T>,
    streams: &mut TaskStreams<'_>,
    rng: &mut ChaCha8Rng,
    state: &OptimizerState<T>,
    config: &TrainConfig,
    total_warmup: u64,
    cosine: Option<u64>,
) -> Result<(f64, f64, ParamGrads<T>)> {
    let mut batches = Vec::with_capacity(model.tasks.len());
    for (j, spec) in model.tasks.iter().enumerate() {
        let (mut inputs, mut targets) = streams.next::<T>(j)?;
        if spec.mixup_alpha > 0.0 {
            mixup(&mut inputs, &mut targets, spec.mixup_alpha, rng)?;
        }
        batches.push((inputs, targets));
    }
    let base = model.tasks.iter().map(|s| s.lr).fold(f64::INFINITY, f64::min);
    let lr = match config.warmup_counter {
        WarmupCounter::Global => lr_at(base, state.global_step, total_warmup, cosine),
        WarmupCounter::PerTask => {
            let w = model.tasks.iter().map(|s| s.warmup).max().unwrap_or(0);
            lr_at(base, state.global_step, w, cosine)
        }
    };
    let mut graph = Graph::new(Mode::Train).with_rng(rng);
    let mut total: Option<Var> = None;
    for (j, (inputs, targets)) in batches.iter().enumerate() {
        let l = task_loss(model, &mut graph, j, inputs, targets)?;
        total = Some(match total {
            None => l,
            Some(acc) => graph.tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Training("accumulated step with no tasks".into()))?;
    let value = graph.value(total).item().map_or(f64::NAN, T::to_f64_lossy);
    let grads = graph.gradients(total)?;
    Ok((value, lr, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Convert an existing tokenizer when the model lacks the task's
    /// modality (or geometry differs): the target geometry and how to
    /// inflate kernels.
    pub convert: Option<(Geometry, InflateStrategy)>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            momentum: 0.9,
            seed: 0,
            convert: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult<T> {
    pub head: Head<T>,
    pub metric: &'static str,
    pub train_metric: f64,
    pub eval_metric: Option<f64>,
    pub log: TrainLog,
}

/// Frozen class-token features of a whole dataset.
pub fn frozen_features<T: Element>(model: &PolyViT<T>, data: &Dataset) -> Result<Tensor<T>> {
    batched_logits(data, model.config.width, |inputs| model.encode_features(data.modality, inputs))
}

fn head_logits<T: Element>(head: &Head<T>, feats: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::eval().frozen();
    let f = g.input(feats.clone());
    let y = head.apply(&mut g, f)?;
    Ok(g.value(y).clone())
}

fn gather_rows<T: Element>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = x.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::from_parts(vec![idx.len(), d], out)
}

/// Trains only a fresh head for `task` on frozen trunk features; `model` is
/// never modified. Runs `task.steps` SGD steps at `task.lr` with the task's
/// warmup.
pub fn linear_probe<T: Element>(
    model: &PolyViT<T>,
    task: &TaskSpec,
    train: &Dataset,
    eval: Option<&Dataset>,
    config: &ProbeConfig,
) -> Result<ProbeResult<T>> {
    task.validate()?;
    if train.classes != task.classes || train.modality != task.modality {
        return Err(Error::Training(format!("probe data does not match task {}", task.name)));
    }
    let converted;
    let view = match (&config.convert, model.tokenizers.get(&task.modality)) {
        (_, Some(tok)) if tok.geometry.input == train.extents => model,
        (Some((geometry, strategy)), _) => {
            if geometry.modality != task.modality || geometry.input != train.extents {
                return Err(Error::Training("conversion geometry does not match the probe data".into()));
            }
            let mut base = model.clone();
            base.tokenizers.remove(&task.modality);
            base.encoder.adaptors.remove(&task.modality);
            converted = with_converted_modality(&base, geometry, *strategy)?;
            &converted
        }
        (None, _) => {
            return Err(Error::Training(format!(
                "model has no tokenizer for {} inputs of shape {:?}; a conversion is required",
                task.modality, train.extents
            )))
        }
    };
    let feats = frozen_features(view, train)?;
    let eval_feats = eval.map(|d| frozen_features(view, d)).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = Head::new(view.tasks.len(), view.config.width, task.classes, task.head_init, &mut rng);
    let mut state = OptimizerState::new(config.momentum, 1);
    let mut batcher = Batcher::new(train.len(), config.batch_size, stream_seed(config.seed, 0))?;
    let mut log = TrainLog::default();
    for step in 0..task.steps {
        let idx = batcher.next_batch();
        let x = gather_rows(&feats, &idx);
        let targets: Tensor<T> = train.targets(&idx);
        let mut g = Graph::new(Mode::Eval);
        let f = g.input(x);
        let logits = head.apply(&mut g, f)?;
        let loss = match task.loss {
            LossKind::Softmax => g.tape.softmax_cross_entropy(logits, &targets)?,
            LossKind::Sigmoid => g.tape.sigmoid_bce(logits, &targets)?,
        };
        let value = g.value(loss).item().map_or(f64::NAN, T::to_f64_lossy);
        check_finite(value, step, Some(0))?;
        let grads = g.gradients(loss)?;
        let lr = lr_at(task.lr, step, task.warmup, None);
        state.sgd_step(head.params_mut(), &grads, lr)?;
        log.steps.push(StepRecord {
            step,
            task: Some(0),
            loss: value,
            lr,
        });
    }
    let (metric, train_metric) = metric_for(task.loss, &head_logits(&head, &feats)?, &train.labels(&train.all_indices()))?;
    let eval_metric = match (eval, &eval_feats) {
        (Some(d), Some(f)) => Some(metric_for(task.loss, &head_logits(&head, f)?, &d.labels(&d.all_indices()))?.1),
        _ => None,
    };
    Ok(ProbeResult {
        head,
        metric,
        train_metric,
        eval_metric,
        log,
    })
}

/// Order-sensitive checksum over parameter names and bit patterns.
pub fn param_checksum<'p, T: Element + 'p>(params: impl IntoIterator<Item = &'p Param<T>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    let mut buf = Vec::new();
    for p in params {
        feed(p.name.as_bytes());
        buf.clear();
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
        feed(&buf);
    }
    h
}
