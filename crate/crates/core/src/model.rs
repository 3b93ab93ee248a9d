//! PolyViT assembly: modality tokenizers, the adaptor/shared encoder and one
//! linear head per task.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{EncoderLayer, EncoderStack};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Param};
use crate::tensor::{Element, Tensor, Var};
use crate::tokenizer::{normal_tensor, Geometry, Modality, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Single-label, softmax cross-entropy.
    Softmax,
    /// Multi-label, per-class sigmoid binary cross-entropy.
    Sigmoid,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::Sigmoid => "sigmoid",
        }
    }

    pub fn is_multilabel(self) -> bool {
        self == LossKind::Sigmoid
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "sigmoid" => Ok(LossKind::Sigmoid),
            _ => Err(Error::Model(format!("unknown loss kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    Zeros,
    LecunNormal,
}

impl HeadInit {
    pub fn name(self) -> &'static str {
        match self {
            HeadInit::Zeros => "zeros",
            HeadInit::LecunNormal => "lecun_normal",
        }
    }
}

impl FromStr for HeadInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(HeadInit::Zeros),
            "lecun_normal" => Ok(HeadInit::LecunNormal),
            _ => Err(Error::Model(format!("unknown head init `{s}`"))),
        }
    }
}

/// A (modality, label set) pair plus its single-task training recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub modality: Modality,
    pub classes: usize,
    pub loss: LossKind,
    /// Single-task step budget.
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub head_init: HeadInit,
    /// Mixup Beta parameter; 0 disables mixup.
    pub mixup_alpha: f64,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, modality: Modality, classes: usize) -> Self {
        Self {
            name: name.into(),
            modality,
            classes,
            loss: LossKind::Softmax,
            steps: 1,
            lr: 0.03,
            warmup: 0,
            head_init: HeadInit::Zeros,
            mixup_alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Model(format!(
                "task {} needs at least 2 classes, got {}",
                self.name, self.classes
            )));
        }
        if self.steps < 1 {
            return Err(Error::Model(format!("task {} has a zero step budget", self.name)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Model(format!("task {} has invalid lr {}", self.name, self.lr)));
        }
        if !(self.mixup_alpha.is_finite() && self.mixup_alpha >= 0.0) {
            return Err(Error::Model(format!(
                "task {} has invalid mixup alpha {}",
                self.name, self.mixup_alpha
            )));
        }
        Ok(())
    }
}

/// Encoder hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub adapt_layers: usize,
}

impl ModelConfig {
    /// L=12, d=768, 12 heads, MLP 3072.
    pub fn base() -> Self {
        Self {
            layers: 12,
            width: 768,
            heads: 12,
            mlp_dim: 3072,
            adapt_layers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.mlp_dim == 0 {
            return Err(Error::Model("layers, width and mlp_dim must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Model(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.adapt_layers > self.layers {
            return Err(Error::Model(format!(
                "adapt_layers {} exceeds layers {}",
                self.adapt_layers, self.layers
            )));
        }
        Ok(())
    }

    pub fn shared_layers(&self) -> usize {
        self.layers - self.adapt_layers
    }

    /// Parameters of one encoder layer: two LayerNorms, Q/K/V/output
    /// projections with biases, and the two-layer MLP.
    pub fn layer_params(&self) -> usize {
        let d = self.width;
        2 * 2 * d + 4 * (d * d + d) + (d * self.mlp_dim + self.mlp_dim) + (self.mlp_dim * d + d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    /// `[d, C]`
    pub w: Param<T>,
    pub b: Param<T>,
}

pub(crate) fn head_prefix(task: usize) -> String {
    format!("task{task}.head")
}

impl<T: Element> Head<T> {
    pub fn new(task: usize, width: usize, classes: usize, init: HeadInit, rng: &mut impl Rng) -> Self {
        let prefix = head_prefix(task);
        let w = match init {
            HeadInit::Zeros => Tensor::zeros([width, classes]),
            HeadInit::LecunNormal => normal_tensor([width, classes], (1.0 / width as f64).sqrt(), rng),
        };
        Self {
            w: Param::new(format!("{prefix}.w"), w),
            b: Param::new(format!("{prefix}.b"), Tensor::zeros([classes])),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.value.len()
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.w, &mut self.b]
    }

    fn renumber(&mut self, task: usize) {
        let prefix = head_prefix(task);
        self.w.name = format!("{prefix}.w");
        self.b.name = format!("{prefix}.b");
    }

    pub fn apply(&self, graph: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let w = graph.bind(&self.w);
        let b = graph.bind(&self.b);
        let y = graph.tape.matmul(features, w)?;
        Ok(graph.tape.add_bias(y, b)?)
    }
}

/// Exact parameter accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    /// Shared encoder layers and the final LayerNorm.
    pub shared: usize,
    /// Tokenizer plus adaptor layers, per modality.
    pub per_modality: BTreeMap<Modality, usize>,
    /// Output head, per task (in task order).
    pub per_task: Vec<(String, usize)>,
    pub total: usize,
    /// Equivalent fleet of single-task models: each with a full `L`-layer
    /// encoder, final LayerNorm, its own tokenizer and its own head.
    pub fleet_total: usize,
}

impl ParamBreakdown {
    /// Analytic count from shapes alone (nothing is allocated).
    pub fn from_layout(config: &ModelConfig, geometries: &[Geometry], tasks: &[TaskSpec]) -> Self {
        let d = config.width;
        let layer = config.layer_params();
        let final_ln = 2 * d;
        let tokenizer = |g: &Geometry| g.patch_dim() * d + d + d + g.seq_len() * d;
        let shared = config.shared_layers() * layer + final_ln;
        let per_modality: BTreeMap<Modality, usize> = geometries
            .iter()
            .map(|g| (g.modality, tokenizer(g) + config.adapt_layers * layer))
            .collect();
        let per_task: Vec<(String, usize)> = tasks
            .iter()
            .map(|t| (t.name.clone(), t.classes * (d + 1)))
            .collect();
        let total = shared + per_modality.values().sum::<usize>() + per_task.iter().map(|t| t.1).sum::<usize>();
        let fleet_total = tasks
            .iter()
            .map(|t| {
                let tok = geometries
                    .iter()
                    .find(|g| g.modality == t.modality)
                    .map_or(0, tokenizer);
                config.layers * layer + final_ln + tok + t.classes * (d + 1)
            })
            .sum();
        Self {
            shared,
            per_modality,
            per_task,
            total,
            fleet_total,
        }
    }

    /// How many times more parameters the single-task fleet needs.
    pub fn fleet_ratio(&self) -> f64 {
        self.fleet_total as f64 / self.total as f64
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "shared = {}", self.shared)?;
        for (m, n) in &self.per_modality {
            writeln!(f, "modality.{m} = {n}")?;
        }
        for (t, n) in &self.per_task {
            writeln!(f, "task.{t} = {n}")?;
        }
        writeln!(f, "total = {} ({:.1}M)", self.total, self.total as f64 / 1e6)?;
        writeln!(
            f,
            "single_task_fleet = {} ({:.1}M, {} models)",
            self.fleet_total,
            self.fleet_total as f64 / 1e6,
            self.per_task.len()
        )?;
        write!(f, "fleet_ratio = {:.2}", self.fleet_ratio())
    }
}

/// The full model. Heads are indexed by task position and are the only
/// task-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyViT<T> {
    pub config: ModelConfig,
    pub tokenizers: BTreeMap<Modality, Tokenizer<T>>,
    pub encoder: EncoderStack<T>,
    pub tasks: Vec<TaskSpec>,
    pub heads: Vec<Head<T>>,
}

impl<T: Element> PolyViT<T> {
    /// Random initialization from scratch.
    pub fn random(
        config: ModelConfig,
        geometries: &[Geometry],
        tasks: Vec<TaskSpec>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut tokenizers = BTreeMap::new();
        for g in geometries {
            if tokenizers.contains_key(&g.modality) {
                return Err(Error::Model(format!("duplicate {} geometry", g.modality)));
            }
            tokenizers.insert(g.modality, Tokenizer::random(g.clone(), config.width, rng)?);
        }
        let modalities: Vec<Modality> = tokenizers.keys().copied().collect();
        let encoder = EncoderStack::random(
            &modalities,
            config.layers,
            config.adapt_layers,
            config.width,
            config.heads,
            config.mlp_dim,
            rng,
        )?;
        Self::assemble(config, tokenizers, encoder, tasks, rng)
    }

    /// Builds a model from existing trunk pieces and fresh heads.
    pub fn assemble(
        config: ModelConfig,
        tokenizers: BTreeMap<Modality, Tokenizer<T>>,
        encoder: EncoderStack<T>,
        tasks: Vec<TaskSpec>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut model = Self {
            config,
            tokenizers,
            encoder,
            tasks: Vec::new(),
            heads: Vec::new(),
        };
        for t in tasks {
            model.add_task(t, rng)?;
        }
        model.check()?;
        Ok(model)
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        for (m, t) in &self.tokenizers {
            t.check()?;
            if t.width() != self.config.width || t.modality() != *m {
                return Err(Error::Model(format!("{m} tokenizer does not match the model")));
            }
            if self.encoder.adaptors.get(m).map_or(usize::MAX, Vec::len) != self.config.adapt_layers {
                return Err(Error::Model(format!(
                    "{m} needs {} adaptor layers",
                    self.config.adapt_layers
                )));
            }
        }
        if self.encoder.shared.len() != self.config.shared_layers() {
            return Err(Error::Model("shared layer count does not match config".into()));
        }
        for (t, h) in self.tasks.iter().zip(&self.heads) {
            t.validate()?;
            if !self.tokenizers.contains_key(&t.modality) {
                return Err(Error::Model(format!(
                    "task {} uses modality {} which the model lacks",
                    t.name, t.modality
                )));
            }
            if h.classes() != t.classes || h.w.value.shape() != [self.config.width, t.classes] {
                return Err(Error::Model(format!("head of task {} has wrong shape", t.name)));
            }
        }
        Ok(())
    }

    pub fn add_task(&mut self, task: TaskSpec, rng: &mut impl Rng) -> Result<usize> {
        task.validate()?;
        if !self.tokenizers.contains_key(&task.modality) {
            return Err(Error::Model(format!(
                "task {} uses modality {} which the model lacks",
                task.name, task.modality
            )));
        }
        if self.tasks.iter().any(|t| t.name == task.name) {
            return Err(Error::Model(format!("duplicate task name {}", task.name)));
        }
        let idx = self.tasks.len();
        self.heads.push(Head::new(idx, self.config.width, task.classes, task.head_init, rng));
        self.tasks.push(task);
        Ok(idx)
    }

    /// Drops a task and its head; later heads are renumbered.
    pub fn remove_task(&mut self, idx: usize) -> Result<TaskSpec> {
        if idx >= self.tasks.len() {
            return Err(Error::Model(format!("no task {idx}")));
        }
        self.heads.remove(idx);
        for (i, h) in self.heads.iter_mut().enumerate().skip(idx) {
            h.renumber(i);
        }
        Ok(self.tasks.remove(idx))
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.tokenizers.keys().copied().collect()
    }

    pub fn geometries(&self) -> Vec<Geometry> {
        self.tokenizers.values().map(|t| t.geometry.clone()).collect()
    }

    pub fn tokenizer(&self, m: Modality) -> Result<&Tokenizer<T>> {
        self.tokenizers
            .get(&m)
            .ok_or_else(|| Error::Model(format!("model has no {m} tokenizer")))
    }

    /// Adds a modality with its tokenizer and adaptor layers.
    pub fn add_modality(&mut self, tokenizer: Tokenizer<T>, adaptors: Vec<EncoderLayer<T>>) -> Result<()> {
        let m = tokenizer.modality();
        if self.tokenizers.contains_key(&m) {
            return Err(Error::Model(format!("model already has a {m} tokenizer")));
        }
        self.tokenizers.insert(m, tokenizer);
        self.encoder.adaptors.insert(m, adaptors);
        self.encoder.drop_path.entry(m).or_insert(0.0);
        self.check()
    }

    /// All parameters in canonical order: tokenizers, encoder, heads.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.tokenizers.values().flat_map(|t| t.params()).collect();
        out.extend(self.encoder.params());
        out.extend(self.heads.iter().flat_map(|h| h.params()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self
            .tokenizers
            .values_mut()
            .flat_map(|t| t.params_mut())
            .collect();
        out.extend(self.encoder.params_mut());
        out.extend(self.heads.iter_mut().flat_map(|h| h.params_mut()));
        out
    }

    /// Every parameter except the task heads.
    pub fn trunk_params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.tokenizers.values().flat_map(|t| t.params()).collect();
        out.extend(self.encoder.params());
        out
    }

    pub fn param_count(&self) -> ParamBreakdown {
        let count = |ps: &[&Param<T>]| ps.iter().map(|p| p.numel()).sum::<usize>();
        let shared = count(&self.encoder.shared_params());
        let per_modality: BTreeMap<Modality, usize> = self
            .tokenizers
            .iter()
            .map(|(m, t)| (*m, count(&t.params()) + count(&self.encoder.adaptor_params(*m))))
            .collect();
        let per_task: Vec<(String, usize)> = self
            .tasks
            .iter()
            .zip(&self.heads)
            .map(|(t, h)| (t.name.clone(), count(&h.params())))
            .collect();
        let total = shared + per_modality.values().sum::<usize>() + per_task.iter().map(|t| t.1).sum::<usize>();
        let layers: usize = self
            .encoder
            .shared
            .iter()
            .map(EncoderLayer::param_count)
            .sum::<usize>()
            + self.config.adapt_layers * self.config.layer_params();
        let final_ln = 2 * self.config.width;
        let fleet_total = self
            .tasks
            .iter()
            .zip(&per_task)
            .map(|(t, (_, head))| {
                let tok = self.tokenizers.get(&t.modality).map_or(0, |tk| count(&tk.params()));
                layers + final_ln + tok + head
            })
            .sum();
        ParamBreakdown {
            shared,
            per_modality,
            per_task,
            total,
            fleet_total,
        }
    }

    /// Records the encoded class-token features `[B, d]` for a batch.
    pub fn features(&self, graph: &mut Graph<'_, T>, modality: Modality, inputs: &[Tensor<T>]) -> Result<Var> {
        let tok = self.tokenizer(modality)?;
        let seq = tok.geometry.seq_len();
        let z0 = tok.tokenize_batch(graph, inputs)?;
        let z = self.encoder.encode(graph, z0, modality, seq)?;
        let cls_rows = (0..inputs.len()).map(|b| b * seq).collect();
        Ok(graph.tape.select_rows(z, cls_rows)?)
    }

    /// Records task logits `[B, C_j]` for a single-task batch.
    pub fn forward(&self, graph: &mut Graph<'_, T>, task: usize, inputs: &[Tensor<T>]) -> Result<Var> {
        let spec = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::Model(format!("no task {task}")))?;
        let feats = self.features(graph, spec.modality, inputs)?;
        self.heads[task].apply(graph, feats)
    }

    /// Eval-mode logits without gradient tracking.
    pub fn logits(&self, task: usize, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut graph = Graph::new(Mode::Eval).frozen();
        let v = self.forward(&mut graph, task, inputs)?;
        Ok(graph.value(v).clone())
    }

    /// Eval-mode class-token features without gradient tracking.
    pub fn encode_features(&self, modality: Modality, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut graph = Graph::new(Mode::Eval).frozen();
        let v = self.features(&mut graph, modality, inputs)?;
        Ok(graph.value(v).clone())
    }

    /// Records the task loss for logits produced by [`forward`](Self::forward).
    pub fn loss(&self, graph: &mut Graph<'_, T>, task: usize, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let kind = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::Model(format!("no task {task}")))?
            .loss;
        Ok(match kind {
            LossKind::Softmax => graph.tape.softmax_cross_entropy(logits, targets)?,
            LossKind::Sigmoid => graph.tape.sigmoid_bce(logits, targets)?,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn cast<U: Element>(&self) -> PolyViT<U> {
        fn cast_param<T: Element, U: Element>(p: &Param<T>) -> Param<U> {
            Param::new(p.name.clone(), p.value.cast())
        }
        fn cast_layer<T: Element, U: Element>(l: &EncoderLayer<T>) -> EncoderLayer<U> {
            use crate::encoder::{LayerNormParams, Linear};
            let ln = |x: &LayerNormParams<T>| LayerNormParams {
                gamma: cast_param(&x.gamma),
                beta: cast_param(&x.beta),
            };
            let lin = |x: &Linear<T>| Linear {
                w: cast_param(&x.w),
                b: cast_param(&x.b),
            };
            EncoderLayer {
                heads: l.heads,
                ln1: ln(&l.ln1),
                q: lin(&l.q),
                k: lin(&l.k),
                v: lin(&l.v),
                out: lin(&l.out),
                ln2: ln(&l.ln2),
                fc1: lin(&l.fc1),
                fc2: lin(&l.fc2),
            }
        }
        PolyViT {
            config: self.config,
            tokenizers: self
                .tokenizers
                .iter()
                .map(|(m, t)| {
                    (
                        *m,
                        Tokenizer {
                            geometry: t.geometry.clone(),
                            embed: cast_param(&t.embed),
                            embed_bias: cast_param(&t.embed_bias),
                            cls: cast_param(&t.cls),
                            pos: cast_param(&t.pos),
                        },
                    )
                })
                .collect(),
            encoder: EncoderStack {
                adaptors: self
                    .encoder
                    .adaptors
                    .iter()
                    .map(|(m, ls)| (*m, ls.iter().map(cast_layer).collect()))
                    .collect(),
                shared: self.encoder.shared.iter().map(cast_layer).collect(),
                final_ln: crate::encoder::LayerNormParams {
                    gamma: cast_param(&self.encoder.final_ln.gamma),
                    beta: cast_param(&self.encoder.final_ln.beta),
                },
                drop_path: self.encoder.drop_path.clone(),
            },
            tasks: self.tasks.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    w: cast_param(&h.w),
                    b: cast_param(&h.b),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(head_init: HeadInit) -> PolyViT<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = ModelConfig {
            layers: 2,
            width: 8,
            heads: 2,
            mlp_dim: 16,
            adapt_layers: 1,
        };
        let geoms = [
            Geometry::image(8, 8, 3, 4, 4).unwrap(),
            Geometry::audio(8, 4, 4, 4).unwrap(),
        ];
        let mut a = TaskSpec::new("a", Modality::Image, 3);
        a.head_init = head_init;
        let mut b = TaskSpec::new("b", Modality::Image, 5);
        b.head_init = head_init;
        let mut c = TaskSpec::new("c", Modality::Audio, 10);
        c.head_init = head_init;
        PolyViT::random(config, &geoms, vec![a, b, c], &mut rng).unwrap()
    }

    fn image(seed: u64) -> Tensor<f64> {
        normal_tensor([8, 8, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_head_gives_zero_logits_and_log_c_loss() {
        let m = toy(HeadInit::Zeros);
        let x = vec![normal_tensor::<f64>([8, 4, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(1))];
        let logits = m.logits(2, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let mut g = Graph::eval();
        let l = m.forward(&mut g, 2, &x).unwrap();
        let mut t = Tensor::zeros([1, 10]);
        t.data_mut()[3] = 1.0;
        let loss = m.loss(&mut g, 2, l, &t).unwrap();
        assert!((g.value(loss).item().unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tasks_of_one_modality_share_the_trunk() {
        let m = toy(HeadInit::LecunNormal);
        let x = vec![image(2)];
        let f = m.encode_features(Modality::Image, &x).unwrap();
        let a = m.logits(0, &x).unwrap();
        let b = m.logits(1, &x).unwrap();
        assert!(a.max_abs_diff(&f.matmul(&m.heads[0].w.value).unwrap()).unwrap() < 1e-12);
        assert!(b.max_abs_diff(&f.matmul(&m.heads[1].w.value).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn batched_rows_match_single_inputs() {
        let m = toy(HeadInit::LecunNormal);
        let xs: Vec<_> = (0..3).map(image).collect();
        let batch = m.logits(1, &xs).unwrap();
        assert_eq!(batch.shape(), [3, 5]);
        for (i, x) in xs.iter().enumerate() {
            let one = m.logits(1, std::slice::from_ref(x)).unwrap();
            for c in 0..5 {
                assert!((batch.at(&[i, c]) - one.at(&[0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_modality_input_is_rejected() {
        let m = toy(HeadInit::Zeros);
        assert!(m.logits(2, &[image(0)]).is_err());
        assert!(m.logits(7, &[image(0)]).is_err());
    }

    #[test]
    fn counts_agree_with_layout_and_task_removal() {
        let mut m = toy(HeadInit::Zeros);
        let live = m.param_count();
        let layout = ParamBreakdown::from_layout(&m.config, &m.geometries(), &m.tasks);
        assert_eq!(live, layout);
        let stored: usize = m.params().iter().map(|p| p.numel()).sum();
        assert_eq!(live.total, stored);
        m.remove_task(1).unwrap();
        assert_eq!(m.param_count().total, live.total - 5 * 9);
        assert_eq!(m.heads[1].w.name, "task1.head.w");
        assert_eq!(m.tasks[1].name, "c");
    }

    #[test]
    fn no_parameter_besides_heads_is_task_keyed() {
        let m = toy(HeadInit::Zeros);
        for p in m.trunk_params() {
            assert!(!p.name.starts_with("task"), "{}", p.name);
        }
        let names: std::collections::BTreeSet<_> = m.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), m.params().len());
    }

    #[test]
    fn invalid_tasks_are_rejected() {
        let mut m = toy(HeadInit::Zeros);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.add_task(TaskSpec::new("v", Modality::Video, 3), &mut rng).is_err());
        assert!(m.add_task(TaskSpec::new("x", Modality::Image, 1), &mut rng).is_err());
        assert!(m.add_task(TaskSpec::new("a", Modality::Image, 3), &mut rng).is_err());
    }
}
