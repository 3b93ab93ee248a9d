//! Pre-norm transformer encoder split into per-modality adaptor layers and
//! layers shared by every modality.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Param};
use crate::tensor::{Element, Tensor, Var};
use crate::tokenizer::{normal_tensor, Modality};

/// LayerNorm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Element> LayerNormParams<T> {
    pub fn new(prefix: &str, d: usize) -> Self {
        Self {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::ones([d])),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros([d])),
        }
    }

    pub fn apply(&self, graph: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let g = graph.bind(&self.gamma);
        let b = graph.bind(&self.beta);
        Ok(graph
            .tape
            .layer_norm(x, g, b, T::from_f64_lossy(LN_EPS))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Element> Linear<T> {
    fn new(w_name: String, b_name: String, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Param::new(w_name, normal_tensor([fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)),
            b: Param::new(b_name, Tensor::zeros([fan_out])),
        }
    }

    pub fn apply(&self, graph: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = graph.bind(&self.w);
        let b = graph.bind(&self.b);
        let y = graph.tape.matmul(x, w)?;
        Ok(graph.tape.add_bias(y, b)?)
    }
}

/// One encoder layer: `y = MSA(LN(z)) + z`, `out = MLP(LN(y)) + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub heads: usize,
    pub ln1: LayerNormParams<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub ln2: LayerNormParams<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> EncoderLayer<T> {
    pub fn random(
        prefix: &str,
        width: usize,
        heads: usize,
        mlp_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Model(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        let lin = |name: &str, fi, fo, rng: &mut _| {
            Linear::new(
                format!("{prefix}.{name}_w"),
                format!("{prefix}.{name}_b"),
                fi,
                fo,
                rng,
            )
        };
        Ok(Self {
            heads,
            ln1: LayerNormParams::new(&format!("{prefix}.ln1"), width),
            q: lin("msa.q", width, width, rng),
            k: lin("msa.k", width, width, rng),
            v: lin("msa.v", width, width, rng),
            out: lin("msa.o", width, width, rng),
            ln2: LayerNormParams::new(&format!("{prefix}.ln2"), width),
            fc1: lin("mlp.fc1", width, mlp_dim, rng),
            fc2: lin("mlp.fc2", mlp_dim, width, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.ln1.gamma.value.len()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.ln1.gamma,
            &self.ln1.beta,
            &self.q.w,
            &self.q.b,
            &self.k.w,
            &self.k.b,
            &self.v.w,
            &self.v.b,
            &self.out.w,
            &self.out.b,
            &self.ln2.gamma,
            &self.ln2.beta,
            &self.fc1.w,
            &self.fc1.b,
            &self.fc2.w,
            &self.fc2.b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.ln1.gamma,
            &mut self.ln1.beta,
            &mut self.q.w,
            &mut self.q.b,
            &mut self.k.w,
            &mut self.k.b,
            &mut self.v.w,
            &mut self.v.b,
            &mut self.out.w,
            &mut self.out.b,
            &mut self.ln2.gamma,
            &mut self.ln2.beta,
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
        ]
    }

    /// Replaces the `old` name prefix of every parameter with `new`.
    pub fn rename(&mut self, old: &str, new: &str) {
        for p in self.params_mut() {
            if let Some(rest) = p.name.strip_prefix(old) {
                p.name = format!("{new}{rest}");
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Multi-head self-attention on `[B·seq, d]` rows.
    pub fn msa(&self, graph: &mut Graph<'_, T>, x: Var, seq: usize) -> Result<Var> {
        let d = self.width();
        let shape = graph.tape.shape(x);
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::Model(format!(
                "msa expects rows of width {d}, got {shape:?}"
            )));
        }
        let q = self.q.apply(graph, x)?;
        let k = self.k.apply(graph, x)?;
        let v = self.v.apply(graph, x)?;
        let a = graph.tape.attention(q, k, v, seq, self.heads)?;
        self.out.apply(graph, a)
    }

    pub fn mlp(&self, graph: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(graph, x)?;
        let h = graph.tape.gelu(h)?;
        self.fc2.apply(graph, h)
    }

    /// Applies the layer. In training mode each residual branch is kept per
    /// example with probability `survival` and rescaled by `1/survival`.
    pub fn forward(
        &self,
        graph: &mut Graph<'_, T>,
        z: Var,
        seq: usize,
        survival: f64,
    ) -> Result<Var> {
        let n = graph.tape.shape(z)[0];
        let h = self.ln1.apply(graph, z)?;
        let h = self.msa(graph, h, seq)?;
        let h = drop_path(graph, h, n / seq, seq, survival)?;
        let y = graph.tape.add(h, z)?;
        let h = self.ln2.apply(graph, y)?;
        let h = self.mlp(graph, h)?;
        let h = drop_path(graph, h, n / seq, seq, survival)?;
        Ok(graph.tape.add(h, y)?)
    }
}

/// Per-example residual-branch dropping (stochastic depth).
fn drop_path<T: Element>(
    graph: &mut Graph<'_, T>,
    branch: Var,
    batch: usize,
    seq: usize,
    survival: f64,
) -> Result<Var> {
    if graph.mode() == Mode::Eval || survival >= 1.0 {
        return Ok(branch);
    }
    let keep_scale = if survival > 0.0 { 1.0 / survival } else { 0.0 };
    let rng = graph.rng().ok_or_else(|| {
        Error::Training("stochastic depth in training mode needs a seeded rng".into())
    })?;
    let mut factors = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let keep = survival > 0.0 && rng.gen::<f64>() < survival;
        let f = T::from_f64_lossy(if keep { keep_scale } else { 0.0 });
        factors.extend(std::iter::repeat_n(f, seq));
    }
    Ok(graph.tape.scale_rows(branch, factors)?)
}

/// Adaptor layers per modality, then layers shared by all modalities, then a
/// final LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack<T> {
    pub adaptors: BTreeMap<Modality, Vec<EncoderLayer<T>>>,
    pub shared: Vec<EncoderLayer<T>>,
    pub final_ln: LayerNormParams<T>,
    /// Drop probability of each residual branch, per input modality.
    pub drop_path: BTreeMap<Modality, f64>,
}

pub(crate) fn shared_prefix(k: usize) -> String {
    format!("shared.layer{k}")
}

pub(crate) fn adaptor_prefix(m: Modality, k: usize) -> String {
    format!("{m}.adapt.layer{k}")
}

pub const FINAL_LN_PREFIX: &str = "encoder.final_ln";

impl<T: Element> EncoderStack<T> {
    /// Randomly initialized stack with `layers` total layers, the first
    /// `adapt_layers` of which are duplicated per modality.
    pub fn random(
        modalities: &[Modality],
        layers: usize,
        adapt_layers: usize,
        width: usize,
        heads: usize,
        mlp_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if adapt_layers > layers {
            return Err(Error::Model(format!(
                "adaptor layers ({adapt_layers}) exceed total layers ({layers})"
            )));
        }
        let mut adaptors = BTreeMap::new();
        for &m in modalities {
            let stack = (0..adapt_layers)
                .map(|k| EncoderLayer::random(&adaptor_prefix(m, k), width, heads, mlp_dim, rng))
                .collect::<Result<Vec<_>>>()?;
            adaptors.insert(m, stack);
        }
        let shared = (adapt_layers..layers)
            .map(|k| EncoderLayer::random(&shared_prefix(k), width, heads, mlp_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adaptors,
            shared,
            final_ln: LayerNormParams::new(FINAL_LN_PREFIX, width),
            drop_path: modalities.iter().map(|&m| (m, 0.0)).collect(),
        })
    }

    pub fn adapt_layers(&self) -> usize {
        self.adaptors.values().next().map_or(0, Vec::len)
    }

    pub fn layers(&self) -> usize {
        self.adapt_layers() + self.shared.len()
    }

    pub fn shared_params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.shared.iter().flat_map(|l| l.params()).collect();
        out.push(&self.final_ln.gamma);
        out.push(&self.final_ln.beta);
        out
    }

    pub fn adaptor_params(&self, m: Modality) -> Vec<&Param<T>> {
        self.adaptors
            .get(&m)
            .map(|ls| ls.iter().flat_map(|l| l.params()).collect())
            .unwrap_or_default()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self
            .adaptors
            .values()
            .flat_map(|ls| ls.iter().flat_map(|l| l.params()))
            .collect();
        out.extend(self.shared_params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self
            .adaptors
            .values_mut()
            .flat_map(|ls| ls.iter_mut().flat_map(|l| l.params_mut()))
            .collect();
        out.extend(self.shared.iter_mut().flat_map(|l| l.params_mut()));
        out.push(&mut self.final_ln.gamma);
        out.push(&mut self.final_ln.beta);
        out
    }

    pub fn survival(&self, m: Modality) -> f64 {
        1.0 - self.drop_path.get(&m).copied().unwrap_or(0.0)
    }

    /// Runs the modality's adaptor layers, the shared layers and the final
    /// LayerNorm over `[B·seq, d]` token rows.
    pub fn encode(&self, graph: &mut Graph<'_, T>, z0: Var, modality: Modality, seq: usize) -> Result<Var> {
        let adaptors = self
            .adaptors
            .get(&modality)
            .ok_or_else(|| Error::Model(format!("encoder has no {modality} branch")))?;
        let survival = self.survival(modality);
        let mut z = z0;
        for layer in adaptors.iter().chain(&self.shared) {
            z = layer.forward(graph, z, seq, survival)?;
        }
        self.final_ln.apply(graph, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(rng: &mut ChaCha8Rng) -> EncoderLayer<f64> {
        EncoderLayer::random("l", 8, 2, 16, rng).unwrap()
    }

    fn rows(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
        normal_tensor([n, 8], 1.0, rng)
    }

    fn run(layer: &EncoderLayer<f64>, z: &Tensor<f64>, seq: usize) -> Tensor<f64> {
        let mut g = Graph::eval().frozen();
        let x = g.input(z.clone());
        let y = layer.forward(&mut g, x, seq, 1.0).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_branches_leave_the_residual_stream_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = layer(&mut rng);
        for p in l.params_mut() {
            if !p.name.contains(".ln") {
                p.value = Tensor::zeros(p.value.shape().to_vec());
            }
        }
        let z = rows(&mut rng, 5);
        assert_eq!(run(&l, &z, 5), z);
    }

    #[test]
    fn zero_survival_drops_both_branches_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = layer(&mut rng);
        let z = rows(&mut rng, 10);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(Mode::Train).with_rng(&mut drop_rng);
        let x = g.input(z.clone());
        let y = l.forward(&mut g, x, 5, 0.0).unwrap();
        assert_eq!(g.value(y), &z);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = layer(&mut rng);
        let z = rows(&mut rng, 5);
        assert_eq!(run(&l, &z, 5), run(&l, &z, 5));
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = layer(&mut rng);
        let z = rows(&mut rng, 1);
        let mut g = Graph::eval().frozen();
        let x = g.input(z.clone());
        let y = l.msa(&mut g, x, 1).unwrap();
        let v = z
            .matmul(&l.v.w.value)
            .unwrap()
            .zip_map(&l.v.b.value.reshape([1, 8]).unwrap(), |a, b| a + b)
            .unwrap();
        let o = v
            .matmul(&l.out.w.value)
            .unwrap()
            .zip_map(&l.out.b.value.reshape([1, 8]).unwrap(), |a, b| a + b)
            .unwrap();
        assert!(g.value(y).max_abs_diff(&o).unwrap() < 1e-12);
    }

    #[test]
    fn zero_value_map_yields_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = layer(&mut rng);
        l.v.w.value = Tensor::zeros([8, 8]);
        l.out.b.value = Tensor::from_fn([8], |i| i as f64);
        let z = rows(&mut rng, 4);
        let mut g = Graph::eval().frozen();
        let x = g.input(z);
        let y = l.msa(&mut g, x, 4).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                assert!((g.value(y).at(&[r, c]) - c as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = layer(&mut rng);
        let z = rows(&mut rng, 5);
        let perm = [3, 0, 4, 1, 2];
        let zp = Tensor::from_fn([5, 8], |i| z.at(&[perm[i / 8], i % 8]));
        let (a, b) = (run(&l, &z, 5), run(&l, &zp, 5));
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((b.at(&[r, c]) - a.at(&[src, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_layers_are_common_to_all_modalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mods = [Modality::Image, Modality::Audio];
        let s = EncoderStack::<f64>::random(&mods, 3, 1, 8, 2, 16, &mut rng).unwrap();
        assert_eq!(s.layers(), 3);
        assert_eq!(s.shared.len(), 2);
        assert_eq!(s.adaptor_params(Modality::Image)[0].name, "image.adapt.layer0.ln1.gamma");
        assert_eq!(s.shared_params()[0].name, "shared.layer1.ln1.gamma");
        let full = EncoderStack::<f64>::random(&mods, 2, 2, 8, 2, 16, &mut rng).unwrap();
        assert!(full.shared.is_empty());
        assert!(EncoderStack::<f64>::random(&mods, 2, 3, 8, 2, 16, &mut rng).is_err());
        assert!(EncoderLayer::<f64>::random("x", 9, 2, 4, &mut rng).is_err());
    }
}
