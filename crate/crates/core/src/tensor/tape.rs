use super::kernels;
use super::{numel, Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    ScaleRows {
        x: Var,
        factors: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    AssembleSequence {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are computed eagerly when an op is appended. The tape is
/// append-only, so the node order is already a topological order.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every grad-tracking leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    replayed: usize,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a grad-tracking leaf. `None` for constants and interior nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes visited by the reverse sweep.
    pub fn replayed(&self) -> usize {
        self.replayed
    }
}

fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Splits a shape around `axis` into (outer, axis extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn softmax_along<T: Element>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(data[at(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    out
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a leaf. Gradients are reported only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let out = av.matmul(bv)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// Adds a vector to every row (last axis).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let bs = self.node(bias)?.value.shape().to_vec();
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: xs,
                right: bs,
            });
        }
        let n = bs[0];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts(xs, data), Op::AddBias(x, bias), g))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.node(x)?.value.scale(s);
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Scale(x, s), g))
    }

    /// Multiplies row `r` (last axis) by `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (rows, cols) = xv.rows_cols();
        if factors.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: xv.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / cols])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::ScaleRows { x, factors }, g))
    }

    /// Normalizes each row over the last axis with population variance, then
    /// applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (rows, d) = xv.rows_cols();
        for (name, p) in [("layer_norm gamma", gamma), ("layer_norm beta", beta)] {
            let ps = self.node(p)?.value.shape();
            if ps != [d] || xv.rank() == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    left: xv.shape().to_vec(),
                    right: ps.to_vec(),
                });
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let dt = T::from_usize(d).expect("width fits");
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dt;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Exact GELU, `x·Φ(x)` with the erf form of the normal CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(gelu_scalar);
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gelu(x), g))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if axis >= xv.rank() {
            return Err(TensorError::Axis {
                axis,
                shape: xv.shape().to_vec(),
            });
        }
        let data = softmax_along(xv.data(), xv.shape(), axis);
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, g))
    }

    /// Multi-head scaled dot-product attention over a batch of sequences.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]` with each sequence stored as `seq`
    /// consecutive rows; head `h` uses columns `h·d/heads .. (h+1)·d/heads`.
    /// Scores are scaled by `1/sqrt(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let qs = self.node(q)?.value.shape().to_vec();
        for other in [k, v] {
            let s = self.node(other)?.value.shape();
            if s != qs.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    left: qs,
                    right: s.to_vec(),
                });
            }
        }
        if qs.len() != 2 {
            return Err(TensorError::Rank {
                op: "attention",
                expected: 2,
                shape: qs,
            });
        }
        let (rows, d) = (qs[0], qs[1]);
        if seq == 0 || rows % seq != 0 || heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: {rows} rows of width {d} cannot split into sequences of {seq} with {heads} heads"
            )));
        }
        let batch = rows / seq;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qrow = &qd[(b * seq + i) * d + col..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..seq {
                        let krow = &kd[(b * seq + j) * d + col..][..dh];
                        let s = qrow
                            .iter()
                            .zip(krow)
                            .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
                            * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total = total + *s;
                    }
                    let prow = &mut probs[pbase + i * seq..][..seq];
                    for (p, &s) in prow.iter_mut().zip(&scores) {
                        *p = s / total;
                    }
                    let orow = &mut out[(b * seq + i) * d + col..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(b * seq + j) * d + col..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o = *o + p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(qs, out);
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            g,
        ))
    }

    /// Builds `[batch·(N+1), d]` token sequences: row 0 of each sequence is
    /// `cls + pos[0]`, row `i+1` is `patches[b·N + i] + pos[i+1]`.
    pub fn assemble_sequence(
        &mut self,
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    ) -> Result<Var> {
        let ps = self.node(patches)?.value.shape().to_vec();
        let cs = self.node(cls)?.value.shape().to_vec();
        let pos_s = self.node(pos)?.value.shape().to_vec();
        let mismatch = |right: Vec<usize>| TensorError::ShapeMismatch {
            op: "assemble_sequence",
            left: ps.clone(),
            right,
        };
        if ps.len() != 2 || batch == 0 || ps[0] % batch != 0 {
            return Err(mismatch(vec![batch]));
        }
        let (n, d) = (ps[0] / batch, ps[1]);
        if cs != [d] {
            return Err(mismatch(cs));
        }
        if pos_s != [n + 1, d] {
            return Err(mismatch(pos_s));
        }
        let (pd, cd, posd) = (
            self.value(patches).data(),
            self.value(cls).data(),
            self.value(pos).data(),
        );
        let seq = n + 1;
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for t in 0..seq {
                let dst = &mut out[(b * seq + t) * d..][..d];
                let src = if t == 0 {
                    cd
                } else {
                    &pd[(b * n + t - 1) * d..][..d]
                };
                let prow = &posd[t * d..][..d];
                for ((o, &s), &p) in dst.iter_mut().zip(src).zip(prow) {
                    *o = s + p;
                }
            }
        }
        let out = Tensor::from_parts(vec![batch * seq, d], out);
        let g = self.any_grad(&[patches, cls, pos]);
        Ok(self.push(
            out,
            Op::AssembleSequence {
                patches,
                cls,
                pos,
                batch,
            },
            g,
        ))
    }

    /// Gathers rows of a rank-2 tensor.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.rank() != 2 {
            return Err(TensorError::Rank {
                op: "select_rows",
                expected: 2,
                shape: xv.shape().to_vec(),
            });
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(TensorError::Invalid(format!(
                "select_rows: indices {rows:?} invalid for {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            data.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_parts(vec![rows.len(), d], data);
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::SelectRows { x, rows }, g))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self
            .node(x)?
            .value
            .data()
            .iter()
            .fold(T::zero(), |s, &v| s + v);
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), g))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let n = T::from_usize(xv.len()).expect("count");
        let total = xv.data().iter().fold(T::zero(), |s, &v| s + v);
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total / n), Op::Mean(x), g))
    }

    fn check_targets(&self, op: &'static str, logits: Var, targets: &Tensor<T>) -> Result<(usize, usize)> {
        let ls = self.node(logits)?.value.shape();
        if ls.len() != 2 || ls != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: ls.to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        Ok((ls[0], ls[1]))
    }

    /// Mean over rows of `-Σ_c t_c · log softmax(z)_c`. Targets may be soft.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let (b, c) = self.check_targets("softmax_cross_entropy", logits, targets)?;
        let z = self.value(logits);
        let probs = softmax_along(z.data(), z.shape(), 1);
        let mut total = T::zero();
        for r in 0..b {
            let row = &z.data()[r * c..(r + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
            for (j, &zj) in row.iter().enumerate() {
                let t = targets.data()[r * c + j];
                if t != T::zero() {
                    total = total - t * (zj - lse);
                }
            }
        }
        let loss = total / T::from_usize(b).expect("batch");
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Mean over all entries of the binary cross-entropy of `sigmoid(z)`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let (b, c) = self.check_targets("sigmoid_bce", logits, targets)?;
        let z = self.value(logits).data();
        let total = z
            .iter()
            .zip(targets.data())
            .fold(T::zero(), |s, (&zi, &ti)| {
                s + zi.max(T::zero()) - zi * ti + (T::one() + (-zi.abs()).exp()).ln()
            });
        let loss = total / T::from_usize(b * c).expect("count");
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits,
                targets: targets.data().to_vec(),
            },
            g,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node up to and including `loss` is visited once, in reverse
    /// recording order. Grad-tracking leaves that do not influence the loss
    /// receive an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut acc: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        acc[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut replayed = 0;

        for i in (0..=loss.0).rev() {
            replayed += 1;
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = acc[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
                continue;
            };
            self.propagate(node, &g, &mut acc);
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients {
            grads: leaves,
            replayed,
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], acc: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        // Lazily allocated gradient buffer for input `v`.
        fn slot<T: Element>(acc: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
            acc[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let ga = slot(acc, *a, m * k);
                    kernels::matmul_a_bt_acc(g, bv.data(), ga, m, n, k);
                }
                if wants(*b) {
                    let gb = slot(acc, *b, k * n);
                    kernels::matmul_at_b_acc(av.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let s = slot(acc, v, g.len());
                        s.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let s = slot(acc, *a, g.len());
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let s = slot(acc, *b, g.len());
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * av[i];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    let s = slot(acc, *x, g.len());
                    s.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v);
                }
                if wants(*bias) {
                    let n = val(*bias).len();
                    let s = slot(acc, *bias, n);
                    for (i, &v) in g.iter().enumerate() {
                        s[i % n] = s[i % n] + v;
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    let s = slot(acc, *x, g.len());
                    s.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v * *c);
                }
            }
            Op::ScaleRows { x, factors } => {
                if wants(*x) {
                    let cols = g.len() / factors.len();
                    let s = slot(acc, *x, g.len());
                    for (i, &v) in g.iter().enumerate() {
                        s[i] = s[i] + v * factors[i / cols];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let rows = rstd.len();
                let gv = val(*gamma).data();
                if wants(*gamma) {
                    let s = slot(acc, *gamma, d);
                    for (i, &v) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + v * xhat[i];
                    }
                }
                if wants(*beta) {
                    let s = slot(acc, *beta, d);
                    for (i, &v) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + v;
                    }
                }
                if wants(*x) {
                    let dt = T::from_usize(d).expect("width");
                    let s = slot(acc, *x, g.len());
                    for r in 0..rows {
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[r * d + c];
                        }
                        m1 = m1 / dt;
                        m2 = m2 / dt;
                        for (c, &gc) in gv.iter().enumerate() {
                            let i = r * d + c;
                            let dh = g[i] * gc;
                            s[i] = s[i] + rstd[r] * (dh - m1 - xhat[i] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let s = slot(acc, *x, g.len());
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let s = slot(acc, *x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..len).fold(T::zero(), |a, j| a + g[at(j)] * y[at(j)]);
                            for j in 0..len {
                                s[at(j)] = s[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *seq, *heads, probs, acc),
            Op::AssembleSequence {
                patches,
                cls,
                pos,
                batch,
            } => {
                let d = val(*cls).len();
                let seq = val(*pos).shape()[0];
                let n = seq - 1;
                if wants(*patches) {
                    let s = slot(acc, *patches, batch * n * d);
                    for b in 0..*batch {
                        for t in 1..seq {
                            let src = &g[(b * seq + t) * d..][..d];
                            let dst = &mut s[(b * n + t - 1) * d..][..d];
                            dst.iter_mut().zip(src).for_each(|(o, &x)| *o = *o + x);
                        }
                    }
                }
                if wants(*cls) {
                    let s = slot(acc, *cls, d);
                    for b in 0..*batch {
                        let src = &g[b * seq * d..][..d];
                        s.iter_mut().zip(src).for_each(|(o, &x)| *o = *o + x);
                    }
                }
                if wants(*pos) {
                    let s = slot(acc, *pos, seq * d);
                    for b in 0..*batch {
                        let src = &g[b * seq * d..][..seq * d];
                        s.iter_mut().zip(src).for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if wants(*x) {
                    let xv = val(*x);
                    let d = xv.shape()[1];
                    let s = slot(acc, *x, xv.len());
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            s[r * d + c] = s[r * d + c] + g[k * d + c];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    let s = slot(acc, *x, n);
                    s.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    let share = g[0] / T::from_usize(n).expect("count");
                    let s = slot(acc, *x, n);
                    s.iter_mut().for_each(|o| *o = *o + share);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let shape = val(*logits).shape();
                    let (b, c) = (shape[0], shape[1]);
                    let scale = g[0] / T::from_usize(b).expect("batch");
                    let s = slot(acc, *logits, b * c);
                    for r in 0..b {
                        let tsum = targets[r * c..(r + 1) * c]
                            .iter()
                            .fold(T::zero(), |a, &t| a + t);
                        for j in 0..c {
                            let i = r * c + j;
                            s[i] = s[i] + scale * (tsum * probs[i] - targets[i]);
                        }
                    }
                }
            }
            Op::SigmoidBce { logits, targets } => {
                if wants(*logits) {
                    let z = val(*logits).data();
                    let scale = g[0] / T::from_usize(z.len()).expect("count");
                    let s = slot(acc, *logits, z.len());
                    for i in 0..z.len() {
                        let sig = T::one() / (T::one() + (-z[i]).exp());
                        s[i] = s[i] + scale * (sig - targets[i]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[T],
        acc: &mut [Option<Vec<T>>],
    ) {
        let qv = &self.nodes[q.0].value;
        let (rows, d) = (qv.shape()[0], qv.shape()[1]);
        let batch = rows / seq;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let (qd, kd, vd) = (
            qv.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut gq = vec![T::zero(); rows * d];
        let mut gk = vec![T::zero(); rows * d];
        let mut gv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let gi = &g[(b * seq + i) * d + col..][..dh];
                    let prow = &probs[pbase + i * seq..][..seq];
                    // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                    for j in 0..seq {
                        let vrow = &vd[(b * seq + j) * d + col..][..dh];
                        dp[j] = gi.iter().zip(vrow).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        let gvrow = &mut gv[(b * seq + j) * d + col..][..dh];
                        for (o, &x) in gvrow.iter_mut().zip(gi) {
                            *o = *o + prow[j] * x;
                        }
                    }
                    let dot = prow.iter().zip(&dp).fold(T::zero(), |a, (&p, &x)| a + p * x);
                    let qrow = &qd[(b * seq + i) * d + col..][..dh];
                    for j in 0..seq {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = &kd[(b * seq + j) * d + col..][..dh];
                        let gqrow = &mut gq[(b * seq + i) * d + col..][..dh];
                        for (o, &x) in gqrow.iter_mut().zip(krow) {
                            *o = *o + ds * x;
                        }
                        let gkrow = &mut gk[(b * seq + j) * d + col..][..dh];
                        for (o, &x) in gkrow.iter_mut().zip(qrow) {
                            *o = *o + ds * x;
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                let s = acc[var.0].get_or_insert_with(|| vec![T::zero(); rows * d]);
                s.iter_mut().zip(&grad).for_each(|(o, &x)| *o = *o + x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let c = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        let out = tape.matmul(p, c).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([3]));
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        let expect = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, e) in tape.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-6);
        }

        let c = tape.constant(t(&[3], &[4.2, 4.2, 4.2]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));

        let g0 = tape.constant(Tensor::zeros([3]));
        let b5 = tape.constant(Tensor::full([3], 5.0));
        let y = tape.layer_norm(x, g0, b5, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 5.0, 5.0]);

        let wrong = tape.constant(Tensor::ones([4]));
        assert!(tape.layer_norm(x, wrong, b, 1e-6).is_err());
    }

    #[test]
    fn gelu_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, -10.0]));
        let y = tape.gelu(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        // 1·Φ(1) = 0.5·(1 + erf(1/√2)) = 0.841344746...
        assert!((v[1] - 0.841_344_746).abs() < 1e-6);
        assert!(v[2].abs() < 1e-8);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12 && v[1] >= 0.0);

        let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        for (a, e) in tape.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 0.5]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(matches!(tape.softmax(x, 1), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zeroes_unused() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[2], &[3.0, 4.0]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.replayed(), tape.len());
    }

    #[test]
    fn losses_at_zero_logits() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros([1, 10]));
        let mut onehot = vec![0.0; 10];
        onehot[3] = 1.0;
        let l = tape
            .softmax_cross_entropy(z, &t(&[1, 10], &onehot))
            .unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

        let z = tape.param(Tensor::zeros([2, 4]));
        let l = tape.sigmoid_bce(z, &Tensor::full([2, 4], 0.5)).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);

        let z = tape.param(t(&[1, 3], &[60.0, 0.0, 0.0]));
        let l = tape
            .softmax_cross_entropy(z, &t(&[1, 3], &[1.0, 0.0, 0.0]))
            .unwrap();
        assert!(tape.value(l).data()[0] < 1e-20);
    }
}
