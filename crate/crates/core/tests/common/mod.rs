#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use polyvit::data::Dataset;
use polyvit::graph::{Graph, Mode};
use polyvit::model::PolyViT;
use polyvit::tensor::{Tape, Tensor, Var};

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Max relative error between reverse-mode gradients of the scalar built by
/// `f` and central differences, over every element of every input.
pub fn op_fd_error(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).expect("gradient for every input");
        for i in 0..x.len() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] += h;
            let (t1, _, o1) = eval(&shifted);
            let up = t1.value(o1).data()[0];
            shifted[k].data_mut()[i] -= 2.0 * h;
            let (t2, _, o2) = eval(&shifted);
            let down = t2.value(o2).data()[0];
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * h), 1e-6));
        }
    }
    worst
}

/// One minibatch per task: inputs and target rows.
pub struct Batches {
    pub per_task: Vec<(Vec<Tensor<f64>>, Tensor<f64>)>,
}

impl Batches {
    pub fn from_data(data: &[&Dataset], idx: &[usize]) -> Self {
        Self {
            per_task: data.iter().map(|d| (d.inputs(idx), d.targets(idx))).collect(),
        }
    }
}

/// Eval-mode sum of task losses and, optionally, its gradients.
pub fn total_loss(model: &PolyViT<f64>, batches: &Batches, with_grads: bool) -> (f64, polyvit::graph::ParamGrads<f64>) {
    let mut g = Graph::new(Mode::Eval);
    let mut total: Option<Var> = None;
    for (j, (x, y)) in batches.per_task.iter().enumerate() {
        let logits = model.forward(&mut g, j, x).unwrap();
        let l = model.loss(&mut g, j, logits, y).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => g.tape.add(t, l).unwrap(),
        });
    }
    let total = total.unwrap();
    let value = g.value(total).data()[0];
    let grads = if with_grads { g.gradients(total).unwrap() } else { Default::default() };
    (value, grads)
}

/// Largest relative error over all parameter elements, with the offending
/// parameter name and the number of elements checked.
pub fn model_fd_error(model: &PolyViT<f64>, batches: &Batches, h: f64, floor: f64) -> (f64, String, usize) {
    let (_, grads) = total_loss(model, batches, true);
    let mut probe = model.clone();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut worst = (0.0, String::new(), 0);
    for name in names {
        let g = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(model.param(&name).unwrap().value.shape().to_vec()));
        let n = g.len();
        for i in 0..n {
            let orig = set(&mut probe, &name, i, None);
            set(&mut probe, &name, i, Some(orig + h));
            let up = total_loss(&probe, batches, false).0;
            set(&mut probe, &name, i, Some(orig - h));
            let down = total_loss(&probe, batches, false).0;
            set(&mut probe, &name, i, Some(orig));
            let e = rel_err(g.data()[i], (up - down) / (2.0 * h), floor);
            if e > worst.0 {
                worst.0 = e;
                worst.1 = format!("{name}[{i}]");
            }
        }
        worst.2 += n;
    }
    worst
}

fn set(model: &mut PolyViT<f64>, name: &str, i: usize, value: Option<f64>) -> f64 {
    let p = model.params_mut().into_iter().find(|p| p.name == name).unwrap();
    let old = p.value.data()[i];
    if let Some(v) = value {
        p.value.data_mut()[i] = v;
    }
    old
}

/// Test accuracy of a least-squares linear classifier (with bias) fit to
/// one-hot targets on the training features.
pub fn least_squares_accuracy(train: &Tensor<f64>, train_labels: &[u32], test: &Tensor<f64>, test_labels: &[u32], classes: usize) -> f64 {
    let design = |x: &Tensor<f64>| {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        DMatrix::from_fn(n, d + 1, |r, c| if c == d { 1.0 } else { x.data()[r * d + c] })
    };
    let a = design(train);
    let mut y = DMatrix::zeros(train_labels.len(), classes);
    for (r, &l) in train_labels.iter().enumerate() {
        y[(r, l as usize)] = 1.0;
    }
    let ata = a.transpose() * &a + DMatrix::identity(a.ncols(), a.ncols()) * 1e-8;
    let w = ata.cholesky().expect("positive definite").solve(&(a.transpose() * y));
    let scores = design(test) * w;
    let hits = test_labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| {
            let row: DVector<f64> = scores.row(*r).transpose();
            row.argmax().0 == l as usize
        })
        .count();
    hits as f64 / test_labels.len() as f64
}
