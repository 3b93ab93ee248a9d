mod common;

use common::{op_fd_error, rel_err};
use polyvit::encoder::EncoderStack;
use polyvit::graph::{Graph, Mode};
use polyvit::model::{ModelConfig, PolyViT, TaskSpec};
use polyvit::tensor::{Tape, Tensor, Var};
use polyvit::tokenizer::{Geometry, Modality};
use polyvit::trainer::OptimizerState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = t.shape(y).to_vec();
    let w = randn(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = t.constant(w);
    let p = t.mul(y, w).unwrap();
    t.sum(p).unwrap()
}

#[test]
fn matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = [randn(&[3, 4], &mut rng), randn(&[4, 5], &mut rng), randn(&[5], &mut rng)];
    let e = op_fd_error(&xs, H, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        let y = t.add_bias(y, v[2]).unwrap();
        weighted_sum(t, y, 9)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn layer_norm_gelu_and_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs = [randn(&[4, 6], &mut rng), randn(&[6], &mut rng), randn(&[6], &mut rng)];
    let e = op_fd_error(&xs, H, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        let y = t.gelu(y).unwrap();
        let y = t.scale_rows(y, vec![0.5, 1.0, 0.0, 2.0]).unwrap();
        let y = t.scale(y, 3.0).unwrap();
        weighted_sum(t, y, 10)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn softmax_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = [randn(&[3, 5], &mut rng)];
    let e = op_fd_error(&xs, H, |t, v| {
        let y = t.softmax(v[0], 1).unwrap();
        weighted_sum(t, y, 11)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn multi_head_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = [randn(&[6, 4], &mut rng), randn(&[6, 4], &mut rng), randn(&[6, 4], &mut rng)];
    let e = op_fd_error(&xs, H, |t, v| {
        let y = t.attention(v[0], v[1], v[2], 3, 2).unwrap();
        weighted_sum(t, y, 12)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn sequence_assembly_and_row_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = [randn(&[4, 3], &mut rng), randn(&[3], &mut rng), randn(&[3, 3], &mut rng)];
    let e = op_fd_error(&xs, H, |t, v| {
        let y = t.assemble_sequence(v[0], v[1], v[2], 2).unwrap();
        let y = t.select_rows(y, vec![0, 3, 4]).unwrap();
        let m = t.mean(y).unwrap();
        let s = weighted_sum(t, y, 13);
        t.add(s, m).unwrap()
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn losses_with_soft_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let targets = Tensor::from_f64([2, 3], &[0.2, 0.8, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let xs = [randn(&[2, 3], &mut rng)];
    let e = op_fd_error(&xs, H, |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap());
    assert!(e < TOL, "{e}");
    let multi = Tensor::from_f64([2, 3], &[1.0, 0.0, 1.0, 0.5, 0.5, 0.0]).unwrap();
    let e = op_fd_error(&xs, H, |t, v| t.sigmoid_bce(v[0], &multi).unwrap());
    assert!(e < TOL, "{e}");
}

#[test]
fn two_layer_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (d, n) = (16, 5);
    let stack = EncoderStack::<f64>::random(&[Modality::Image], 2, 0, d, 2, 4 * d, &mut rng).unwrap();
    let z0 = randn(&[n, d], &mut rng);
    let weights = randn(&[n, d], &mut rng);
    let loss = |s: &EncoderStack<f64>, z: &Tensor<f64>| {
        let mut g = Graph::new(Mode::Eval);
        let zv = g.tape.param(z.clone());
        let y = s.encode(&mut g, zv, Modality::Image, n).unwrap();
        let w = g.input(weights.clone());
        let p = g.tape.mul(y, w).unwrap();
        let l = g.tape.sum(p).unwrap();
        (g.value(l).data()[0], g.gradients(l).unwrap())
    };
    let (_, grads) = loss(&stack, &z0);
    let mut worst: f64 = 0.0;
    let mut probe = stack.clone();
    let names: Vec<String> = stack.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let g = grads[&name].clone();
        for i in 0..g.len() {
            let p = probe.params_mut().into_iter().find(|p| p.name == name).unwrap();
            let orig = p.value.data()[i];
            p.value.data_mut()[i] = orig + H;
            let up = loss(&probe, &z0).0;
            let p = probe.params_mut().into_iter().find(|p| p.name == name).unwrap();
            p.value.data_mut()[i] = orig - H;
            let down = loss(&probe, &z0).0;
            let p = probe.params_mut().into_iter().find(|p| p.name == name).unwrap();
            p.value.data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * H), 1e-5));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn shared_layers_update_once_per_step_adaptors_only_for_their_modality() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let geoms = [Geometry::image(4, 4, 1, 2, 2).unwrap(), Geometry::audio(4, 4, 2, 2).unwrap()];
    let tasks = vec![
        TaskSpec::new("img", Modality::Image, 2),
        TaskSpec::new("aud", Modality::Audio, 2),
    ];
    let config = ModelConfig {
        layers: 2,
        width: 4,
        heads: 1,
        mlp_dim: 8,
        adapt_layers: 1,
    };
    let mut model = PolyViT::<f64>::random(config, &geoms, tasks, &mut rng).unwrap();
    let mut state = OptimizerState::new(0.9, 2);
    for (j, g) in geoms.iter().enumerate() {
        let x = vec![randn(&g.input, &mut rng), randn(&g.input, &mut rng)];
        let y = Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut graph = Graph::new(Mode::Eval);
        let logits = model.forward(&mut graph, j, &x).unwrap();
        let l = model.loss(&mut graph, j, logits, &y).unwrap();
        let grads = graph.gradients(l).unwrap();
        state.sgd_step(model.params_mut(), &grads, 0.1).unwrap();
    }
    assert_eq!(state.updates["shared.layer1.msa.q_w"], 2);
    assert_eq!(state.updates["image.adapt.layer0.msa.q_w"], 1);
    assert_eq!(state.updates["audio.adapt.layer0.msa.q_w"], 1);
    assert_eq!(state.updates["encoder.final_ln.gamma"], 2);
    assert_eq!(state.updates["task0.head.w"], 1);
}
