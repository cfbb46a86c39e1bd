//! Shared helpers for the integration and acceptance suites.

#![allow(dead_code)]

use neq_core::autodiff::{backward, forward_train, Graph, Grads};
use neq_core::model::{ArchSpec, FreezeMask, LayerParams, Model};
use neq_core::ops;
use neq_core::scalar::Scalar;
use neq_core::tensor::Tensor;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameter roles a layer can expose, in a fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
}

/// Flat list of (layer, role, element count) for all trainable tensors.
pub fn trainable_slots<T: Scalar>(model: &Model<T>) -> Vec<(usize, Role, usize)> {
    let mut out = Vec::new();
    for (li, p) in model.params.iter().enumerate() {
        match p {
            LayerParams::Linear { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                out.push((li, Role::Weight, weight.numel()));
                out.push((li, Role::Bias, bias.numel()));
            }
            LayerParams::BatchNorm2d { gamma, beta, .. } => {
                out.push((li, Role::Weight, gamma.numel()));
                out.push((li, Role::Bias, beta.numel()));
            }
            LayerParams::None => {}
        }
    }
    out
}

pub fn param_tensor_mut<T: Scalar>(model: &mut Model<T>, layer: usize, role: Role) -> &mut Tensor<T> {
    match (&mut model.params[layer], role) {
        (LayerParams::Linear { weight, .. }, Role::Weight)
        | (LayerParams::Conv2d { weight, .. }, Role::Weight) => weight,
        (LayerParams::Linear { bias, .. }, Role::Bias)
        | (LayerParams::Conv2d { bias, .. }, Role::Bias) => bias,
        (LayerParams::BatchNorm2d { gamma, .. }, Role::Weight) => gamma,
        (LayerParams::BatchNorm2d { beta, .. }, Role::Bias) => beta,
        _ => panic!("no such parameter"),
    }
}

/// Loss of the model on one batch, training mode, pure (clones internally).
pub fn loss_of(model: &Model<f64>, graph: &Graph, x: &Tensor<f64>, labels: &[u32]) -> f64 {
    let mut m = model.clone();
    let mask = FreezeMask::all_unfrozen(&m.layers);
    let rec = forward_train(&mut m, graph, x, &mask).expect("forward");
    ops::softmax_cross_entropy_loss(rec.output(graph), labels).expect("loss")
}

/// Analytic gradients with every gate open.
pub fn full_gradients(
    model: &Model<f64>,
    graph: &Graph,
    x: &Tensor<f64>,
    labels: &[u32],
) -> Grads<f64> {
    let mut m = model.clone();
    let mask = FreezeMask::all_unfrozen(&m.layers);
    let rec = forward_train(&mut m, graph, x, &mask).expect("forward");
    let (_, dlogits) = ops::softmax_cross_entropy_with_grad(rec.output(graph), labels).expect("loss");
    backward(&m, graph, &rec, &dlogits, &mask).expect("backward")
}

/// Central finite difference for one parameter element.
pub fn numeric_grad(
    model: &Model<f64>,
    graph: &Graph,
    x: &Tensor<f64>,
    labels: &[u32],
    layer: usize,
    role: Role,
    idx: usize,
    h: f64,
) -> f64 {
    let mut plus = model.clone();
    param_tensor_mut(&mut plus, layer, role).data_mut()[idx] += h;
    let mut minus = model.clone();
    param_tensor_mut(&mut minus, layer, role).data_mut()[idx] -= h;
    (loss_of(&plus, graph, x, labels) - loss_of(&minus, graph, x, labels)) / (2.0 * h)
}

/// Look up the analytic gradient for one (layer, role, flat index) from the
/// packed representation.
pub fn analytic_at(grads: &Grads<f64>, model: &Model<f64>, layer: usize, role: Role, idx: usize) -> f64 {
    let g = grads.by_layer[layer].as_ref().expect("gradient present");
    let row_width = match role {
        Role::Weight => {
            let w = match &model.params[layer] {
                LayerParams::Linear { weight, .. } | LayerParams::Conv2d { weight, .. } => weight,
                LayerParams::BatchNorm2d { gamma, .. } => gamma,
                LayerParams::None => unreachable!(),
            };
            w.numel() / w.shape()[0].max(1)
        }
        Role::Bias => 1,
    };
    let row = idx / row_width;
    let col = idx % row_width;
    let packed = g.rows.iter().position(|&r| r == row).expect("row is open");
    match role {
        Role::Weight => g.weight.data()[packed * row_width + col],
        Role::Bias => g.bias.data()[packed],
    }
}

/// Gradient check over sampled elements of every trainable tensor.
/// Returns the worst relative error encountered.
pub fn gradcheck_model(
    arch: &ArchSpec,
    seed: u64,
    batch: usize,
    per_slot: usize,
) -> f64 {
    let model = neq_core::model::build_model::<f64>(arch, seed).expect("build");
    let graph = Graph::compile(&model.layers).expect("compile");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);

    let mut in_shape = vec![batch];
    in_shape.extend(model.input_shape());
    let n: usize = in_shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(&in_shape, data).unwrap();
    let classes = match arch {
        ArchSpec::Mlp { classes, .. }
        | ArchSpec::SmallCnn { classes, .. }
        | ArchSpec::SmallResnet { classes, .. } => *classes,
    };
    let labels: Vec<u32> = (0..batch).map(|_| rng.gen_range(0..classes as u32)).collect();

    let grads = full_gradients(&model, &graph, &x, &labels);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (layer, role, count) in trainable_slots(&model) {
        for _ in 0..per_slot.min(count) {
            let idx = rng.gen_range(0..count);
            let a = analytic_at(&grads, &model, layer, role, idx);
            let n = numeric_grad(&model, &graph, &x, &labels, layer, role, idx, h);
            let denom = a.abs().max(n.abs());
            let rel = if denom > 1e-5 { (a - n).abs() / denom } else { (a - n).abs() / 1e-5 };
            worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "gradient mismatch at layer {layer} ({role:?})[{idx}]: analytic {a}, numeric {n}, rel {rel}"
            );
        }
    }
    worst
}
