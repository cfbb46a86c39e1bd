//! Engine-level behavior: recorded forward passes, gated backward sweeps,
//! neuron views, and determinism.

mod common;

use common::{full_gradients, gradcheck_model};
use neq_core::autodiff::{backward, forward_eval, forward_train, neuron_output_view, Graph};
use neq_core::model::{build_model, ArchSpec, FreezeMask, LayerParams, Model, NeuronId};
use neq_core::ops;
use neq_core::tensor::Tensor;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn identity_model(features: usize) -> Model<f64> {
    Model {
        arch: ArchSpec::Mlp { input: features, hidden: vec![], classes: features },
        layers: vec![],
        params: vec![],
        seed: 0,
    }
}

#[test]
fn identity_record_returns_the_input() {
    let mut m = identity_model(3);
    let graph = Graph::compile(&m.layers).unwrap();
    let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.25]).unwrap();
    let mask = FreezeMask::all_unfrozen(&m.layers);
    let rec = forward_train(&mut m, &graph, &x, &mask).unwrap();
    assert!(rec.output(&graph).bit_eq(&x));
}

#[test]
fn linear_identity_weight_zero_bias_is_identity() {
    let mut m = build_model::<f64>(&ArchSpec::Mlp { input: 3, hidden: vec![], classes: 3 }, 0).unwrap();
    m.params[0] = LayerParams::Linear {
        weight: Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        bias: Tensor::zeros(&[3]),
    };
    let graph = Graph::compile(&m.layers).unwrap();
    let x = Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
    let rec = forward_eval(&m, &graph, &x).unwrap();
    assert!(rec.output(&graph).bit_eq(&x));
}

/// Fixed two-layer net on a fixed input, checked against a straight-line
/// re-computation with explicit arithmetic (no engine calls).
#[test]
fn fixed_two_layer_net_matches_straight_line_evaluation() {
    let mut m =
        build_model::<f64>(&ArchSpec::Mlp { input: 2, hidden: vec![2], classes: 2 }, 0).unwrap();
    m.params[0] = LayerParams::Linear {
        weight: Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
        bias: Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap(),
    };
    m.params[2] = LayerParams::Linear {
        weight: Tensor::from_vec(&[2, 2], vec![1.5, -0.5, 0.75, 1.0]).unwrap(),
        bias: Tensor::from_vec(&[2], vec![0.0, 0.3]).unwrap(),
    };
    let graph = Graph::compile(&m.layers).unwrap();
    let x = Tensor::from_vec(&[1, 2], vec![0.8, -0.4]).unwrap();
    let rec = forward_eval(&m, &graph, &x).unwrap();
    let y = rec.output(&graph).data().to_vec();

    // Straight-line evaluation:
    //   h1 = 0.5*0.8 + (-1.0)*(-0.4) + 0.1  = 0.9
    //   h2 = 2.0*0.8 + 0.25*(-0.4) - 0.2    = 1.3
    //   relu keeps both.
    //   y1 = 1.5*0.9 - 0.5*1.3 + 0.0        = 0.7
    //   y2 = 0.75*0.9 + 1.0*1.3 + 0.3       = 2.275
    let h1: f64 = 0.5 * 0.8 + (-1.0) * (-0.4) + 0.1;
    let h2: f64 = 2.0 * 0.8 + 0.25 * (-0.4) + (-0.2);
    let (h1, h2) = (h1.max(0.0), h2.max(0.0));
    let y1 = 1.5 * h1 + (-0.5) * h2 + 0.0;
    let y2 = 0.75 * h1 + 1.0 * h2 + 0.3;
    assert!((y[0] - y1).abs() < 1e-15, "{} vs {y1}", y[0]);
    assert!((y[1] - y2).abs() < 1e-15, "{} vs {y2}", y[1]);
}

/// f(w) = w^2 realized as a linear map y = w * 1 with the loss gradient
/// d(y^2)/dy = 2y seeded into the backward sweep: dL/dw = 2y * x = 6.
#[test]
fn scalar_square_function_gradient_is_six() {
    let mut m = build_model::<f64>(&ArchSpec::Mlp { input: 1, hidden: vec![], classes: 1 }, 0).unwrap();
    m.params[0] = LayerParams::Linear {
        weight: Tensor::from_vec(&[1, 1], vec![3.0]).unwrap(),
        bias: Tensor::zeros(&[1]),
    };
    let graph = Graph::compile(&m.layers).unwrap();
    let x = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    let mask = FreezeMask::all_unfrozen(&m.layers);
    let rec = forward_train(&mut m, &graph, &x, &mask).unwrap();
    let y = rec.output(&graph).data()[0];
    assert_eq!(y, 3.0);
    let seed = Tensor::from_vec(&[1, 1], vec![2.0 * y]).unwrap();
    let grads = backward(&m, &graph, &rec, &seed, &mask).unwrap();
    let g = grads.by_layer[0].as_ref().unwrap();
    assert_eq!(g.weight.data()[0], 6.0);
}

#[test]
fn fully_frozen_backward_returns_empty_gradients() {
    let arch = ArchSpec::SmallCnn { in_shape: [1, 8, 8], channels: vec![3], classes: 2 };
    let mut m = build_model::<f64>(&arch, 1).unwrap();
    let graph = Graph::compile(&m.layers).unwrap();
    let mut mask = FreezeMask::all_unfrozen(&m.layers);
    for (li, l) in m.layers.clone().iter().enumerate() {
        if let Some(n) = l.kind.neuron_count() {
            for i in 0..n {
                mask.set(NeuronId { layer: li, index: i }, true);
            }
        }
    }
    let x = Tensor::filled(&[2, 1, 8, 8], 0.5);
    let rec = forward_train(&mut m, &graph, &x, &mask).unwrap();
    let seed = Tensor::filled(&[2, 2], 1.0);
    let grads = backward(&m, &graph, &rec, &seed, &mask).unwrap();
    assert!(grads.is_empty());
}

#[test]
fn backward_requires_training_mode_record() {
    let arch = ArchSpec::Mlp { input: 2, hidden: vec![2], classes: 2 };
    let m = build_model::<f64>(&arch, 0).unwrap();
    let graph = Graph::compile(&m.layers).unwrap();
    let x = Tensor::filled(&[1, 2], 0.3);
    let rec = forward_eval(&m, &graph, &x).unwrap();
    let seed = Tensor::filled(&[1, 2], 1.0);
    let mask = FreezeMask::all_unfrozen(&m.layers);
    assert!(backward(&m, &graph, &rec, &seed, &mask).is_err());
}

#[test]
fn gate_length_mismatch_is_rejected() {
    let arch = ArchSpec::Mlp { input: 2, hidden: vec![2], classes: 2 };
    let mut m = build_model::<f64>(&arch, 0).unwrap();
    let graph = Graph::compile(&m.layers).unwrap();
    let other = build_model::<f64>(&ArchSpec::Mlp { input: 2, hidden: vec![5], classes: 2 }, 0).unwrap();
    let bad_mask = FreezeMask::all_unfrozen(&other.layers);
    let x = Tensor::filled(&[1, 2], 0.3);
    assert!(forward_train(&mut m, &graph, &x, &bad_mask).is_err());
}

#[test]
fn non_finite_input_is_rejected() {
    let arch = ArchSpec::Mlp { input: 2, hidden: vec![2], classes: 2 };
    let mut m = build_model::<f64>(&arch, 0).unwrap();
    let graph = Graph::compile(&m.layers).unwrap();
    let x = Tensor::from_vec(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
    let mask = FreezeMask::all_unfrozen(&m.layers);
    assert!(forward_train(&mut m, &graph, &x, &mask).is_err());
}

/// Gating soundness: gradients of open rows are bit-identical to the same
/// rows of a fully open backward on the same record.
#[test]
fn gated_gradients_are_bitwise_slices_of_ungated() {
    for seed in 0..8u64 {
        let arch = ArchSpec::SmallCnn { in_shape: [1, 8, 8], channels: vec![3, 4], classes: 3 };
        let mut m = build_model::<f32>(&arch, seed).unwrap();
        let graph = Graph::compile(&m.layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7 + 1);
        let x = Tensor::from_vec(
            &[3, 1, 8, 8],
            (0..3 * 64).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap();

        let open = FreezeMask::all_unfrozen(&m.layers);
        let mut mask = FreezeMask::all_unfrozen(&m.layers);
        for id in m.tracked_neurons() {
            if rng.gen_bool(0.5) {
                mask.set(id, true);
            }
        }

        let rec = forward_train(&mut m, &graph, &x, &open).unwrap();
        let logits = rec.output(&graph);
        let (_, dlogits) = ops::softmax_cross_entropy_with_grad(logits, &[0, 1, 2]).unwrap();
        let full = backward(&m, &graph, &rec, &dlogits, &open).unwrap();
        let gated = backward(&m, &graph, &rec, &dlogits, &mask).unwrap();

        for li in 0..m.layers.len() {
            let Some(g) = gated.by_layer[li].as_ref() else { continue };
            let f = full.by_layer[li].as_ref().expect("full backward covers all layers");
            let row_width = g.weight.numel() / g.rows.len().max(1);
            for (pi, &row) in g.rows.iter().enumerate() {
                let fi = f.rows.iter().position(|&r| r == row).unwrap();
                for c in 0..row_width {
                    assert_eq!(
                        g.weight.data()[pi * row_width + c].to_bits(),
                        f.weight.data()[fi * row_width + c].to_bits(),
                        "layer {li} row {row} col {c}"
                    );
                }
                assert_eq!(g.bias.data()[pi].to_bits(), f.bias.data()[fi].to_bits());
            }
        }
    }
}

#[test]
fn forward_backward_are_bit_deterministic() {
    let arch = ArchSpec::SmallResnet {
        in_shape: [1, 8, 8],
        widths: vec![2, 3],
        blocks_per_stage: 1,
        classes: 3,
    };
    let run = |seed: u64| -> (Vec<u64>, Vec<u64>) {
        let mut m = build_model::<f32>(&arch, seed).unwrap();
        let graph = Graph::compile(&m.layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::from_vec(
            &[2, 1, 8, 8],
            (0..2 * 64).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let mask = FreezeMask::all_unfrozen(&m.layers);
        let rec = forward_train(&mut m, &graph, &x, &mask).unwrap();
        let logits = rec.output(&graph);
        let (_, d) = ops::softmax_cross_entropy_with_grad(logits, &[0, 1]).unwrap();
        let grads = backward(&m, &graph, &rec, &d, &mask).unwrap();
        let out_bits = logits.data().iter().map(|v| v.to_bits() as u64).collect();
        let mut grad_bits = Vec::new();
        for g in grads.by_layer.iter().flatten() {
            grad_bits.extend(g.weight.data().iter().map(|v| v.to_bits() as u64));
            grad_bits.extend(g.bias.data().iter().map(|v| v.to_bits() as u64));
        }
        (out_bits, grad_bits)
    };
    assert_eq!(run(5), run(5));
}

#[test]
fn neuron_view_shapes_and_order() {
    // Linear unit on a batch of one: a single scalar.
    let arch = ArchSpec::Mlp { input: 2, hidden: vec![3], classes: 2 };
    let m = build_model::<f64>(&arch, 3).unwrap();
    let graph = Graph::compile(&m.layers).unwrap();
    let x = Tensor::filled(&[1, 2], 0.7);
    let rec = forward_eval(&m, &graph, &x).unwrap();
    let v = neuron_output_view(&m, &graph, &rec, NeuronId { layer: 0, index: 1 }).unwrap();
    assert_eq!(v.len(), 1);

    // Conv channel on a 2-sample batch with 4x4 maps: 32 values,
    // sample-major then row-major.
    let mut m = build_model::<f64>(
        &ArchSpec::SmallCnn { in_shape: [1, 4, 4], channels: vec![2], classes: 2 },
        0,
    )
    .unwrap();
    // Make conv1 an identity map on channel 0 and constant 2x on channel 1.
    let mut w = Tensor::zeros(&[2, 1, 3, 3]);
    w.data_mut()[4] = 1.0; // center tap, channel 0
    w.data_mut()[9 + 4] = 2.0; // center tap, channel 1
    m.params[0] = LayerParams::Conv2d { weight: w, bias: Tensor::zeros(&[2]) };
    let graph = Graph::compile(&m.layers).unwrap();
    let data: Vec<f64> = (0..32).map(f64::from).collect();
    let x = Tensor::from_vec(&[2, 1, 4, 4], data.clone()).unwrap();
    let rec = forward_eval(&m, &graph, &x).unwrap();
    // conv1 is observed at its own output (batch norm follows, not ReLU).
    let v = neuron_output_view(&m, &graph, &rec, NeuronId { layer: 0, index: 0 }).unwrap();
    assert_eq!(v.len(), 32);
    assert_eq!(v, data); // identity kernel, sample-major row-major
    let v1 = neuron_output_view(&m, &graph, &rec, NeuronId { layer: 0, index: 1 }).unwrap();
    let doubled: Vec<f64> = data.iter().map(|d| d * 2.0).collect();
    assert_eq!(v1, doubled);
}

#[test]
fn neuron_view_rejects_untracked_and_bad_indices() {
    let arch = ArchSpec::Mlp { input: 2, hidden: vec![3], classes: 2 };
    let m = build_model::<f64>(&arch, 3).unwrap();
    let graph = Graph::compile(&m.layers).unwrap();
    let x = Tensor::filled(&[1, 2], 0.7);
    let rec = forward_eval(&m, &graph, &x).unwrap();
    let classifier = m.layer_by_name("classifier").unwrap();
    assert!(neuron_output_view(&m, &graph, &rec, NeuronId { layer: classifier, index: 0 }).is_err());
    assert!(neuron_output_view(&m, &graph, &rec, NeuronId { layer: 0, index: 99 }).is_err());
}

#[test]
fn observation_point_is_post_relu_when_relu_follows() {
    // In the MLP, fc1 is followed by relu1: negative pre-activations must
    // not appear in the observed values.
    let arch = ArchSpec::Mlp { input: 4, hidden: vec![8], classes: 2 };
    let m = build_model::<f64>(&arch, 11).unwrap();
    let graph = Graph::compile(&m.layers).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_vec(&[16, 4], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let rec = forward_eval(&m, &graph, &x).unwrap();
    for i in 0..8 {
        let v = neuron_output_view(&m, &graph, &rec, NeuronId { layer: 0, index: i }).unwrap();
        assert!(v.iter().all(|&y| y >= 0.0));
    }
}

/// Per-primitive gradient spot checks on small dedicated architectures.
#[test]
fn gradcheck_primitives_spot() {
    // Plain linear stack.
    gradcheck_model(&ArchSpec::Mlp { input: 5, hidden: vec![4, 3], classes: 3 }, 7, 3, 6);
    // Conv + bn + pool stack.
    gradcheck_model(
        &ArchSpec::SmallCnn { in_shape: [2, 6, 6], channels: vec![3], classes: 2 },
        13,
        3,
        6,
    );
}

#[test]
fn gradcheck_residual_spot() {
    gradcheck_model(
        &ArchSpec::SmallResnet { in_shape: [1, 8, 8], widths: vec![2, 3], blocks_per_stage: 1, classes: 2 },
        21,
        2,
        5,
    );
}

/// Scaling a neuron's parameters scales its raw probe outputs; signature,
/// phi, and the freeze decision must not move.
#[test]
fn parameter_scaling_leaves_signatures_invariant() {
    use neq_core::tracker::{extract_signatures, phi};

    let arch = ArchSpec::Mlp { input: 4, hidden: vec![6], classes: 3 };
    let m0 = build_model::<f64>(&arch, 5).unwrap();
    let graph = Graph::compile(&m0.layers).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let probe =
        Tensor::from_vec(&[10, 4], (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

    let base = extract_signatures(&m0, &graph, &probe, 1).unwrap();
    for lambda in [0.1, 3.7, 1000.0] {
        let mut m = m0.clone();
        // Scale unit 2 of fc1: weight row and bias entry.
        if let LayerParams::Linear { weight, bias } = &mut m.params[0] {
            let w = weight.shape()[1];
            for c in 0..w {
                weight.data_mut()[2 * w + c] *= lambda;
            }
            bias.data_mut()[2] *= lambda;
        }
        let scaled = extract_signatures(&m, &graph, &probe, 2).unwrap();
        let i = m.tracked_neurons().iter().position(|n| n.index == 2).unwrap();
        // Cross-epoch phi between base and scaled signature of the same
        // neuron: must be 1 within 1e-12.
        let p = phi(&scaled[i], &base[i]).unwrap();
        assert!((p - 1.0).abs() < 1e-12, "lambda {lambda}: phi {p}");
        for (a, b) in base[i].values.iter().zip(scaled[i].values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Full gradients exist for every parameterized layer when nothing is
/// frozen, and packed rows cover the whole layer.
#[test]
fn full_backward_covers_every_layer() {
    let arch = ArchSpec::SmallCnn { in_shape: [1, 6, 6], channels: vec![2, 3], classes: 2 };
    let m = build_model::<f64>(&arch, 2).unwrap();
    let graph = Graph::compile(&m.layers).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x =
        Tensor::from_vec(&[2, 1, 6, 6], (0..72).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let grads = full_gradients(&m, &graph, &x, &[0, 1]);
    for (li, l) in m.layers.iter().enumerate() {
        if let Some(n) = l.kind.neuron_count() {
            let g = grads.by_layer[li].as_ref().expect("present");
            assert_eq!(g.rows, (0..n).collect::<Vec<_>>());
        }
    }
}
