//! Reverse-mode differentiation over a recorded forward pass, with
//! per-output-neuron gating of weight-gradient computation.
//!
//! The forward pass executes a straight-line program compiled from the layer
//! list and stores every intermediate value. The backward sweep replays the
//! program in exact reverse order. Gating rules:
//!
//! * weight/bias gradients are computed only for rows/channels whose gate is
//!   open (not frozen), and are returned packed — frozen rows are absent,
//!   not zero-filled;
//! * input gradients for an operation are computed iff some parameterized
//!   operation earlier in the forward order still has an open gate
//!   (the gradient horizon); below that point the sweep terminates.

use crate::error::{Error, Result};
use crate::model::{FreezeMask, LayerKind, LayerParams, LayerSpec, Model};
use crate::ops;
use crate::ops::{BnSaved, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ValId = usize;

#[derive(Clone, Debug)]
enum NodeKind {
    MatMul,
    BiasAdd,
    Conv2d(ConvGeom),
    BatchNorm2d,
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    Flatten,
    SkipSum,
}

#[derive(Clone, Debug)]
struct Node {
    layer: usize,
    kind: NodeKind,
    inputs: Vec<ValId>,
    out: ValId,
}

/// Straight-line program compiled from a layer list.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    n_values: usize,
    output: ValId,
    /// Observation point per layer: the post-activation value when a ReLU
    /// immediately follows, else the layer's own output.
    obs_value: Vec<Option<ValId>>,
}

impl Graph {
    pub fn compile(layers: &[LayerSpec]) -> Result<Graph> {
        let mut nodes: Vec<Node> = Vec::new();
        let mut next_val: ValId = 1; // value 0 is the input
        let mut cur: ValId = 0;
        let mut skips: Vec<ValId> = Vec::new();
        let mut last_node_of_layer: Vec<Option<usize>> = vec![None; layers.len()];

        for (li, l) in layers.iter().enumerate() {
            let mut push = |kind: NodeKind, inputs: Vec<ValId>, next_val: &mut ValId| -> ValId {
                let out = *next_val;
                *next_val += 1;
                nodes.push(Node { layer: li, kind, inputs, out });
                out
            };
            match &l.kind {
                LayerKind::Linear { .. } => {
                    let mm = push(NodeKind::MatMul, vec![cur], &mut next_val);
                    cur = push(NodeKind::BiasAdd, vec![mm], &mut next_val);
                }
                LayerKind::Conv2d { stride, padding, .. } => {
                    let cv = push(
                        NodeKind::Conv2d(ConvGeom { stride: *stride, padding: *padding }),
                        vec![cur],
                        &mut next_val,
                    );
                    cur = push(NodeKind::BiasAdd, vec![cv], &mut next_val);
                }
                LayerKind::BatchNorm2d { .. } => {
                    cur = push(NodeKind::BatchNorm2d, vec![cur], &mut next_val);
                }
                LayerKind::Relu => {
                    cur = push(NodeKind::Relu, vec![cur], &mut next_val);
                }
                LayerKind::MaxPool2d { kernel, stride } => {
                    cur = push(
                        NodeKind::MaxPool2d { kernel: *kernel, stride: *stride },
                        vec![cur],
                        &mut next_val,
                    );
                }
                LayerKind::AvgPool2d { kernel, stride } => {
                    cur = push(
                        NodeKind::AvgPool2d { kernel: *kernel, stride: *stride },
                        vec![cur],
                        &mut next_val,
                    );
                }
                LayerKind::Flatten => {
                    cur = push(NodeKind::Flatten, vec![cur], &mut next_val);
                }
                LayerKind::SkipStart => {
                    skips.push(cur);
                }
                LayerKind::SkipSum => {
                    let saved = skips.pop().ok_or_else(|| {
                        Error::InvalidLayer(format!("`{}` without skip start", l.name))
                    })?;
                    cur = push(NodeKind::SkipSum, vec![cur, saved], &mut next_val);
                }
            }
            if !matches!(l.kind, LayerKind::SkipStart) {
                last_node_of_layer[li] = Some(nodes.len() - 1);
            }
        }

        // Observation points: post-ReLU when one immediately follows.
        let mut obs_value = vec![None; layers.len()];
        for (li, l) in layers.iter().enumerate() {
            if !l.kind.is_parameterized() {
                continue;
            }
            let last = last_node_of_layer[li].expect("parameterized layer emits nodes");
            let own_out = nodes[last].out;
            let mut obs = own_out;
            if let Some(next) = nodes.get(last + 1) {
                if matches!(next.kind, NodeKind::Relu) && next.inputs == [own_out] {
                    obs = next.out;
                }
            }
            obs_value[li] = Some(obs);
        }

        Ok(Graph { nodes, n_values: next_val, output: cur, obs_value })
    }

    pub fn output_value(&self) -> ValId {
        self.output
    }

    pub fn observation_value(&self, layer: usize) -> Option<ValId> {
        self.obs_value.get(layer).copied().flatten()
    }

    /// First node index whose layer is parameterized and has an open gate.
    fn gradient_horizon(&self, layers: &[LayerSpec], mask: &FreezeMask) -> Option<usize> {
        self.nodes.iter().position(|n| {
            layers[n.layer].kind.is_parameterized()
                && matches!(
                    n.kind,
                    NodeKind::MatMul | NodeKind::Conv2d(_) | NodeKind::BatchNorm2d | NodeKind::BiasAdd
                )
                && mask.any_unfrozen(n.layer)
        })
    }
}

/// Forward execution mode. Training mode uses batch statistics in batch norm
/// and updates running statistics for non-frozen channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Saved intermediates of one forward pass.
pub struct Record<T> {
    values: Vec<Option<Tensor<T>>>,
    bn_saved: Vec<Option<BnSaved<T>>>,
    pool_arg: Vec<Option<Vec<u32>>>,
    mode: Mode,
    forward_done: bool,
}

impl<T: Scalar> Record<T> {
    fn new(graph: &Graph, mode: Mode) -> Self {
        Record {
            values: (0..graph.n_values.max(1)).map(|_| None).collect(),
            bn_saved: graph.nodes.iter().map(|_| None).collect(),
            pool_arg: graph.nodes.iter().map(|_| None).collect(),
            mode,
            forward_done: false,
        }
    }

    pub fn value(&self, id: ValId) -> Option<&Tensor<T>> {
        self.values.get(id).and_then(|v| v.as_ref())
    }

    pub fn output<'a>(&'a self, graph: &Graph) -> &'a Tensor<T> {
        self.value(graph.output).expect("forward stores the output")
    }
}

/// Training-mode forward pass. Batch norm normalizes with batch statistics;
/// running statistics are updated only for channels the mask leaves open.
pub fn forward_train<T: Scalar>(
    model: &mut Model<T>,
    graph: &Graph,
    input: &Tensor<T>,
    mask: &FreezeMask,
) -> Result<Record<T>> {
    mask.validate(&model.layers)?;
    let (rec, bn_updates) = run_forward(model, graph, input, Mode::Train)?;
    for (layer, saved, count) in &bn_updates {
        apply_running_stats(model, *layer, saved, *count, mask);
    }
    Ok(rec)
}

/// Evaluation-mode forward pass: batch norm uses running statistics and no
/// state is mutated.
pub fn forward_eval<T: Scalar>(
    model: &Model<T>,
    graph: &Graph,
    input: &Tensor<T>,
) -> Result<Record<T>> {
    let (rec, _) = run_forward(model, graph, input, Mode::Eval)?;
    Ok(rec)
}

fn run_forward<T: Scalar>(
    model: &Model<T>,
    graph: &Graph,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Record<T>, Vec<(usize, BnSaved<T>, usize)>)> {
    let expected: Vec<usize> =
        std::iter::once(input.shape().first().copied().unwrap_or(0))
            .chain(model.input_shape())
            .collect();
    if input.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch { expected, got: input.shape().to_vec() });
    }
    input.assert_finite("input")?;

    let mut rec = Record::new(graph, mode);
    let mut bn_updates = Vec::new();
    rec.values[0] = Some(input.clone());

    for (ni, node) in graph.nodes.iter().enumerate() {
        let x = rec.values[node.inputs[0]].as_ref().expect("input value computed");
        let out = match &node.kind {
            NodeKind::MatMul => {
                let LayerParams::Linear { weight, .. } = &model.params[node.layer] else {
                    unreachable!("matmul node on non-linear layer")
                };
                ops::matmul_forward(x, weight)?
            }
            NodeKind::Conv2d(geom) => {
                let LayerParams::Conv2d { weight, .. } = &model.params[node.layer] else {
                    unreachable!("conv node on non-conv layer")
                };
                ops::conv2d_forward(x, weight, *geom)?
            }
            NodeKind::BiasAdd => {
                let bias = match &model.params[node.layer] {
                    LayerParams::Linear { bias, .. } | LayerParams::Conv2d { bias, .. } => bias,
                    _ => unreachable!("bias node on layer without bias"),
                };
                ops::bias_add_forward(x, bias)?
            }
            NodeKind::BatchNorm2d => {
                let LayerParams::BatchNorm2d { gamma, beta, running_mean, running_var } =
                    &model.params[node.layer]
                else {
                    unreachable!("bn node on non-bn layer")
                };
                match mode {
                    Mode::Train => {
                        let (y, saved) = ops::batchnorm2d_train_forward(x, gamma, beta)?;
                        let count = x.shape()[0] * x.shape()[2] * x.shape()[3];
                        bn_updates.push((node.layer, saved.clone(), count));
                        rec.bn_saved[ni] = Some(saved);
                        y
                    }
                    Mode::Eval => {
                        ops::batchnorm2d_eval_forward(x, gamma, beta, running_mean, running_var)?
                    }
                }
            }
            NodeKind::Relu => ops::relu_forward(x),
            NodeKind::MaxPool2d { kernel, stride } => {
                let (y, arg) = ops::max_pool2d_forward(x, *kernel, *stride)?;
                rec.pool_arg[ni] = Some(arg);
                y
            }
            NodeKind::AvgPool2d { kernel, stride } => ops::avg_pool2d_forward(x, *kernel, *stride)?,
            NodeKind::Flatten => ops::flatten_forward(x),
            NodeKind::SkipSum => {
                let mut y = x.clone();
                let other = rec.values[node.inputs[1]].as_ref().expect("skip value computed");
                if other.shape() != y.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: y.shape().to_vec(),
                        got: other.shape().to_vec(),
                    });
                }
                y.add_assign(other);
                y
            }
        };
        out.assert_finite(&model.layers[node.layer].name)?;
        rec.values[node.out] = Some(out);
    }
    rec.forward_done = true;
    Ok((rec, bn_updates))
}

/// Exponential update of batch-norm running statistics, skipping frozen
/// channels (a frozen neuron's eval-time function must not drift).
fn apply_running_stats<T: Scalar>(
    model: &mut Model<T>,
    layer: usize,
    saved: &BnSaved<T>,
    count: usize,
    mask: &FreezeMask,
) {
    // Unbiased variance for the running estimate, biased for normalization.
    let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    let m = T::from_f64(ops::BN_MOMENTUM);
    let keep = T::from_f64(1.0 - ops::BN_MOMENTUM);
    let frozen: Option<Vec<bool>> = mask.layer(layer).map(|f| f.to_vec());
    let LayerParams::BatchNorm2d { running_mean, running_var, .. } = &mut model.params[layer]
    else {
        unreachable!("running stats on non-bn layer")
    };
    for c in 0..saved.mean.len() {
        if frozen.as_ref().map(|f| f[c]).unwrap_or(false) {
            continue;
        }
        let rm = running_mean.data_mut();
        rm[c] = keep * rm[c] + m * saved.mean[c];
        let rv = running_var.data_mut();
        rv[c] = keep * rv[c] + m * (saved.var[c] * T::from_f64(unbias));
    }
}

/// Packed gradients for one parameterized layer: rows lists the non-frozen
/// neuron indices (ascending); `weight`/`bias` hold only those rows.
/// For batch-norm layers `weight` is d(gamma) and `bias` is d(beta).
#[derive(Clone, Debug)]
pub struct LayerGrad<T> {
    pub rows: Vec<usize>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients keyed by layer index; layers with no open gate are absent.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub by_layer: Vec<Option<LayerGrad<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn is_empty(&self) -> bool {
        self.by_layer.iter().all(|g| g.is_none())
    }
}

/// Reverse sweep over a recorded forward pass.
///
/// `seed_grad` is the gradient of the loss with respect to the program
/// output (for softmax cross-entropy, the logits gradient).
pub fn backward<T: Scalar>(
    model: &Model<T>,
    graph: &Graph,
    record: &Record<T>,
    seed_grad: &Tensor<T>,
    mask: &FreezeMask,
) -> Result<Grads<T>> {
    if !record.forward_done {
        return Err(Error::BackwardBeforeForward);
    }
    if record.mode != Mode::Train {
        return Err(Error::Training("backward requires a training-mode record".into()));
    }
    mask.validate(&model.layers)?;

    let mut grads = Grads { by_layer: (0..model.layers.len()).map(|_| None).collect() };
    let Some(horizon) = graph.gradient_horizon(&model.layers, mask) else {
        // Every gate closed: no weight gradients, no input-gradient work.
        return Ok(grads);
    };

    let out = record.output(graph);
    if seed_grad.shape() != out.shape() {
        return Err(Error::ShapeMismatch {
            expected: out.shape().to_vec(),
            got: seed_grad.shape().to_vec(),
        });
    }

    let mut vgrads: Vec<Option<Tensor<T>>> = (0..record.values.len()).map(|_| None).collect();
    vgrads[graph.output] = Some(seed_grad.clone());

    for (ni, node) in graph.nodes.iter().enumerate().rev() {
        if ni < horizon {
            break;
        }
        let dy = vgrads[node.out].take().expect("output gradient present above the horizon");
        let x = record.values[node.inputs[0]].as_ref().expect("forward stored inputs");
        let need_input = ni > horizon;
        let layer = node.layer;
        let rows = mask.unfrozen_rows(layer, model.layers[layer].kind.neuron_count().unwrap_or(0));

        match &node.kind {
            NodeKind::MatMul => {
                let LayerParams::Linear { weight, .. } = &model.params[layer] else {
                    unreachable!()
                };
                if !rows.is_empty() {
                    let dw = ops::matmul_backward_weight_rows(&dy, x, &rows);
                    stash_weight(&mut grads, layer, rows.clone(), dw);
                }
                if need_input {
                    accumulate(&mut vgrads, node.inputs[0], ops::matmul_backward_input(&dy, weight));
                }
            }
            NodeKind::Conv2d(geom) => {
                let LayerParams::Conv2d { weight, .. } = &model.params[layer] else {
                    unreachable!()
                };
                if !rows.is_empty() {
                    let kernel = (weight.shape()[2], weight.shape()[3]);
                    let dw = ops::conv2d_backward_weight_rows(&dy, x, kernel, *geom, &rows);
                    stash_weight(&mut grads, layer, rows.clone(), dw);
                }
                if need_input {
                    accumulate(
                        &mut vgrads,
                        node.inputs[0],
                        ops::conv2d_backward_input(&dy, weight, x.shape(), *geom),
                    );
                }
            }
            NodeKind::BiasAdd => {
                if !rows.is_empty() {
                    let db = ops::bias_backward_rows(&dy, &rows);
                    stash_bias(&mut grads, layer, rows.clone(), db);
                }
                if need_input {
                    accumulate(&mut vgrads, node.inputs[0], dy);
                }
            }
            NodeKind::BatchNorm2d => {
                let LayerParams::BatchNorm2d { gamma, .. } = &model.params[layer] else {
                    unreachable!()
                };
                let saved = record.bn_saved[ni].as_ref().expect("train forward saved bn stats");
                if need_input {
                    // Full-channel reductions serve both the affine gradients
                    // and the input gradient.
                    let all: Vec<usize> = (0..gamma.numel()).collect();
                    let (s1, s2) = ops::batchnorm2d_reduce(&dy, x, saved, &all);
                    if !rows.is_empty() {
                        let dgamma: Vec<T> = rows.iter().map(|&c| s2[c]).collect();
                        let dbeta: Vec<T> = rows.iter().map(|&c| s1[c]).collect();
                        grads.by_layer[layer] = Some(LayerGrad {
                            rows: rows.clone(),
                            weight: Tensor::from_vec(&[rows.len()], dgamma)?,
                            bias: Tensor::from_vec(&[rows.len()], dbeta)?,
                        });
                    }
                    let dx = ops::batchnorm2d_backward_input(&dy, x, gamma, saved, &s1, &s2);
                    accumulate(&mut vgrads, node.inputs[0], dx);
                } else if !rows.is_empty() {
                    let (s1, s2) = ops::batchnorm2d_reduce(&dy, x, saved, &rows);
                    grads.by_layer[layer] = Some(LayerGrad {
                        rows: rows.clone(),
                        weight: Tensor::from_vec(&[rows.len()], s2)?,
                        bias: Tensor::from_vec(&[rows.len()], s1)?,
                    });
                }
            }
            NodeKind::Relu => {
                if need_input {
                    accumulate(&mut vgrads, node.inputs[0], ops::relu_backward(&dy, x));
                }
            }
            NodeKind::MaxPool2d { .. } => {
                if need_input {
                    let arg = record.pool_arg[ni].as_ref().expect("max pool saved argmax");
                    accumulate(&mut vgrads, node.inputs[0], ops::max_pool2d_backward(&dy, arg, x.shape()));
                }
            }
            NodeKind::AvgPool2d { kernel, stride } => {
                if need_input {
                    accumulate(
                        &mut vgrads,
                        node.inputs[0],
                        ops::avg_pool2d_backward(&dy, *kernel, *stride, x.shape()),
                    );
                }
            }
            NodeKind::Flatten => {
                if need_input {
                    let dx = dy.clone().reshaped(x.shape())?;
                    accumulate(&mut vgrads, node.inputs[0], dx);
                }
            }
            NodeKind::SkipSum => {
                if need_input {
                    accumulate(&mut vgrads, node.inputs[1], dy.clone());
                    accumulate(&mut vgrads, node.inputs[0], dy);
                }
            }
        }
    }
    Ok(grads)
}

fn accumulate<T: Scalar>(vgrads: &mut [Option<Tensor<T>>], id: ValId, g: Tensor<T>) {
    match &mut vgrads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn stash_weight<T: Scalar>(grads: &mut Grads<T>, layer: usize, rows: Vec<usize>, dw: Tensor<T>) {
    match &mut grads.by_layer[layer] {
        Some(g) => {
            debug_assert_eq!(g.rows, rows);
            g.weight = dw;
        }
        slot @ None => {
            *slot = Some(LayerGrad { rows, weight: dw, bias: Tensor::zeros(&[0]) });
        }
    }
}

fn stash_bias<T: Scalar>(grads: &mut Grads<T>, layer: usize, rows: Vec<usize>, db: Tensor<T>) {
    match &mut grads.by_layer[layer] {
        Some(g) => {
            debug_assert_eq!(g.rows, rows);
            g.bias = db;
        }
        slot @ None => {
            *slot = Some(LayerGrad { rows, weight: Tensor::zeros(&[0]), bias: db });
        }
    }
}

/// Post-activation output slice of one neuron over a batch, flattened per
/// sample (sample-major, row-major within the spatial map).
pub fn neuron_output_view<T: Scalar>(
    model: &Model<T>,
    graph: &Graph,
    record: &Record<T>,
    id: crate::model::NeuronId,
) -> Result<Vec<T>> {
    let spec = model
        .layers
        .get(id.layer)
        .ok_or(Error::UnknownNeuron { layer: format!("#{}", id.layer), index: id.index })?;
    if !spec.neq_tracked {
        return Err(Error::UntrackedLayer(spec.name.clone()));
    }
    let n = spec.kind.neuron_count().ok_or_else(|| Error::UntrackedLayer(spec.name.clone()))?;
    if id.index >= n {
        return Err(Error::UnknownNeuron { layer: spec.name.clone(), index: id.index });
    }
    let val_id = graph
        .observation_value(id.layer)
        .ok_or_else(|| Error::UntrackedLayer(spec.name.clone()))?;
    let v = record.value(val_id).ok_or(Error::BackwardBeforeForward)?;
    Ok(slice_neuron(v, id.index))
}

/// Extract one unit/channel from a [B, N] or [B, C, H, W] activation.
pub fn slice_neuron<T: Scalar>(v: &Tensor<T>, index: usize) -> Vec<T> {
    match v.shape() {
        [b_n, n] => (0..*b_n).map(|b| v.data()[b * n + index]).collect(),
        [b_n, c_n, h, w] => {
            let plane = h * w;
            let mut out = Vec::with_capacity(b_n * plane);
            for b in 0..*b_n {
                let base = (b * c_n + index) * plane;
                out.extend_from_slice(&v.data()[base..base + plane]);
            }
            out
        }
        other => panic!("neuron view on rank-{} tensor", other.len()),
    }
}
