//! Layer and model definitions.
//!
//! A model is an ordered list of layers; forward order is the list order.
//! "Neuron" means an output unit of a fully-connected layer or an output
//! channel of a convolution / batch-norm layer. The final classifier layer
//! is excluded from tracking by default.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{write_container, ContainerReader};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a layer within the model's layer list.
pub type LayerIndex = usize;

/// One neuron: a (layer, output unit/channel) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NeuronId {
    pub layer: LayerIndex,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Linear { in_features: usize, out_features: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm2d { channels: usize },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    Flatten,
    /// Remembers the current activation for a later `SkipSum` (identity shortcut).
    SkipStart,
    /// Adds the remembered activation back in.
    SkipSum,
}

impl LayerKind {
    /// Output units (fully-connected) or output channels (conv, batch norm).
    pub fn neuron_count(&self) -> Option<usize> {
        match self {
            LayerKind::Linear { out_features, .. } => Some(*out_features),
            LayerKind::Conv2d { out_channels, .. } => Some(*out_channels),
            LayerKind::BatchNorm2d { channels } => Some(*channels),
            _ => None,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        self.neuron_count().is_some()
    }
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub neq_tracked: bool,
}

/// Parameters of one layer, keyed by role.
#[derive(Clone, Debug)]
pub enum LayerParams<T> {
    Linear { weight: Tensor<T>, bias: Tensor<T> },
    Conv2d { weight: Tensor<T>, bias: Tensor<T> },
    BatchNorm2d { gamma: Tensor<T>, beta: Tensor<T>, running_mean: Tensor<T>, running_var: Tensor<T> },
    None,
}

impl<T: Scalar> LayerParams<T> {
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            LayerParams::Linear { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            LayerParams::BatchNorm2d { gamma, beta, running_mean, running_var } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
            LayerParams::None => Vec::new(),
        }
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        match self {
            LayerParams::Linear { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                weight.numel() + bias.numel()
            }
            LayerParams::BatchNorm2d { gamma, beta, .. } => gamma.numel() + beta.numel(),
            LayerParams::None => 0,
        }
    }

    /// Trainable parameters belonging to one neuron (row / channel).
    pub fn params_per_neuron(&self) -> usize {
        match self {
            LayerParams::Linear { weight, .. } => weight.shape()[1] + 1,
            LayerParams::Conv2d { weight, .. } => {
                weight.shape()[1] * weight.shape()[2] * weight.shape()[3] + 1
            }
            LayerParams::BatchNorm2d { .. } => 2,
            LayerParams::None => 0,
        }
    }
}

// ── Architectures ───────────────────────────────────────────────────

/// Desk-scale reference architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    /// Fully-connected net: input -> hidden... -> classes, ReLU between.
    Mlp { input: usize, hidden: Vec<usize>, classes: usize },
    /// conv3x3 -> bn -> relu -> maxpool2 per stage, then flatten -> classifier.
    SmallCnn { in_shape: [usize; 3], channels: Vec<usize>, classes: usize },
    /// Residual stages with identity shortcuts only; widths per stage.
    SmallResnet { in_shape: [usize; 3], widths: Vec<usize>, blocks_per_stage: usize, classes: usize },
}

impl ArchSpec {
    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ArchSpec::Mlp { input, .. } => vec![*input],
            ArchSpec::SmallCnn { in_shape, .. } | ArchSpec::SmallResnet { in_shape, .. } => {
                in_shape.to_vec()
            }
        }
    }
}

// ── Model ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: ArchSpec,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<LayerParams<T>>,
    pub seed: u64,
}

/// Build a model with deterministic Kaiming-style initialization.
pub fn build_model<T: Scalar>(arch: &ArchSpec, seed: u64) -> Result<Model<T>> {
    let layers = plan_layers(arch)?;
    // Validate that the layer plan composes: compute the output shapes once.
    let shapes = layer_output_shapes(&layers, &arch.input_shape())?;
    let last = shapes.last().cloned().unwrap_or_else(|| arch.input_shape());
    let classes = match arch {
        ArchSpec::Mlp { classes, .. }
        | ArchSpec::SmallCnn { classes, .. }
        | ArchSpec::SmallResnet { classes, .. } => *classes,
    };
    if last != vec![classes] {
        return Err(Error::InvalidLayer(format!(
            "architecture output shape {last:?} does not match {classes} classes"
        )));
    }

    let mut rng = rng::substream(seed, rng::Stream::Init, 0);
    let params = layers.iter().map(|l| init_params::<T>(&l.kind, &mut rng)).collect();
    Ok(Model { arch: arch.clone(), layers, params, seed })
}

fn init_params<T: Scalar>(kind: &LayerKind, rng: &mut impl Rng) -> LayerParams<T> {
    let mut normal = |n: usize, std: f64| -> Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect()
    };
    match *kind {
        LayerKind::Linear { in_features, out_features } => {
            let std = (2.0 / in_features as f64).sqrt();
            LayerParams::Linear {
                weight: Tensor::from_vec(&[out_features, in_features], normal(out_features * in_features, std))
                    .expect("init shape"),
                bias: Tensor::zeros(&[out_features]),
            }
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
            let fan_in = in_channels * kernel * kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            LayerParams::Conv2d {
                weight: Tensor::from_vec(
                    &[out_channels, in_channels, kernel, kernel],
                    normal(out_channels * fan_in, std),
                )
                .expect("init shape"),
                bias: Tensor::zeros(&[out_channels]),
            }
        }
        LayerKind::BatchNorm2d { channels } => LayerParams::BatchNorm2d {
            gamma: Tensor::filled(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::ONE),
        },
        _ => LayerParams::None,
    }
}

fn plan_layers(arch: &ArchSpec) -> Result<Vec<LayerSpec>> {
    let mut layers = Vec::new();
    let mut push = |name: String, kind: LayerKind, tracked: bool| {
        layers.push(LayerSpec { name, kind, neq_tracked: tracked });
    };
    match arch {
        ArchSpec::Mlp { input, hidden, classes } => {
            if *input == 0 || *classes == 0 || hidden.iter().any(|&h| h == 0) {
                return Err(Error::InvalidLayer("mlp dimensions must be positive".into()));
            }
            let mut prev = *input;
            for (i, &h) in hidden.iter().enumerate() {
                push(format!("fc{}", i + 1), LayerKind::Linear { in_features: prev, out_features: h }, true);
                push(format!("relu{}", i + 1), LayerKind::Relu, false);
                prev = h;
            }
            push("classifier".into(), LayerKind::Linear { in_features: prev, out_features: *classes }, false);
        }
        ArchSpec::SmallCnn { in_shape, channels, classes } => {
            if channels.is_empty() {
                return Err(Error::InvalidLayer("smallcnn needs at least one stage".into()));
            }
            if in_shape.contains(&0) || channels.contains(&0) || *classes == 0 {
                return Err(Error::InvalidLayer("smallcnn dimensions must be positive".into()));
            }
            let mut prev_c = in_shape[0];
            let mut spatial = (in_shape[1], in_shape[2]);
            for (i, &c) in channels.iter().enumerate() {
                let n = i + 1;
                push(
                    format!("conv{n}"),
                    LayerKind::Conv2d { in_channels: prev_c, out_channels: c, kernel: 3, stride: 1, padding: 1 },
                    true,
                );
                push(format!("bn{n}"), LayerKind::BatchNorm2d { channels: c }, true);
                push(format!("relu{n}"), LayerKind::Relu, false);
                push(format!("pool{n}"), LayerKind::MaxPool2d { kernel: 2, stride: 2 }, false);
                prev_c = c;
                spatial = (spatial.0 / 2, spatial.1 / 2);
                if spatial.0 == 0 || spatial.1 == 0 {
                    return Err(Error::InvalidLayer("smallcnn pools below 1x1".into()));
                }
            }
            push("flatten".into(), LayerKind::Flatten, false);
            push(
                "classifier".into(),
                LayerKind::Linear { in_features: prev_c * spatial.0 * spatial.1, out_features: *classes },
                false,
            );
        }
        ArchSpec::SmallResnet { in_shape, widths, blocks_per_stage, classes } => {
            if widths.is_empty() || *blocks_per_stage == 0 {
                return Err(Error::InvalidLayer("smallresnet needs stages and blocks".into()));
            }
            if in_shape.contains(&0) || widths.contains(&0) || *classes == 0 {
                return Err(Error::InvalidLayer("smallresnet dimensions must be positive".into()));
            }
            let conv3 = |cin: usize, cout: usize, stride: usize| LayerKind::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: 3,
                stride,
                padding: 1,
            };
            let mut spatial = (in_shape[1], in_shape[2]);
            push("stem.conv".into(), conv3(in_shape[0], widths[0], 1), true);
            push("stem.bn".into(), LayerKind::BatchNorm2d { channels: widths[0] }, true);
            push("stem.relu".into(), LayerKind::Relu, false);
            let mut prev_w = widths[0];
            for (s, &w) in widths.iter().enumerate() {
                let sn = s + 1;
                if w != prev_w {
                    // Width changes break identity shortcuts, so transitions
                    // are plain strided conv blocks.
                    push(format!("s{sn}.trans.conv"), conv3(prev_w, w, 2), true);
                    push(format!("s{sn}.trans.bn"), LayerKind::BatchNorm2d { channels: w }, true);
                    push(format!("s{sn}.trans.relu"), LayerKind::Relu, false);
                    spatial = ((spatial.0 + 1) / 2, (spatial.1 + 1) / 2);
                    prev_w = w;
                }
                for b in 1..=*blocks_per_stage {
                    let p = format!("s{sn}.b{b}");
                    push(format!("{p}.skip"), LayerKind::SkipStart, false);
                    push(format!("{p}.conv_a"), conv3(w, w, 1), true);
                    push(format!("{p}.bn_a"), LayerKind::BatchNorm2d { channels: w }, true);
                    push(format!("{p}.relu_a"), LayerKind::Relu, false);
                    push(format!("{p}.conv_b"), conv3(w, w, 1), true);
                    push(format!("{p}.bn_b"), LayerKind::BatchNorm2d { channels: w }, true);
                    push(format!("{p}.sum"), LayerKind::SkipSum, false);
                    push(format!("{p}.relu_out"), LayerKind::Relu, false);
                }
            }
            if spatial.0 == 0 || spatial.1 == 0 {
                return Err(Error::InvalidLayer("smallresnet downsamples below 1x1".into()));
            }
            let k = spatial.0.min(spatial.1);
            push("head.pool".into(), LayerKind::AvgPool2d { kernel: k, stride: k }, false);
            push("head.flatten".into(), LayerKind::Flatten, false);
            let feat = prev_w * (spatial.0 / k) * (spatial.1 / k);
            push("classifier".into(), LayerKind::Linear { in_features: feat, out_features: *classes }, false);
        }
    }
    Ok(layers)
}

/// Per-sample output shape of each layer, walking the list in order.
pub fn layer_output_shapes(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input_shape.to_vec();
    let mut skips: Vec<Vec<usize>> = Vec::new();
    for l in layers {
        cur = match &l.kind {
            LayerKind::Linear { in_features, out_features } => {
                if cur != vec![*in_features] {
                    return Err(Error::InvalidLayer(format!(
                        "layer `{}` expects [{in_features}], got {cur:?}",
                        l.name
                    )));
                }
                vec![*out_features]
            }
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [c, h, w] = cur[..] else {
                    return Err(Error::InvalidLayer(format!("layer `{}` expects CHW input", l.name)));
                };
                if c != *in_channels {
                    return Err(Error::InvalidLayer(format!(
                        "layer `{}` expects {in_channels} channels, got {c}",
                        l.name
                    )));
                }
                let ho = crate::ops::conv_out_size(h, *kernel, *stride, *padding)?;
                let wo = crate::ops::conv_out_size(w, *kernel, *stride, *padding)?;
                vec![*out_channels, ho, wo]
            }
            LayerKind::BatchNorm2d { channels } => {
                if cur.len() != 3 || cur[0] != *channels {
                    return Err(Error::InvalidLayer(format!(
                        "layer `{}` expects {channels} channels, got {cur:?}",
                        l.name
                    )));
                }
                cur
            }
            LayerKind::Relu => cur,
            LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
                let [c, h, w] = cur[..] else {
                    return Err(Error::InvalidLayer(format!("layer `{}` expects CHW input", l.name)));
                };
                let ho = crate::ops::conv_out_size(h, *kernel, *stride, 0)?;
                let wo = crate::ops::conv_out_size(w, *kernel, *stride, 0)?;
                vec![c, ho, wo]
            }
            LayerKind::Flatten => vec![cur.iter().product()],
            LayerKind::SkipStart => {
                skips.push(cur.clone());
                cur
            }
            LayerKind::SkipSum => {
                let saved = skips
                    .pop()
                    .ok_or_else(|| Error::InvalidLayer(format!("`{}` without skip start", l.name)))?;
                if saved != cur {
                    return Err(Error::InvalidLayer(format!(
                        "identity shortcut shape mismatch at `{}`: {saved:?} vs {cur:?}",
                        l.name
                    )));
                }
                cur
            }
        };
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

impl<T: Scalar> Model<T> {
    pub fn input_shape(&self) -> Vec<usize> {
        self.arch.input_shape()
    }

    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        layer_output_shapes(&self.layers, &self.input_shape())
    }

    /// Forward-order enumeration of all tracked neurons; stable across runs
    /// and freezing states.
    pub fn tracked_neurons(&self) -> Vec<NeuronId> {
        let mut out = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            if !l.neq_tracked {
                continue;
            }
            let n = l.kind.neuron_count().expect("tracked layers are parameterized");
            out.extend((0..n).map(|index| NeuronId { layer: li, index }));
        }
        out
    }

    pub fn layer_by_name(&self, name: &str) -> Option<LayerIndex> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn neuron_count(&self, layer: LayerIndex) -> Option<usize> {
        self.layers.get(layer).and_then(|l| l.kind.neuron_count())
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.trainable_count()).sum()
    }

    /// All parameter tensors as bytes, in layer order. Used for bit-exact
    /// trajectory comparisons.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            for (_, t) in p.named_tensors() {
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    // ── Checkpoints ─────────────────────────────────────────────────

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut meta = toml::Table::new();
        meta.insert("format".into(), toml::Value::String("neq-checkpoint-v1".into()));
        meta.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        meta.insert("precision".into(), toml::Value::String(T::DTYPE.into()));
        let arch = toml::Table::try_from(&self.arch)
            .map_err(|e| Error::Checkpoint(format!("arch encode: {e}")))?;
        meta.insert("arch".into(), toml::Value::Table(arch));

        let mut tensors = Vec::new();
        for (l, p) in self.layers.iter().zip(self.params.iter()) {
            for (role, t) in p.named_tensors() {
                tensors.push((format!("{}.{}", l.name, role), t));
            }
        }
        write_container(path, meta, &tensors)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model<T>> {
        let reader = ContainerReader::open(path)?;
        let precision = reader
            .meta
            .get("precision")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("missing precision".into()))?;
        if precision != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint precision {precision} does not match {}",
                T::DTYPE
            )));
        }
        let seed = reader
            .meta
            .get("seed")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| Error::Checkpoint("missing seed".into()))? as u64;
        let arch: ArchSpec = reader
            .meta
            .get("arch")
            .and_then(|v| v.as_table())
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing arch".into()))
            .and_then(|t| {
                t.try_into().map_err(|e| Error::Checkpoint(format!("arch decode: {e}")))
            })?;

        let mut model = build_model::<T>(&arch, seed)?;
        for (l, p) in model.layers.iter().zip(model.params.iter_mut()) {
            let fresh = match p {
                LayerParams::Linear { weight, bias } => vec![("weight", weight), ("bias", bias)],
                LayerParams::Conv2d { weight, bias } => vec![("weight", weight), ("bias", bias)],
                LayerParams::BatchNorm2d { gamma, beta, running_mean, running_var } => vec![
                    ("gamma", gamma),
                    ("beta", beta),
                    ("running_mean", running_mean),
                    ("running_var", running_var),
                ],
                LayerParams::None => Vec::new(),
            };
            for (role, slot) in fresh {
                let loaded = reader.read_tensor::<T>(&format!("{}.{}", l.name, role))?;
                if loaded.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{}.{}` shape mismatch",
                        l.name, role
                    )));
                }
                *slot = loaded;
            }
        }
        Ok(model)
    }
}

// ── Freeze mask ─────────────────────────────────────────────────────

/// Per-layer frozen flags over output neurons; `true` = frozen.
/// Layers without parameters carry no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeMask {
    frozen: Vec<Option<Vec<bool>>>,
}

impl FreezeMask {
    pub fn all_unfrozen(layers: &[LayerSpec]) -> Self {
        FreezeMask {
            frozen: layers
                .iter()
                .map(|l| l.kind.neuron_count().map(|n| vec![false; n]))
                .collect(),
        }
    }

    pub fn layer(&self, layer: LayerIndex) -> Option<&[bool]> {
        self.frozen.get(layer).and_then(|v| v.as_deref())
    }

    pub fn is_frozen(&self, id: NeuronId) -> bool {
        self.layer(id.layer).map(|v| v[id.index]).unwrap_or(false)
    }

    pub fn set(&mut self, id: NeuronId, frozen: bool) {
        if let Some(Some(v)) = self.frozen.get_mut(id.layer) {
            v[id.index] = frozen;
        }
    }

    /// Ascending indices of non-frozen neurons in a layer.
    pub fn unfrozen_rows(&self, layer: LayerIndex, neuron_count: usize) -> Vec<usize> {
        match self.layer(layer) {
            Some(flags) => (0..neuron_count).filter(|&i| !flags[i]).collect(),
            None => (0..neuron_count).collect(),
        }
    }

    pub fn any_unfrozen(&self, layer: LayerIndex) -> bool {
        match self.layer(layer) {
            Some(flags) => flags.iter().any(|&f| !f),
            None => true,
        }
    }

    /// Gate lengths must match each parameterized layer's neuron count.
    pub fn validate(&self, layers: &[LayerSpec]) -> Result<()> {
        if self.frozen.len() != layers.len() {
            return Err(Error::GateLength {
                layer: "<model>".into(),
                expected: layers.len(),
                got: self.frozen.len(),
            });
        }
        for (l, f) in layers.iter().zip(self.frozen.iter()) {
            match (l.kind.neuron_count(), f) {
                (Some(n), Some(v)) if v.len() == n => {}
                (None, None) => {}
                (expected, got) => {
                    return Err(Error::GateLength {
                        layer: l.name.clone(),
                        expected: expected.unwrap_or(0),
                        got: got.as_ref().map(|v| v.len()).unwrap_or(0),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn frozen_neurons(&self) -> Vec<NeuronId> {
        let mut out = Vec::new();
        for (layer, flags) in self.frozen.iter().enumerate() {
            if let Some(flags) = flags {
                out.extend(
                    flags
                        .iter()
                        .enumerate()
                        .filter(|(_, &f)| f)
                        .map(|(index, _)| NeuronId { layer, index }),
                );
            }
        }
        out
    }

    /// (updated count, updated fraction) over the given tracked neurons.
    pub fn updated_stats(&self, tracked: &[NeuronId]) -> (usize, f64) {
        if tracked.is_empty() {
            return (0, 1.0);
        }
        let updated = tracked.iter().filter(|&&id| !self.is_frozen(id)).count();
        (updated, updated as f64 / tracked.len() as f64)
    }
}
