//! The epoch training loop: gated updates, policy evaluation between
//! epochs, step schedule, and metrics collection.
//!
//! Epoch e trains under the mask produced at the end of epoch e-1 (all-open
//! for epoch 1, except the stochastic policy which draws from epoch 1).
//! After each epoch the policy evaluates the next mask, the test set is
//! scored in eval mode, and one metrics record is appended. Batch order
//! comes from a seed stream independent of mask randomness, so the policy
//! choice never perturbs data order: the training step is policy-agnostic
//! and any mask sequence replayed through it reproduces the trajectory
//! bit-exactly.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{backward, forward_eval, forward_train, Graph, Grads};
use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::flops;
use crate::metrics::MetricsRecord;
use crate::model::{FreezeMask, Model};
use crate::ops;
use crate::optim::{AdamConfig, Optimizer, SgdConfig};
use crate::policy::{FreezePolicy, MaskLog, PolicyKind};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::schedule::Schedule;
use crate::tensor::Tensor;
use crate::tracker::NeuronDiag;

/// Evaluation batch cap (memory bound, no effect on results).
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub enum OptimizerSettings {
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

#[derive(Clone, Debug)]
pub struct TrainParams {
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerSettings,
    pub schedule: Schedule,
    pub seed: u64,
    /// Count optimizer arithmetic in the backward FLOPs metric.
    pub include_optimizer_flops: bool,
}

/// Hook into the training loop; the default implementation observes nothing.
/// Observers must not mutate run state (they get shared references only).
pub trait TrainObserver<T: Scalar> {
    fn on_step(&mut self, _ctx: &StepContext<'_, T>) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(
        &mut self,
        _model: &Model<T>,
        _optimizer: &Optimizer<T>,
        _epoch: u64,
        _mask: &FreezeMask,
    ) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;
impl<T: Scalar> TrainObserver<T> for NoopObserver {}

/// Everything visible at one optimization step, before the update applies.
pub struct StepContext<'a, T: Scalar> {
    pub epoch: u64,
    pub iteration: usize,
    pub model: &'a Model<T>,
    pub graph: &'a Graph,
    pub batch: &'a Tensor<T>,
    pub labels: &'a [u32],
    pub mask: &'a FreezeMask,
    pub grads: &'a Grads<T>,
}

pub struct TrainOutput<T: Scalar> {
    pub model: Model<T>,
    pub metrics: Vec<MetricsRecord>,
    pub mask_log: MaskLog,
    /// Per-epoch tracker diagnostics (equilibrium policy only).
    pub diagnostics: Vec<(u64, Vec<NeuronDiag>)>,
}

pub fn run_training<T: Scalar>(
    mut model: Model<T>,
    split: &SplitData,
    params: &TrainParams,
    mut policy: FreezePolicy<T>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutput<T>> {
    if split.train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let graph = Graph::compile(&model.layers)?;
    let costs = flops::layer_costs(&model, optimizer_kind(&params.optimizer))?;
    let mut optimizer = build_optimizer(&model, &params.optimizer);
    let tracked = model.tracked_neurons();
    let (probe, _) = split.probe.all_batch::<T>();

    let mut mask = policy.initial_mask(&model)?;
    mask.validate(&model.layers)?;

    let mut metrics = Vec::with_capacity(params.epochs as usize);
    let mut mask_log = MaskLog::default();
    let mut diagnostics = Vec::new();
    let n_train = split.train.len();
    let probe = adapt_input(probe, &model)?;

    for epoch in 1..=params.epochs {
        let epoch_start = Instant::now();
        let lr = params.schedule.lr_at(epoch);
        mask_log.record(&model, epoch, &mask);

        // Any open gate at all this epoch? If not, backward is a no-op.
        let any_open = (0..model.layers.len()).any(|li| {
            model.layers[li].kind.is_parameterized() && mask.any_unfrozen(li)
        });

        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng::substream(params.seed, Stream::Shuffle, epoch));

        let mut loss_sum = 0.0f64;
        let mut iter_flops: Vec<f64> = Vec::with_capacity(n_train / params.batch_size + 1);
        let mut iteration = 0usize;

        for chunk in order.chunks(params.batch_size) {
            let (batch, labels) = split.train.batch::<T>(chunk);
            let batch = adapt_input(batch, &model)?;
            let record = forward_train(&mut model, &graph, &batch, &mask)?;
            let logits = record.output(&graph);

            let loss = if any_open {
                let (loss, dlogits) = ops::softmax_cross_entropy_with_grad(logits, &labels)?;
                let grads = backward(&model, &graph, &record, &dlogits, &mask)?;
                observer.on_step(&StepContext {
                    epoch,
                    iteration,
                    model: &model,
                    graph: &graph,
                    batch: &batch,
                    labels: &labels,
                    mask: &mask,
                    grads: &grads,
                })?;
                optimizer.step(&mut model, &grads, &mask, lr)?;
                loss
            } else {
                ops::softmax_cross_entropy_loss(logits, &labels)?
            };
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, iteration {iteration}"
                )));
            }
            loss_sum += loss.to_f64() * chunk.len() as f64;
            iter_flops.push(flops::bprop_flops(
                &costs,
                &mask,
                chunk.len(),
                params.include_optimizer_flops,
            )?);
            iteration += 1;
        }

        let (flops_mean, flops_std) = flops::epoch_summary(&iter_flops)?;
        let test_accuracy = evaluate_accuracy(&model, &graph, split)?;
        let (updated_neurons, updated_fraction) = mask.updated_stats(&tracked);

        observer.on_epoch_end(&model, &optimizer, epoch, &mask)?;
        metrics.push(MetricsRecord {
            epoch,
            bprop_flops_mean: flops_mean,
            bprop_flops_std: flops_std,
            updated_neurons,
            updated_fraction,
            train_loss: loss_sum / n_train as f64,
            test_accuracy,
            learning_rate: lr,
            wall_seconds: epoch_start.elapsed().as_secs_f64(),
        });

        if epoch < params.epochs {
            let (next_mask, diags) = policy.after_epoch(&model, &graph, &probe, epoch)?;
            if let Some(diags) = diags {
                diagnostics.push((epoch, diags));
            }
            mask = next_mask;
            mask.validate(&model.layers)?;
        } else if let FreezePolicy::Neq(tracker) = &mut policy {
            // Final tracker step so diagnostics cover the last epoch too.
            let (_, diags) = tracker.step(&model, &graph, &probe, epoch)?;
            diagnostics.push((epoch, diags));
        }
    }

    Ok(TrainOutput { model, metrics, mask_log, diagnostics })
}

fn optimizer_kind(settings: &OptimizerSettings) -> crate::optim::OptimizerKind {
    match settings {
        OptimizerSettings::Sgd { .. } => crate::optim::OptimizerKind::Sgd,
        OptimizerSettings::Adam { .. } => crate::optim::OptimizerKind::Adam,
    }
}

fn build_optimizer<T: Scalar>(model: &Model<T>, settings: &OptimizerSettings) -> Optimizer<T> {
    match *settings {
        OptimizerSettings::Sgd { momentum, weight_decay } => {
            Optimizer::sgd(model, SgdConfig { momentum, weight_decay })
        }
        OptimizerSettings::Adam { beta1, beta2, eps, weight_decay } => {
            Optimizer::adam(model, AdamConfig { beta1, beta2, eps, weight_decay })
        }
    }
}

/// Flatten multi-dimensional samples for models that take flat features
/// (an MLP fed image data); everything else passes through untouched.
pub fn adapt_input<T: Scalar>(batch: Tensor<T>, model: &Model<T>) -> Result<Tensor<T>> {
    let want = model.input_shape();
    if want.len() == 1 && batch.shape().len() > 2 {
        let b = batch.shape()[0];
        let rest: usize = batch.shape()[1..].iter().product();
        if rest == want[0] {
            return batch.reshaped(&[b, rest]);
        }
    }
    Ok(batch)
}

/// Top-1 accuracy on the test split, eval mode, fixed order.
pub fn evaluate_accuracy<T: Scalar>(
    model: &Model<T>,
    graph: &Graph,
    split: &SplitData,
) -> Result<f64> {
    let n = split.test.len();
    if n == 0 {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (batch, labels) = split.test.batch::<T>(chunk);
        let batch = adapt_input(batch, model)?;
        let rec = forward_eval(model, graph, &batch)?;
        let logits = rec.output(graph);
        let [b_n, c_n] = logits.shape() else {
            return Err(Error::Training("classifier output is not 2-d".into()));
        };
        for b in 0..*b_n {
            let row = &logits.data()[b * c_n..(b + 1) * c_n];
            let mut best = 0usize;
            for c in 1..*c_n {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == labels[b] as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Convenience check used by invariants: does this policy update everything
/// at epoch 1?
pub fn first_epoch_fully_updated(kind: PolicyKind) -> bool {
    !matches!(kind, PolicyKind::Stochastic | PolicyKind::Replay)
}
