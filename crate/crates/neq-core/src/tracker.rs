//! Per-neuron equilibrium tracking.
//!
//! At the end of each epoch every tracked neuron's outputs over a fixed
//! probe set are flattened (sample-major, row-major), concatenated, and
//! L2-normalized into a signature. The cosine similarity between
//! consecutive-epoch signatures (phi), its variation (delta phi), and a
//! momentum-filtered velocity of that variation drive the freeze decision:
//! a neuron is frozen while |velocity| < epsilon and unfrozen the moment
//! the bound is violated again.
//!
//! Epoch bookkeeping: signatures exist from epoch 1, phi from epoch 2,
//! velocity from epoch 3 (the recurrence starts from zero at the first
//! phi). Steps at epochs 1 and 2 therefore return all-non-frozen masks.

use std::path::Path;

use crate::autodiff::{forward_eval, neuron_output_view, Graph};
use crate::container::write_container;
use crate::error::{Error, Result};
use crate::model::{FreezeMask, Model, NeuronId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maximum probe samples evaluated per forward chunk.
const PROBE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug)]
pub struct TrackerConfig {
    /// Momentum coefficient of the velocity recurrence.
    pub mu_eq: f64,
    /// Equilibrium threshold; freeze while |v| < epsilon.
    pub epsilon: f64,
    /// Probe set cardinality.
    pub probe_size: usize,
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mu_eq) {
            return Err(Error::Config {
                field: "mu_eq".into(),
                message: format!("must be in [0, 1), got {}", self.mu_eq),
            });
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Config {
                field: "epsilon".into(),
                message: format!("must be >= 0, got {}", self.epsilon),
            });
        }
        if self.probe_size == 0 {
            return Err(Error::Config {
                field: "probe_size".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.mu_eq > 0.5 {
            // Stability of the velocity recurrence over [0, 1]-valued phi is
            // only guaranteed for mu_eq <= 0.5; larger values are allowed but
            // can make |v| exceed the freeze-decision range.
            log::warn!("mu_eq = {} is above the 0.5 stability bound", self.mu_eq);
        }
        Ok(())
    }
}

/// Unit-normalized concatenated outputs of one neuron over the probe set.
#[derive(Clone, Debug)]
pub struct NeuronSignature<T> {
    pub neuron: NeuronId,
    pub epoch: u64,
    pub values: Vec<T>,
    /// Set when the raw outputs were exactly all-zero (dead neuron); the
    /// stored values are then all zero rather than unit-norm.
    pub zero: bool,
}

impl<T: Scalar> NeuronSignature<T> {
    /// Normalize raw outputs; the norm is accumulated in f64 regardless of
    /// the storage precision.
    pub fn from_raw(neuron: NeuronId, epoch: u64, raw: &[T]) -> Self {
        let norm_sq: f64 = raw.iter().map(|v| v.to_f64() * v.to_f64()).sum();
        if norm_sq == 0.0 {
            return NeuronSignature { neuron, epoch, values: vec![T::ZERO; raw.len()], zero: true };
        }
        let norm = norm_sq.sqrt();
        let values = raw.iter().map(|v| T::from_f64(v.to_f64() / norm)).collect();
        NeuronSignature { neuron, epoch, values, zero: false }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cosine similarity between consecutive-epoch signatures of one neuron.
///
/// Degenerate cases: both signatures zero-flagged compare as 1 (a dead
/// neuron is a stable input-output map); exactly one zero-flagged compares
/// as 0 (maximal change). Accumulation is in f64.
pub fn phi<T: Scalar>(sig_t: &NeuronSignature<T>, sig_prev: &NeuronSignature<T>) -> Result<f64> {
    if sig_t.neuron != sig_prev.neuron {
        return Err(Error::SignatureMismatch(format!(
            "different neurons: {:?} vs {:?}",
            sig_t.neuron, sig_prev.neuron
        )));
    }
    if sig_t.epoch != sig_prev.epoch + 1 {
        return Err(Error::SignatureMismatch(format!(
            "epochs must be consecutive: {} vs {}",
            sig_t.epoch, sig_prev.epoch
        )));
    }
    if sig_t.len() != sig_prev.len() {
        return Err(Error::SignatureMismatch(format!(
            "length mismatch: {} vs {}",
            sig_t.len(),
            sig_prev.len()
        )));
    }
    match (sig_t.zero, sig_prev.zero) {
        (true, true) => Ok(1.0),
        (true, false) | (false, true) => Ok(0.0),
        (false, false) => {
            let mut acc = 0.0f64;
            for (a, b) in sig_t.values.iter().zip(sig_prev.values.iter()) {
                acc += a.to_f64() * b.to_f64();
            }
            Ok(acc)
        }
    }
}

/// Per-neuron equilibrium record.
#[derive(Clone, Debug)]
pub struct EquilibriumState<T> {
    pub neuron: NeuronId,
    pub prev_signature: Option<NeuronSignature<T>>,
    pub prev_phi: Option<f64>,
    pub velocity: Option<f64>,
    pub frozen: bool,
}

impl<T: Scalar> EquilibriumState<T> {
    pub fn new(neuron: NeuronId) -> Self {
        EquilibriumState { neuron, prev_signature: None, prev_phi: None, velocity: None, frozen: false }
    }
}

/// One velocity-recurrence step: v_t = (phi_t - prev_phi) - mu_eq * v_prev,
/// with v_prev taken as 0 when velocity was absent. Stores phi_t as the new
/// prev_phi and returns v_t.
pub fn update_velocity<T: Scalar>(
    state: &mut EquilibriumState<T>,
    phi_t: f64,
    mu_eq: f64,
) -> Result<f64> {
    let prev = state.prev_phi.ok_or_else(|| {
        Error::VelocityUndefined(format!("no previous phi for {:?}", state.neuron))
    })?;
    let delta = phi_t - prev;
    let v = delta - mu_eq * state.velocity.unwrap_or(0.0);
    state.velocity = Some(v);
    state.prev_phi = Some(phi_t);
    Ok(v)
}

/// Closed-form velocity from a full phi history, the oracle for the
/// recurrence. `history[0]` is the first phi ever observed and the
/// recurrence is anchored at velocity 0 there, so the boundary term at
/// m = t carries the coefficient mu^(t-1) alone (the mu^t part of the
/// printed coefficient belongs to a nonzero initial velocity).
pub fn closed_form_velocity(history: &[f64], mu_eq: f64, t: usize) -> Result<f64> {
    if t == 0 || t >= history.len() {
        return Err(Error::InsufficientHistory { need: t + 1, got: history.len() });
    }
    if mu_eq == 0.0 {
        return Ok(history[t] - history[t - 1]);
    }
    let mut v = history[t];
    let mut mu_pow = 1.0; // mu^(m-1)
    for m in 1..t {
        let coeff = mu_pow + mu_pow * mu_eq; // mu^(m-1) + mu^m
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        v += sign * coeff * history[t - m];
        mu_pow *= mu_eq;
    }
    let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
    v += sign * mu_pow * history[0];
    Ok(v)
}

/// Freeze iff |v| < epsilon (strict); neurons with absent velocity stay
/// non-frozen. The decision is memoryless: previously frozen neurons whose
/// velocity re-crosses the bound are unfrozen.
pub fn select_nonequilibrium<T: Scalar>(
    states: &mut [EquilibriumState<T>],
    epsilon: f64,
    layers: &[crate::model::LayerSpec],
) -> FreezeMask {
    let mut mask = FreezeMask::all_unfrozen(layers);
    for s in states.iter_mut() {
        s.frozen = match s.velocity {
            Some(v) => v.abs() < epsilon,
            None => false,
        };
        mask.set(s.neuron, s.frozen);
    }
    mask
}

/// Per-neuron diagnostics for one tracker step.
#[derive(Clone, Debug)]
pub struct NeuronDiag {
    pub neuron: NeuronId,
    pub phi: Option<f64>,
    pub delta_phi: Option<f64>,
    pub velocity: Option<f64>,
    pub frozen: bool,
}

pub struct Tracker<T> {
    pub config: TrackerConfig,
    states: Vec<EquilibriumState<T>>,
    last_epoch: u64,
}

impl<T: Scalar> Tracker<T> {
    pub fn new(model: &Model<T>, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        let states = model.tracked_neurons().iter().map(|&n| EquilibriumState::new(n)).collect();
        Ok(Tracker { config, states, last_epoch: 0 })
    }

    pub fn states(&self) -> &[EquilibriumState<T>] {
        &self.states
    }

    /// Signature values currently retained; the dominant memory term.
    pub fn storage_values(&self) -> usize {
        self.states
            .iter()
            .map(|s| s.prev_signature.as_ref().map(|sig| sig.len()).unwrap_or(0))
            .sum()
    }

    /// One tracker step after completing `epoch` (1-based): extract
    /// signatures, update phi and velocity, select non-equilibrium neurons.
    pub fn step(
        &mut self,
        model: &Model<T>,
        graph: &Graph,
        probe: &Tensor<T>,
        epoch: u64,
    ) -> Result<(FreezeMask, Vec<NeuronDiag>)> {
        if epoch != self.last_epoch + 1 {
            return Err(Error::Training(format!(
                "tracker stepped at epoch {epoch}, expected {}",
                self.last_epoch + 1
            )));
        }
        let sigs = extract_signatures(model, graph, probe, epoch)?;
        let mut diags = Vec::with_capacity(self.states.len());
        for (state, sig) in self.states.iter_mut().zip(sigs.into_iter()) {
            let mut diag = NeuronDiag {
                neuron: state.neuron,
                phi: None,
                delta_phi: None,
                velocity: None,
                frozen: false,
            };
            if let Some(prev_sig) = &state.prev_signature {
                let phi_t = phi(&sig, prev_sig)?;
                diag.phi = Some(phi_t);
                if let Some(prev_phi) = state.prev_phi {
                    diag.delta_phi = Some(phi_t - prev_phi);
                    let v = update_velocity(state, phi_t, self.config.mu_eq)?;
                    diag.velocity = Some(v);
                } else {
                    state.prev_phi = Some(phi_t);
                }
            }
            state.prev_signature = Some(sig);
            diags.push(diag);
        }
        let mask = select_nonequilibrium(&mut self.states, self.config.epsilon, &model.layers);
        for (diag, state) in diags.iter_mut().zip(self.states.iter()) {
            diag.frozen = state.frozen;
        }
        self.last_epoch = epoch;
        Ok((mask, diags))
    }

    /// Dump the retained signatures to a tensor container, one tensor per
    /// neuron named `layer_name:index`, plus a `zero_flags` vector.
    pub fn dump_signatures(&self, model: &Model<T>, path: &Path) -> Result<()> {
        let mut meta = toml::Table::new();
        meta.insert("format".into(), toml::Value::String("neq-signatures-v1".into()));
        meta.insert("epoch".into(), toml::Value::Integer(self.last_epoch as i64));
        let mut zero_flags = Vec::with_capacity(self.states.len());
        let mut tensors = Vec::new();
        let mut owned: Vec<(String, Tensor<T>)> = Vec::new();
        for s in &self.states {
            let Some(sig) = &s.prev_signature else { continue };
            let name = format!("{}:{}", model.layers[s.neuron.layer].name, s.neuron.index);
            let t = Tensor::from_vec(&[sig.len()], sig.values.clone())?;
            owned.push((name, t));
            zero_flags.push(if sig.zero { 1.0 } else { 0.0 });
        }
        let flags = Tensor::<T>::from_vec(
            &[zero_flags.len()],
            zero_flags.iter().map(|&z| T::from_f64(z)).collect(),
        )?;
        for (name, t) in &owned {
            tensors.push((name.clone(), t));
        }
        tensors.push(("zero_flags".to_string(), &flags));
        write_container(path, meta, &tensors)
    }
}

/// Extract signatures for all tracked neurons at the given epoch. The model
/// runs in evaluation mode; probe samples are evaluated in fixed order.
pub fn extract_signatures<T: Scalar>(
    model: &Model<T>,
    graph: &Graph,
    probe: &Tensor<T>,
    epoch: u64,
) -> Result<Vec<NeuronSignature<T>>> {
    let n_probe = probe.shape()[0];
    if n_probe == 0 {
        return Err(Error::Dataset("empty probe set".into()));
    }
    let neurons = model.tracked_neurons();
    let mut raw: Vec<Vec<T>> = neurons.iter().map(|_| Vec::new()).collect();

    let sample_len: usize = probe.shape()[1..].iter().product();
    let mut start = 0;
    while start < n_probe {
        let end = (start + PROBE_CHUNK).min(n_probe);
        let mut shape = probe.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_vec(
            &shape,
            probe.data()[start * sample_len..end * sample_len].to_vec(),
        )?;
        let rec = forward_eval(model, graph, &chunk)?;
        for (i, &id) in neurons.iter().enumerate() {
            raw[i].extend(neuron_output_view(model, graph, &rec, id)?);
        }
        start = end;
    }

    Ok(neurons
        .iter()
        .zip(raw.into_iter())
        .map(|(&id, values)| NeuronSignature::from_raw(id, epoch, &values))
        .collect())
}

/// Diagnostics CSV: one row per tracked neuron. Absent values (early epochs)
/// are written as empty fields.
pub fn write_diagnostics_csv<T: Scalar>(
    model: &Model<T>,
    diags: &[NeuronDiag],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("layer_id,neuron_index,phi,delta_phi,velocity,frozen\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for d in diags {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            model.layers[d.neuron.layer].name,
            d.neuron.index,
            fmt(d.phi),
            fmt(d.delta_phi),
            fmt(d.velocity),
            d.frozen as u8
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
