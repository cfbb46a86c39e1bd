//! Freezing policies and mask replay files.
//!
//! A policy produces the freeze mask applied during each training epoch:
//! * `neq`: the equilibrium tracker (cannot act before epoch 4 by data
//!   availability: signatures from epoch 1, phi from 2, velocity from 3);
//! * `stochastic`: every tracked neuron frozen independently with
//!   probability p, redrawn every epoch including the first;
//! * `none`: nothing ever frozen;
//! * `replay`: masks read from a replay file, for reproducing a recorded
//!   run bit-exactly.
//!
//! The classifier layer is excluded from freezing under every policy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{FreezeMask, Model, NeuronId};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tracker::{NeuronDiag, Tracker, TrackerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Neq,
    Stochastic,
    None,
    Replay,
}

/// One tracked neuron frozen independently with probability `p`; redraw per
/// epoch from a dedicated seed stream. Untracked layers never freeze.
pub fn stochastic_mask<T: Scalar>(
    model: &Model<T>,
    p: f64,
    master_seed: u64,
    epoch: u64,
) -> Result<FreezeMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config { field: "p".into(), message: format!("must be in [0,1], got {p}") });
    }
    let mut rng = rng::substream(master_seed, Stream::Mask, epoch);
    let mut mask = FreezeMask::all_unfrozen(&model.layers);
    for id in model.tracked_neurons() {
        let draw: f64 = rng.gen();
        if draw < p {
            mask.set(id, true);
        }
    }
    Ok(mask)
}

pub enum FreezePolicy<T: Scalar> {
    Neq(Tracker<T>),
    Stochastic { p: f64, seed: u64 },
    None,
    Replay(MaskReplay),
}

impl<T: Scalar> FreezePolicy<T> {
    pub fn neq(model: &Model<T>, config: TrackerConfig) -> Result<Self> {
        Ok(FreezePolicy::Neq(Tracker::new(model, config)?))
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            FreezePolicy::Neq(_) => PolicyKind::Neq,
            FreezePolicy::Stochastic { .. } => PolicyKind::Stochastic,
            FreezePolicy::None => PolicyKind::None,
            FreezePolicy::Replay(_) => PolicyKind::Replay,
        }
    }

    /// Mask applied during epoch 1. All-open except for the stochastic
    /// policy, which draws from epoch 1 on.
    pub fn initial_mask(&self, model: &Model<T>) -> Result<FreezeMask> {
        match self {
            FreezePolicy::Stochastic { p, seed } => stochastic_mask(model, *p, *seed, 1),
            FreezePolicy::Replay(r) => r.mask_for_epoch(model, 1),
            _ => Ok(FreezeMask::all_unfrozen(&model.layers)),
        }
    }

    /// Mask to apply during `epoch + 1`, evaluated after `epoch` completed.
    pub fn after_epoch(
        &mut self,
        model: &Model<T>,
        graph: &Graph,
        probe: &Tensor<T>,
        epoch: u64,
    ) -> Result<(FreezeMask, Option<Vec<NeuronDiag>>)> {
        match self {
            FreezePolicy::Neq(tracker) => {
                let (mask, diags) = tracker.step(model, graph, probe, epoch)?;
                Ok((mask, Some(diags)))
            }
            FreezePolicy::Stochastic { p, seed } => {
                Ok((stochastic_mask(model, *p, *seed, epoch + 1)?, None))
            }
            FreezePolicy::None => Ok((FreezeMask::all_unfrozen(&model.layers), None)),
            FreezePolicy::Replay(r) => Ok((r.mask_for_epoch(model, epoch + 1)?, None)),
        }
    }

    pub fn tracker(&self) -> Option<&Tracker<T>> {
        match self {
            FreezePolicy::Neq(t) => Some(t),
            _ => None,
        }
    }
}

// ── Mask replay files ───────────────────────────────────────────────
//
// Line-oriented text: one `epoch layer_id neuron_index` triple per line,
// listing the neurons frozen during that epoch. Lines starting with `#` are
// comments. Epochs absent from the file are fully open.

#[derive(Clone, Debug, Default)]
pub struct MaskReplay {
    frozen: BTreeMap<u64, Vec<(String, usize)>>,
}

impl MaskReplay {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut frozen: BTreeMap<u64, Vec<(String, usize)>> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(e), Some(layer), Some(idx), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::MaskReplay(format!("line {}: expected 3 fields", ln + 1)));
            };
            let epoch: u64 = e
                .parse()
                .map_err(|_| Error::MaskReplay(format!("line {}: bad epoch `{e}`", ln + 1)))?;
            let index: usize = idx
                .parse()
                .map_err(|_| Error::MaskReplay(format!("line {}: bad index `{idx}`", ln + 1)))?;
            frozen.entry(epoch).or_default().push((layer.to_string(), index));
        }
        Ok(MaskReplay { frozen })
    }

    pub fn mask_for_epoch<T: Scalar>(&self, model: &Model<T>, epoch: u64) -> Result<FreezeMask> {
        let mut mask = FreezeMask::all_unfrozen(&model.layers);
        if let Some(entries) = self.frozen.get(&epoch) {
            for (layer_name, index) in entries {
                let layer = model.layer_by_name(layer_name).ok_or_else(|| {
                    Error::MaskReplay(format!("unknown layer `{layer_name}` in replay file"))
                })?;
                let n = model.neuron_count(layer).ok_or_else(|| {
                    Error::MaskReplay(format!("layer `{layer_name}` has no neurons"))
                })?;
                if *index >= n {
                    return Err(Error::MaskReplay(format!(
                        "neuron {index} out of range for layer `{layer_name}` ({n})"
                    )));
                }
                mask.set(NeuronId { layer, index: *index }, true);
            }
        }
        Ok(mask)
    }
}

/// Collects the masks applied during a run and renders the replay file.
#[derive(Clone, Debug, Default)]
pub struct MaskLog {
    entries: Vec<(u64, String, usize)>,
}

impl MaskLog {
    pub fn record<T: Scalar>(&mut self, model: &Model<T>, epoch: u64, mask: &FreezeMask) {
        for id in mask.frozen_neurons() {
            self.entries.push((epoch, model.layers[id.layer].name.clone(), id.index));
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# epoch layer_id neuron_index\n");
        for (e, layer, idx) in &self.entries {
            out.push_str(&format!("{e} {layer} {idx}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchSpec};

    fn model() -> Model<f32> {
        build_model(&ArchSpec::Mlp { input: 4, hidden: vec![8, 8], classes: 3 }, 0).unwrap()
    }

    #[test]
    fn stochastic_extremes() {
        let m = model();
        let none = stochastic_mask(&m, 0.0, 1, 5).unwrap();
        assert!(none.frozen_neurons().is_empty());
        let all = stochastic_mask(&m, 1.0, 1, 5).unwrap();
        assert_eq!(all.frozen_neurons().len(), m.tracked_neurons().len());
        assert!(stochastic_mask(&m, 1.5, 1, 5).is_err());
    }

    #[test]
    fn stochastic_never_touches_classifier() {
        let m = model();
        let mask = stochastic_mask(&m, 1.0, 1, 5).unwrap();
        let classifier = m.layer_by_name("classifier").unwrap();
        for id in mask.frozen_neurons() {
            assert_ne!(id.layer, classifier);
        }
    }

    #[test]
    fn stochastic_fraction_within_binomial_bounds() {
        // 10^4 draws at p = 0.5: observed fraction within 3 sigma,
        // sigma = sqrt(p(1-p)/n) = 0.005.
        let m = build_model::<f32>(
            &ArchSpec::Mlp { input: 4, hidden: vec![10_000], classes: 3 },
            0,
        )
        .unwrap();
        let mask = stochastic_mask(&m, 0.5, 123, 7).unwrap();
        let frac = mask.frozen_neurons().len() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 3.0 * 0.005, "fraction {frac}");
    }

    #[test]
    fn stochastic_redraws_per_epoch_deterministically() {
        let m = model();
        let a = stochastic_mask(&m, 0.5, 9, 3).unwrap();
        let b = stochastic_mask(&m, 0.5, 9, 3).unwrap();
        let c = stochastic_mask(&m, 0.5, 9, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn replay_roundtrip() {
        let m = model();
        let mut mask = FreezeMask::all_unfrozen(&m.layers);
        mask.set(NeuronId { layer: 0, index: 3 }, true);
        mask.set(NeuronId { layer: 2, index: 1 }, true);
        let mut log = MaskLog::default();
        log.record(&m, 2, &mask);

        let replay = MaskReplay::parse(&log.render()).unwrap();
        let restored = replay.mask_for_epoch(&m, 2).unwrap();
        assert_eq!(restored, mask);
        // Epochs not present are fully open.
        let open = replay.mask_for_epoch(&m, 1).unwrap();
        assert!(open.frozen_neurons().is_empty());
    }

    #[test]
    fn replay_rejects_unknown_layers_and_bad_indices() {
        let m = model();
        let r = MaskReplay::parse("1 nosuch 0\n").unwrap();
        assert!(r.mask_for_epoch(&m, 1).is_err());
        let r = MaskReplay::parse("1 fc1 999\n").unwrap();
        assert!(r.mask_for_epoch(&m, 1).is_err());
        assert!(MaskReplay::parse("1 fc1\n").is_err());
    }
}
