//! Run configuration: TOML files with defaults, strict validation, and a
//! resolved dump.
//!
//! Unknown keys are errors, not warnings. Numeric ranges are validated at
//! parse time and errors name the offending field. The default recipe is a
//! desk-scale step-decay setup: 60 epochs, rate divided by 10 after epochs
//! 24 and 36, batch 100, SGD momentum 0.9, weight decay 5e-4.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::optim::OptimizerKind;
use crate::policy::PolicyKind;
use crate::schedule::Schedule;
use crate::tracker::TrackerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

// ── Raw (file-facing) structure ─────────────────────────────────────

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub model: Option<RawModel>,
    pub data: Option<RawData>,
    pub train: Option<RawTrain>,
    pub policy: Option<RawPolicy>,
    pub output: Option<RawOutput>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub arch: Option<String>,
    pub hidden: Option<Vec<usize>>,
    pub channels: Option<Vec<usize>>,
    pub widths: Option<Vec<usize>>,
    pub blocks_per_stage: Option<usize>,
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawData {
    pub source: Option<String>,
    pub idx_images: Option<String>,
    pub idx_labels: Option<String>,
    pub n: Option<usize>,
    pub noise: Option<f64>,
    pub label_noise: Option<f64>,
    pub image_size: Option<usize>,
    pub seed: Option<u64>,
    pub test_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrain {
    pub epochs: Option<u64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<String>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub milestones: Option<Vec<(u64, f64)>>,
    pub seed: Option<u64>,
    pub precision: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPolicy {
    pub kind: Option<String>,
    pub mu_eq: Option<f64>,
    pub epsilon: Option<f64>,
    pub probe_size: Option<usize>,
    pub p: Option<f64>,
    pub mask_file: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOutput {
    pub dir: Option<String>,
    pub diagnostics: Option<bool>,
    pub save_checkpoint: Option<bool>,
    pub emit_plots: Option<bool>,
    pub include_optimizer_flops: Option<bool>,
}

impl RawConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| Error::Config { field: "<file>".into(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse_str(&text)
    }

    /// Later values win; used for CLI flag overrides.
    pub fn merged_with(mut self, over: RawConfig) -> RawConfig {
        fn pick<V>(a: &mut Option<V>, b: Option<V>) {
            if b.is_some() {
                *a = b;
            }
        }
        let m = self.model.get_or_insert_with(Default::default);
        if let Some(o) = over.model {
            pick(&mut m.arch, o.arch);
            pick(&mut m.hidden, o.hidden);
            pick(&mut m.channels, o.channels);
            pick(&mut m.widths, o.widths);
            pick(&mut m.blocks_per_stage, o.blocks_per_stage);
            pick(&mut m.classes, o.classes);
        }
        let d = self.data.get_or_insert_with(Default::default);
        if let Some(o) = over.data {
            pick(&mut d.source, o.source);
            pick(&mut d.idx_images, o.idx_images);
            pick(&mut d.idx_labels, o.idx_labels);
            pick(&mut d.n, o.n);
            pick(&mut d.noise, o.noise);
            pick(&mut d.label_noise, o.label_noise);
            pick(&mut d.image_size, o.image_size);
            pick(&mut d.seed, o.seed);
            pick(&mut d.test_fraction, o.test_fraction);
        }
        let t = self.train.get_or_insert_with(Default::default);
        if let Some(o) = over.train {
            pick(&mut t.epochs, o.epochs);
            pick(&mut t.batch_size, o.batch_size);
            pick(&mut t.optimizer, o.optimizer);
            pick(&mut t.lr, o.lr);
            pick(&mut t.momentum, o.momentum);
            pick(&mut t.weight_decay, o.weight_decay);
            pick(&mut t.beta1, o.beta1);
            pick(&mut t.beta2, o.beta2);
            pick(&mut t.adam_eps, o.adam_eps);
            pick(&mut t.milestones, o.milestones);
            pick(&mut t.seed, o.seed);
            pick(&mut t.precision, o.precision);
        }
        let p = self.policy.get_or_insert_with(Default::default);
        if let Some(o) = over.policy {
            pick(&mut p.kind, o.kind);
            pick(&mut p.mu_eq, o.mu_eq);
            pick(&mut p.epsilon, o.epsilon);
            pick(&mut p.probe_size, o.probe_size);
            pick(&mut p.p, o.p);
            pick(&mut p.mask_file, o.mask_file);
        }
        let u = self.output.get_or_insert_with(Default::default);
        if let Some(o) = over.output {
            pick(&mut u.dir, o.dir);
            pick(&mut u.diagnostics, o.diagnostics);
            pick(&mut u.save_checkpoint, o.save_checkpoint);
            pick(&mut u.emit_plots, o.emit_plots);
            pick(&mut u.include_optimizer_flops, o.include_optimizer_flops);
        }
        self
    }

    pub fn resolve(self) -> Result<TrainConfig> {
        TrainConfig::from_raw(self)
    }
}

// ── Resolved configuration ──────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct TrainConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub policy: PolicySection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelSection {
    pub arch: String,
    pub hidden: Vec<usize>,
    pub channels: Vec<usize>,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DataSection {
    pub source: String,
    pub idx_images: String,
    pub idx_labels: String,
    pub n: usize,
    pub noise: f64,
    pub label_noise: f64,
    pub image_size: usize,
    pub seed: u64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSection {
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub milestones: Vec<(u64, f64)>,
    pub seed: u64,
    pub precision: Precision,
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicySection {
    pub kind: String,
    pub mu_eq: f64,
    pub epsilon: f64,
    pub probe_size: usize,
    pub p: f64,
    pub mask_file: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct OutputSection {
    pub dir: String,
    pub diagnostics: bool,
    pub save_checkpoint: bool,
    pub emit_plots: bool,
    pub include_optimizer_flops: bool,
}

fn bad(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl TrainConfig {
    fn from_raw(raw: RawConfig) -> Result<TrainConfig> {
        let m = raw.model.unwrap_or_default();
        let d = raw.data.unwrap_or_default();
        let t = raw.train.unwrap_or_default();
        let p = raw.policy.unwrap_or_default();
        let o = raw.output.unwrap_or_default();

        let arch = m.arch.ok_or_else(|| bad("model.arch", "required (mlp | smallcnn | smallresnet)"))?;
        if !["mlp", "smallcnn", "smallresnet"].contains(&arch.as_str()) {
            return Err(bad("model.arch", format!("unknown architecture `{arch}`")));
        }
        let source = d.source.ok_or_else(|| {
            bad("data.source", "required (rings | rings-raw | moons | moons-raw | idx)")
        })?;
        if source == "idx" {
            if d.idx_images.is_none() || d.idx_labels.is_none() {
                return Err(bad("data.idx_images", "idx source needs image and label paths"));
            }
        } else {
            SyntheticKind::parse(&source).map_err(|e| bad("data.source", e.to_string()))?;
        }

        let optimizer = match t.optimizer.as_deref().unwrap_or("sgd") {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => return Err(bad("train.optimizer", format!("unknown optimizer `{other}`"))),
        };
        let lr = t.lr.unwrap_or(match optimizer {
            OptimizerKind::Sgd => 0.1,
            OptimizerKind::Adam => 0.001,
        });
        let precision = match t.precision.as_deref().unwrap_or("f32") {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(bad("train.precision", format!("unknown precision `{other}`"))),
        };

        let policy_kind = p.kind.unwrap_or_else(|| "neq".into());
        if !["neq", "stochastic", "none", "replay"].contains(&policy_kind.as_str()) {
            return Err(bad("policy.kind", format!("unknown policy `{policy_kind}`")));
        }
        if policy_kind == "replay" && p.mask_file.is_none() {
            return Err(bad("policy.mask_file", "replay policy needs a mask file"));
        }

        let seed = t.seed.unwrap_or(0);
        let cfg = TrainConfig {
            model: ModelSection {
                arch,
                hidden: m.hidden.unwrap_or_else(|| vec![32]),
                channels: m.channels.unwrap_or_else(|| vec![6, 12]),
                widths: m.widths.unwrap_or_else(|| vec![4, 8, 16]),
                blocks_per_stage: m.blocks_per_stage.unwrap_or(1),
                classes: m.classes.unwrap_or(4),
            },
            data: DataSection {
                source,
                idx_images: d.idx_images.unwrap_or_default(),
                idx_labels: d.idx_labels.unwrap_or_default(),
                n: d.n.unwrap_or(10_000),
                noise: d.noise.unwrap_or(0.35),
                label_noise: d.label_noise.unwrap_or(0.0),
                image_size: d.image_size.unwrap_or(10),
                seed: d.seed.unwrap_or(seed.wrapping_add(1)),
                test_fraction: d.test_fraction.unwrap_or(0.2),
            },
            train: TrainSection {
                epochs: t.epochs.unwrap_or(60),
                batch_size: t.batch_size.unwrap_or(16),
                optimizer,
                lr,
                momentum: t.momentum.unwrap_or(0.9),
                weight_decay: t.weight_decay.unwrap_or(5e-4),
                beta1: t.beta1.unwrap_or(0.9),
                beta2: t.beta2.unwrap_or(0.999),
                adam_eps: t.adam_eps.unwrap_or(1e-8),
                milestones: t.milestones.unwrap_or_else(|| vec![(24, 10.0), (36, 10.0)]),
                seed,
                precision,
            },
            policy: PolicySection {
                kind: policy_kind,
                mu_eq: p.mu_eq.unwrap_or(0.5),
                epsilon: p.epsilon.unwrap_or(0.001),
                probe_size: p.probe_size.unwrap_or(50),
                p: p.p.unwrap_or(0.5),
                mask_file: p.mask_file.unwrap_or_default(),
            },
            output: OutputSection {
                dir: o.dir.unwrap_or_else(|| "runs/default".into()),
                diagnostics: o.diagnostics.unwrap_or(false),
                save_checkpoint: o.save_checkpoint.unwrap_or(true),
                emit_plots: o.emit_plots.unwrap_or(false),
                include_optimizer_flops: o.include_optimizer_flops.unwrap_or(true),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.classes == 0 {
            return Err(bad("model.classes", "must be positive"));
        }
        if self.train.epochs == 0 {
            return Err(bad("train.epochs", "must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(bad("train.batch_size", "must be positive"));
        }
        if !(self.train.lr >= 0.0) || !self.train.lr.is_finite() {
            return Err(bad("train.lr", format!("must be non-negative, got {}", self.train.lr)));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(bad("train.momentum", format!("must be in [0, 1), got {}", self.train.momentum)));
        }
        if self.train.weight_decay < 0.0 {
            return Err(bad("train.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return Err(bad("train.beta1", "adam betas must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.policy.p) {
            return Err(bad("policy.p", format!("must be in [0, 1], got {}", self.policy.p)));
        }
        if self.policy.epsilon < 0.0 || !self.policy.epsilon.is_finite() {
            return Err(bad("policy.epsilon", format!("must be >= 0, got {}", self.policy.epsilon)));
        }
        if !(0.0..1.0).contains(&self.policy.mu_eq) {
            return Err(bad("policy.mu_eq", format!("must be in [0, 1), got {}", self.policy.mu_eq)));
        }
        if self.policy.probe_size == 0 {
            return Err(bad("policy.probe_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(bad("data.test_fraction", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.data.label_noise) {
            return Err(bad("data.label_noise", "must be in [0, 1]"));
        }
        // Schedule validation (strictly increasing, positive divisors).
        Schedule::new(self.train.lr, self.train.milestones.clone())?;
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.train.lr, self.train.milestones.clone()).expect("validated")
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            mu_eq: self.policy.mu_eq,
            epsilon: self.policy.epsilon,
            probe_size: self.policy.probe_size,
        }
    }

    pub fn policy_kind(&self) -> PolicyKind {
        match self.policy.kind.as_str() {
            "neq" => PolicyKind::Neq,
            "stochastic" => PolicyKind::Stochastic,
            "none" => PolicyKind::None,
            "replay" => PolicyKind::Replay,
            _ => unreachable!("validated"),
        }
    }

    /// Instantiate the architecture against the dataset's sample shape.
    pub fn resolve_arch(&self, ds: &Dataset) -> Result<ArchSpec> {
        let classes = self.model.classes.max(ds.classes);
        let sample: usize = ds.sample_len();
        Ok(match self.model.arch.as_str() {
            "mlp" => ArchSpec::Mlp { input: sample, hidden: self.model.hidden.clone(), classes },
            "smallcnn" => {
                let [c, h, w] = ds.shape[..] else {
                    return Err(bad("model.arch", "smallcnn needs (C, H, W) samples"));
                };
                ArchSpec::SmallCnn { in_shape: [c, h, w], channels: self.model.channels.clone(), classes }
            }
            "smallresnet" => {
                let [c, h, w] = ds.shape[..] else {
                    return Err(bad("model.arch", "smallresnet needs (C, H, W) samples"));
                };
                ArchSpec::SmallResnet {
                    in_shape: [c, h, w],
                    widths: self.model.widths.clone(),
                    blocks_per_stage: self.model.blocks_per_stage,
                    classes,
                }
            }
            _ => unreachable!("validated"),
        })
    }

    /// Load or generate the dataset named by the config.
    pub fn load_dataset(&self) -> Result<Dataset> {
        if self.data.source == "idx" {
            crate::data::load_idx_dataset(
                Path::new(&self.data.idx_images),
                Path::new(&self.data.idx_labels),
            )
        } else {
            let kind = SyntheticKind::parse(&self.data.source)?;
            let classes = match kind {
                SyntheticKind::Moons | SyntheticKind::MoonsRaw => 2,
                _ => self.model.classes,
            };
            crate::data::gen_synthetic(&SyntheticSpec {
                kind,
                n: self.data.n,
                noise: self.data.noise,
                label_noise: self.data.label_noise,
                classes,
                image_size: self.data.image_size,
                seed: self.data.seed,
            })
        }
    }

    /// Resolved-config dump: full TOML with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("resolved config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let raw = RawConfig::parse_str(
            "[model]\narch = \"smallcnn\"\n[data]\nsource = \"rings\"\n",
        )
        .unwrap();
        let cfg = raw.resolve().unwrap();
        assert_eq!(cfg.train.epochs, 60);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.lr, 0.1);
        assert_eq!(cfg.train.milestones, vec![(24, 10.0), (36, 10.0)]);
        assert_eq!(cfg.policy.kind, "neq");
        assert_eq!(cfg.policy.mu_eq, 0.5);
        assert_eq!(cfg.policy.epsilon, 0.001);
        assert_eq!(cfg.policy.probe_size, 50);
        assert_eq!(cfg.train.weight_decay, 5e-4);
    }

    #[test]
    fn adam_default_lr_is_adam_specific() {
        let raw = RawConfig::parse_str(
            "[model]\narch = \"mlp\"\n[data]\nsource = \"rings-raw\"\n[train]\noptimizer = \"adam\"\n",
        )
        .unwrap();
        let cfg = raw.resolve().unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.beta1, 0.9);
        assert_eq!(cfg.train.beta2, 0.999);
    }

    #[test]
    fn negative_epsilon_error_names_the_field() {
        let raw = RawConfig::parse_str(
            "[model]\narch = \"mlp\"\n[data]\nsource = \"rings\"\n[policy]\nepsilon = -1.0\n",
        )
        .unwrap();
        let err = raw.resolve().unwrap_err();
        assert!(err.to_string().contains("policy.epsilon"), "{err}");
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RawConfig::parse_str("[train]\nbogus_knob = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{err}");
    }

    #[test]
    fn resolved_dump_roundtrips_through_toml() {
        let raw = RawConfig::parse_str(
            "[model]\narch = \"smallcnn\"\n[data]\nsource = \"rings\"\n",
        )
        .unwrap();
        let cfg = raw.resolve().unwrap();
        let dump = cfg.to_toml();
        assert!(dump.contains("epochs = 60"));
        assert!(dump.contains("mu_eq = 0.5"));
    }
}
