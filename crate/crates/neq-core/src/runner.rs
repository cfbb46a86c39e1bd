//! End-to-end run execution: config -> dataset -> split -> train -> files.
//!
//! Each run owns a directory:
//! ```text
//! <dir>/resolved.toml   every default filled in
//! <dir>/metrics.csv     one row per epoch (deterministic bytes)
//! <dir>/masks.txt       replay file of the masks actually applied
//! <dir>/model.ckpt      final parameters (optional)
//! <dir>/plots.svg       three-panel summary (optional)
//! <dir>/run_info.txt    wall-clock sidecar (not deterministic)
//! <dir>/diag/           per-epoch tracker CSVs and signature dumps (optional)
//! ```

use std::path::{Path, PathBuf};

use crate::config::{Precision, TrainConfig};
use crate::data::{split_probe, SplitData};
use crate::error::{Error, Result};
use crate::metrics::{render_csv, MetricsRecord};
use crate::model::build_model;
use crate::policy::{FreezePolicy, MaskReplay};
use crate::scalar::Scalar;
use crate::train::{run_training, NoopObserver, OptimizerSettings, TrainOutput, TrainParams};
use crate::tracker::write_diagnostics_csv;

pub struct RunSummary {
    pub dir: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    pub mean_bprop_flops: f64,
    pub final_accuracy: f64,
    pub mean_updated_fraction: f64,
}

pub fn train_params(cfg: &TrainConfig) -> TrainParams {
    let optimizer = match cfg.train.optimizer {
        crate::optim::OptimizerKind::Sgd => OptimizerSettings::Sgd {
            momentum: cfg.train.momentum,
            weight_decay: cfg.train.weight_decay,
        },
        crate::optim::OptimizerKind::Adam => OptimizerSettings::Adam {
            beta1: cfg.train.beta1,
            beta2: cfg.train.beta2,
            eps: cfg.train.adam_eps,
            weight_decay: cfg.train.weight_decay,
        },
    };
    TrainParams {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        optimizer,
        schedule: cfg.schedule(),
        seed: cfg.train.seed,
        include_optimizer_flops: cfg.output.include_optimizer_flops,
    }
}

fn build_policy<T: Scalar>(
    cfg: &TrainConfig,
    model: &crate::model::Model<T>,
) -> Result<FreezePolicy<T>> {
    Ok(match cfg.policy.kind.as_str() {
        "neq" => FreezePolicy::neq(model, cfg.tracker_config())?,
        "stochastic" => FreezePolicy::Stochastic { p: cfg.policy.p, seed: cfg.train.seed },
        "none" => FreezePolicy::None,
        "replay" => FreezePolicy::Replay(MaskReplay::load(Path::new(&cfg.policy.mask_file))?),
        _ => unreachable!("validated"),
    })
}

/// Split the configured dataset into train / probe / test.
pub fn load_split(cfg: &TrainConfig) -> Result<SplitData> {
    let ds = cfg.load_dataset()?;
    split_probe(&ds, cfg.policy.probe_size, cfg.data.test_fraction, cfg.data.seed)
}

/// Run one configured training job, writing the run directory. The output
/// directory is resolved against `out_root` when relative.
pub fn execute(cfg: &TrainConfig, out_root: Option<&Path>) -> Result<RunSummary> {
    let dir = resolve_dir(&cfg.output.dir, out_root);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    std::fs::write(dir.join("resolved.toml"), cfg.to_toml())
        .map_err(|e| Error::io(dir.display().to_string(), e))?;

    match cfg.train.precision {
        Precision::F32 => execute_typed::<f32>(cfg, &dir),
        Precision::F64 => execute_typed::<f64>(cfg, &dir),
    }
}

fn execute_typed<T: Scalar>(cfg: &TrainConfig, dir: &Path) -> Result<RunSummary> {
    let started = std::time::Instant::now();
    let split = load_split(cfg)?;
    let arch = cfg.resolve_arch(&split.train)?;
    let model = build_model::<T>(&arch, cfg.train.seed)?;
    let policy = build_policy(cfg, &model)?;
    let params = train_params(cfg);

    let out: TrainOutput<T> = run_training(model, &split, &params, policy, &mut NoopObserver)?;

    write_outputs(cfg, dir, &out)?;
    let info = format!(
        "wall_seconds_total {}\nwall_seconds_per_epoch {}\n",
        started.elapsed().as_secs_f64(),
        out.metrics.iter().map(|m| m.wall_seconds).sum::<f64>() / out.metrics.len() as f64,
    );
    std::fs::write(dir.join("run_info.txt"), info)
        .map_err(|e| Error::io(dir.display().to_string(), e))?;

    Ok(summarize(dir.to_path_buf(), out.metrics))
}

fn write_outputs<T: Scalar>(cfg: &TrainConfig, dir: &Path, out: &TrainOutput<T>) -> Result<()> {
    std::fs::write(dir.join("metrics.csv"), render_csv(&out.metrics))
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    out.mask_log.write(&dir.join("masks.txt"))?;
    if cfg.output.save_checkpoint {
        out.model.save_checkpoint(&dir.join("model.ckpt"))?;
    }
    if cfg.output.emit_plots {
        crate::plot::emit_plots(&out.metrics, &cfg.train.milestones, &dir.join("plots.svg"))?;
    }
    if cfg.output.diagnostics && !out.diagnostics.is_empty() {
        let diag_dir = dir.join("diag");
        std::fs::create_dir_all(&diag_dir)
            .map_err(|e| Error::io(diag_dir.display().to_string(), e))?;
        for (epoch, diags) in &out.diagnostics {
            write_diagnostics_csv(&out.model, diags, &diag_dir.join(format!("epoch_{epoch}.csv")))?;
        }
    }
    Ok(())
}

fn summarize(dir: PathBuf, metrics: Vec<MetricsRecord>) -> RunSummary {
    let n = metrics.len() as f64;
    let mean_bprop_flops = metrics.iter().map(|m| m.bprop_flops_mean).sum::<f64>() / n;
    let mean_updated_fraction = metrics.iter().map(|m| m.updated_fraction).sum::<f64>() / n;
    let final_accuracy = metrics.last().map(|m| m.test_accuracy).unwrap_or(f64::NAN);
    RunSummary { dir, metrics, mean_bprop_flops, final_accuracy, mean_updated_fraction }
}

/// Relative output directories resolve against `out_root` (typically the
/// NEQ_OUT_ROOT environment variable), absolute ones stand alone.
pub fn resolve_dir(dir: &str, out_root: Option<&Path>) -> PathBuf {
    let p = PathBuf::from(dir);
    match out_root {
        Some(root) if p.is_relative() => root.join(p),
        _ => p,
    }
}
