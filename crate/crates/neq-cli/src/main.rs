//! `neq`: train, sweep, plot, and replay experiments.
//!
//! Subcommands:
//! * `train`       one run from a config file plus flag overrides
//! * `sweep`       grid over epsilon / mu_eq / probe-size / p and seeds
//! * `plot`        render the three-panel SVG from a metrics CSV
//! * `replay-mask` re-run a config under a recorded mask file
//!
//! Relative output directories resolve against $NEQ_OUT_ROOT when set.
//! Exit code 0 on success; errors print one `error: ...` line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neq_core::config::{RawConfig, RawData, RawModel, RawOutput, RawPolicy, RawTrain, TrainConfig};
use neq_core::metrics;
use neq_core::runner::{self, RunSummary};

const OUT_ROOT_ENV: &str = "NEQ_OUT_ROOT";

#[derive(Parser)]
#[command(name = "neq", about = "equilibrium-freezing training engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training job.
    Train(TrainArgs),
    /// Run a grid of jobs and summarize mean and stddev per cell.
    Sweep(SweepArgs),
    /// Render plots from an existing metrics CSV.
    Plot(PlotArgs),
    /// Re-run a config with masks replayed from a file.
    ReplayMask(ReplayArgs),
}

#[derive(Args, Clone)]
struct Overrides {
    /// Config file (TOML). Flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    /// Stage widths for smallcnn/smallresnet, comma separated.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<usize>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    mu_eq: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    probe_size: Option<usize>,
    /// Stochastic freezing probability.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    data_n: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    label_noise: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    precision: Option<String>,
    /// Output directory (relative paths resolve against $NEQ_OUT_ROOT).
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    diagnostics: Option<bool>,
    #[arg(long)]
    emit_plots: Option<bool>,
    #[arg(long)]
    mask_file: Option<String>,
}

impl Overrides {
    fn raw(&self) -> RawConfig {
        RawConfig {
            model: Some(RawModel {
                arch: self.arch.clone(),
                classes: self.classes,
                channels: if self.channels.is_empty() { None } else { Some(self.channels.clone()) },
                ..Default::default()
            }),
            data: Some(RawData {
                source: self.dataset.clone(),
                n: self.data_n,
                noise: self.noise,
                label_noise: self.label_noise,
                image_size: self.image_size,
                seed: self.data_seed,
                ..Default::default()
            }),
            train: Some(RawTrain {
                epochs: self.epochs,
                batch_size: self.batch_size,
                optimizer: self.optimizer.clone(),
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                seed: self.seed,
                precision: self.precision.clone(),
                ..Default::default()
            }),
            policy: Some(RawPolicy {
                kind: self.policy.clone(),
                mu_eq: self.mu_eq,
                epsilon: self.epsilon,
                probe_size: self.probe_size,
                p: self.p,
                mask_file: self.mask_file.clone(),
            }),
            output: Some(RawOutput {
                dir: self.out.clone(),
                diagnostics: self.diagnostics,
                emit_plots: self.emit_plots,
                ..Default::default()
            }),
        }
    }

    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let base = match &self.config {
            Some(path) => RawConfig::load(path)?,
            None => RawConfig::default(),
        };
        Ok(base.merged_with(self.raw()).resolve()?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Epsilon grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    epsilon_list: Vec<f64>,
    /// mu_eq grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    mu_list: Vec<f64>,
    /// Probe-size grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    probe_list: Vec<usize>,
    /// Stochastic-probability grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    p_list: Vec<f64>,
    /// Seeds to average over, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics CSV produced by `train`.
    #[arg(long)]
    metrics: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
    /// Schedule milestones to mark, as epoch:divisor pairs.
    #[arg(long, value_delimiter = ',')]
    milestones: Vec<String>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Mask replay file recorded by a previous run.
    #[arg(long)]
    mask_file: String,
}

fn out_root() -> Option<PathBuf> {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from)
}

fn print_summary(s: &RunSummary) {
    println!(
        "run {}: mean bprop FLOPs/iter {:.3e}, mean updated fraction {:.4}, final accuracy {:.4}",
        s.dir.display(),
        s.mean_bprop_flops,
        s.mean_updated_fraction,
        s.final_accuracy
    );
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.overrides.resolve()?;
    let summary = runner::execute(&cfg, out_root().as_deref())?;
    print_summary(&summary);
    Ok(())
}

fn cmd_replay(args: &ReplayArgs) -> anyhow::Result<()> {
    let mut overrides = args.overrides.clone();
    overrides.policy = Some("replay".into());
    overrides.mask_file = Some(args.mask_file.clone());
    let cfg = overrides.resolve()?;
    let summary = runner::execute(&cfg, out_root().as_deref())?;
    print_summary(&summary);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let base = args.overrides.resolve()?;
    // Axes: any combination of the provided grids; empty grids pin the
    // base value.
    let eps = non_empty(&args.epsilon_list, base.policy.epsilon);
    let mus = non_empty(&args.mu_list, base.policy.mu_eq);
    let probes = non_empty(&args.probe_list, base.policy.probe_size);
    let ps = non_empty(&args.p_list, base.policy.p);

    let root = runner::resolve_dir(&base.output.dir, out_root().as_deref());
    std::fs::create_dir_all(&root)?;
    let mut rows = vec![
        "epsilon,mu_eq,probe_size,p,seeds,bprop_flops_mean,bprop_flops_std,accuracy_mean,accuracy_std,updated_fraction_mean".to_string(),
    ];

    for &e in &eps {
        for &mu in &mus {
            for &probe in &probes {
                for &p in &ps {
                    let mut flops = Vec::new();
                    let mut accs = Vec::new();
                    let mut fracs = Vec::new();
                    for &seed in &args.seeds {
                        let mut cfg = base.clone();
                        cfg.policy.epsilon = e;
                        cfg.policy.mu_eq = mu;
                        cfg.policy.probe_size = probe;
                        cfg.policy.p = p;
                        cfg.train.seed = seed;
                        cfg.output.dir = format!(
                            "{}/eps{e}_mu{mu}_probe{probe}_p{p}_seed{seed}",
                            base.output.dir
                        );
                        cfg.validate()?;
                        let s = runner::execute(&cfg, out_root().as_deref())?;
                        print_summary(&s);
                        flops.push(s.mean_bprop_flops);
                        accs.push(s.final_accuracy);
                        fracs.push(s.mean_updated_fraction);
                    }
                    let (fm, fs) = mean_std(&flops);
                    let (am, as_) = mean_std(&accs);
                    let (um, _) = mean_std(&fracs);
                    rows.push(format!(
                        "{e},{mu},{probe},{p},{},{fm},{fs},{am},{as_},{um}",
                        args.seeds.len()
                    ));
                }
            }
        }
    }
    let out = root.join("sweep_summary.csv");
    std::fs::write(&out, rows.join("\n") + "\n")?;
    println!("sweep summary written to {}", out.display());
    Ok(())
}

fn non_empty<V: Copy>(list: &[V], fallback: V) -> Vec<V> {
    if list.is_empty() {
        vec![fallback]
    } else {
        list.to_vec()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_plot(args: &PlotArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.metrics)?;
    let records = metrics::parse_csv(&text)?;
    let mut milestones = Vec::new();
    for m in &args.milestones {
        let (e, d) = m
            .split_once(':')
            .ok_or_else(|| anyhow::anyhow!("milestone `{m}` is not epoch:divisor"))?;
        milestones.push((e.parse::<u64>()?, d.parse::<f64>()?));
    }
    neq_core::plot::emit_plots(&records, &milestones, Path::new(&args.out))?;
    println!("plots written to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Plot(a) => cmd_plot(a),
        Command::ReplayMask(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
