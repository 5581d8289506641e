//! Pipeline driver: dataset generation, training, fine-tuning, evaluation,
//! roll-out correction, convergence probes, and SVG plotting.
//!
//! Output paths are resolved against `FMSD_OUT` when that variable is set
//! (relative paths only); inputs are read as given. Exit codes: 0 success,
//! 2 usage error, 1 runtime error.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fmsd::correct::{
    correction_to_csv, rollout, Corrector, ModelCorrector, OracleCorrector, QueryCond,
    ZeroCorrector,
};
use fmsd::dataset::{build_demo, generate_dataset, read_shard, write_shard, ProtocolConfig, ShardData};
use fmsd::integrate::{
    coarse_error_scaling_probe, scaling_probe_defaults, simulate_pair, strong_order_probe, Method,
    NoiseStream, ScalingProbeConfig, SimOptions, StrongOrderConfig,
};
use fmsd::metrics::{evaluate_correction, metrics_csv};
use fmsd::model::{CheckpointMeta, ModelConfig, ModelParams};
use fmsd::rng::{substream, StreamRole};
use fmsd::sde::{self, SystemId};
use fmsd::train::{
    finetune as run_finetune, load_train_checkpoint, loss_curve_to_csv, save_train_checkpoint,
    train_loop, OptimState, TrainConfig,
};
use fmsd::{Error, Result};

fn parse_system(s: &str) -> std::result::Result<SystemId, String> {
    SystemId::parse(s).map_err(|_| {
        format!(
            "unknown system `{s}`; known: {}",
            sde::ALL_SYSTEMS
                .iter()
                .map(|id| id.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )
    })
}

#[derive(Parser, Debug)]
#[command(
    name = "fmsd",
    version,
    about = "Coarse-to-fine SDE simulation with in-context transformer error correction",
    long_about = "Simulate paired fine/coarse SDE trajectories, build error-series datasets, \
                  train a small in-context transformer to predict correction terms, and \
                  evaluate corrected trajectories against fine references.\n\n\
                  Relative output paths are placed under $FMSD_OUT when it is set."
)]
struct Cli {
    /// Print the resolved run configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a trajectory shard: params x ICs x noise realizations.
    GenData(GenDataArgs),
    /// Train an error-correction model on one or more shards.
    Train(TrainArgs),
    /// Continue training a checkpoint on a small dataset.
    Finetune(FinetuneArgs),
    /// Evaluate corrected vs coarse trajectories on a test shard.
    Eval(EvalArgs),
    /// Long-horizon block roll-out correction on a fresh trajectory.
    Rollout(RolloutArgs),
    /// Empirical convergence probes (strong order / coarse-error scaling).
    Convergence(ConvergenceArgs),
    /// Render a produced CSV as an SVG chart.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Serialize, Deserialize, PartialEq)]
struct GenDataArgs {
    /// System id (e.g. ou, gbm, stochastic_lorenz).
    #[arg(long, value_parser = parse_system)]
    system: SystemId,
    /// Parameter draws (evaluation protocol full scale: 1000).
    #[arg(long, default_value_t = 20)]
    params: usize,
    /// Initial conditions per parameter set (full scale: 10; test sets add
    /// one extra IC reserved as the demo pool).
    #[arg(long, default_value_t = 10)]
    ics: usize,
    /// Noise realizations per (param, IC) pair (full scale: 40).
    #[arg(long, default_value_t = 40)]
    noises: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coarse steps per trajectory (default: system setting).
    #[arg(long)]
    n_coarse: Option<usize>,
    /// Coarse stride k (default: system setting).
    #[arg(long)]
    stride_k: Option<usize>,
    /// 1 = serial reference; anything else uses the thread pool.
    #[arg(long, default_value_t = 2)]
    workers: usize,
    /// Shard file to write (manifest sidecar: <out>.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize, Deserialize, PartialEq)]
struct TrainArgs {
    /// Training shard(s); repeat the flag to mix systems.
    #[arg(long, required = true)]
    shard: Vec<PathBuf>,
    /// Optimizer steps per epoch (full scale: 10000).
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Epochs; a checkpoint is saved after each (full scale: 100).
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Demos per sample (evaluation protocol: 4).
    #[arg(long, default_value_t = 4)]
    k_demos: usize,
    /// Transformer depth (full scale: 6).
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Attention heads, each of width d_model (full scale: 8).
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Embedding width (full scale: 256).
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// Feed-forward width (full scale: 1024).
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 1e-4)]
    peak_lr: f64,
    #[arg(long, default_value_t = 0.05)]
    warmup_frac: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Timestamp-dropout fraction.
    #[arg(long, default_value_t = 0.05)]
    dropout: f64,
    /// Fraction of samples carrying an embedded text prompt.
    #[arg(long, default_value_t = 0.0)]
    prompt_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 1 = serial determinism reference.
    #[arg(long, default_value_t = 2)]
    workers: usize,
    /// Checkpoint to write (per-epoch checkpoints get .epochN suffixes).
    #[arg(long)]
    out: PathBuf,
    /// Write the per-step loss curve CSV here.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Deserialize, PartialEq)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    shard: PathBuf,
    /// Optimizer steps (published protocol: 1000 or 2000).
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Demos per sample (default: from the checkpoint).
    #[arg(long)]
    k_demos: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    peak_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Deserialize, PartialEq)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Test shard; IC 0 of each parameter group is the demo pool.
    #[arg(long)]
    shard: PathBuf,
    /// Demos per query (default: from the checkpoint).
    #[arg(long)]
    k_demos: Option<usize>,
    /// Metric rows (system, method, MAE, RMSE, AMD, MAD).
    #[arg(long)]
    out: PathBuf,
    /// Signed-error histogram of corrected trajectories.
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Signed-error histogram of the coarse baseline.
    #[arg(long)]
    histogram_coarse: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum CorrectorKind {
    /// Trained model from --ckpt.
    Model,
    /// True error (pipeline validation).
    Oracle,
    /// Zero correction (coarse baseline).
    Zero,
}

#[derive(Args, Debug, Serialize, Deserialize, PartialEq)]
struct RolloutArgs {
    #[arg(long, value_parser = parse_system)]
    system: SystemId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of roll-out blocks.
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    /// Coarse steps per block (default: system horizon).
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long, default_value_t = 4)]
    k_demos: usize,
    #[arg(long, value_enum, default_value_t = CorrectorKind::Oracle)]
    corrector: CorrectorKind,
    /// Checkpoint (required with --corrector model).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Named parameter preset instead of sampled coefficients.
    #[arg(long)]
    preset: Option<String>,
    /// Output CSV: n, t, coarse, predicted_err, corrected, fine per dim.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum ProbeKind {
    /// Integrator strong order on GBM vs the analytic solution.
    Strong,
    /// Final-step coarse error vs the coarse step size.
    Scaling,
}

#[derive(Args, Debug, Serialize, Deserialize, PartialEq)]
struct ConvergenceArgs {
    #[arg(long, value_enum, default_value_t = ProbeKind::Strong)]
    probe: ProbeKind,
    /// System: gbm for the strong probe; gbm or ou for scaling.
    #[arg(long, value_parser = parse_system, default_value = "gbm")]
    system: SystemId,
    /// Integrator: em or milstein (strong probe only).
    #[arg(long, default_value = "em")]
    method: String,
    /// Monte-Carlo realizations.
    #[arg(long, default_value_t = 2000)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum PlotKind {
    Line,
    Histogram,
}

#[derive(Args, Debug, Serialize, Deserialize, PartialEq)]
struct PlotArgs {
    /// Input CSV produced by any subcommand.
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = PlotKind::Line)]
    kind: PlotKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 800)]
    width: usize,
    #[arg(long, default_value_t = 500)]
    height: usize,
}

// ── Helpers ──────────────────────────────────────────────────────────────────

fn out_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os("FMSD_OUT") {
        Some(base) => PathBuf::from(base).join(p),
        None => p.to_path_buf(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let resolved = out_path(path);
    if let Some(parent) = resolved.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&resolved, text)
        .map_err(|e| Error::InvalidArg(format!("cannot write {}: {e}", resolved.display())))
}

fn read_shard_at(path: &Path) -> Result<ShardData> {
    read_shard(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArg(format!("cannot read shard {}: {io}", path.display())),
        other => other,
    })
}

fn epoch_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "model".into());
    out.with_file_name(format!("{stem}.epoch{epoch}.fmck"))
}

// ── Subcommand drivers ───────────────────────────────────────────────────────

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let sys = sde::get(args.system);
    let cfg = ProtocolConfig {
        n_params: args.params,
        n_ics: args.ics,
        n_noises: args.noises,
        n_coarse: args.n_coarse,
        stride_k: args.stride_k,
        base_seed: args.seed,
        max_retries: 20,
        parallel: args.workers > 1,
    };
    let set = generate_dataset(sys, &cfg)?;
    let path = out_path(&args.out);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let manifest = write_shard(&path, &set)?;
    println!(
        "wrote {} trajectories ({} resampled after blow-up) to {}",
        manifest.offsets.len(),
        manifest.rejections,
        path.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let shards: Vec<ShardData> = args
        .shard
        .iter()
        .map(|p| read_shard_at(p))
        .collect::<Result<_>>()?;
    let shard_refs: Vec<&ShardData> = shards.iter().collect();

    let model_cfg = ModelConfig {
        n_layers: args.layers,
        n_heads: args.heads,
        d_model: args.d_model,
        d_ff: args.d_ff,
        max_examples: args.k_demos + 1,
        max_prompt_tokens: fmsd::dataset::DEFAULT_PROMPT_TOKENS,
        feature_dim: fmsd::dataset::FEATURE_DIM,
        out_dim: fmsd::dataset::OUT_DIM,
    };
    let mut params = ModelParams::<f32>::init(&model_cfg, args.seed)?;
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        steps_per_epoch: args.steps,
        batch_size: args.batch,
        k_demos: args.k_demos,
        prompt_probability: args.prompt_prob,
        seed: args.seed,
        dropout_fraction: args.dropout,
        peak_lr: args.peak_lr,
        warmup_frac: args.warmup_frac,
        weight_decay: args.weight_decay,
        clip_norm: args.clip,
        workers: args.workers,
    };
    let mut opt = OptimState::new(&params, train_cfg.weight_decay);

    let mut meta = CheckpointMeta::new(model_cfg);
    meta.k_demos = args.k_demos;
    meta.system = Some(shards[0].manifest.system);
    meta.norm = Some(shards[0].manifest.norm.clone());
    meta.norms = shards
        .iter()
        .map(|s| (s.manifest.system, s.manifest.norm.clone()))
        .collect();

    let out = out_path(&args.out);
    let steps_per_epoch = args.steps as u64;
    let mut hook_meta = meta.clone();
    let mut hook = |epoch: usize, p: &ModelParams<f32>, o: &OptimState<f32>| -> Result<()> {
        hook_meta.train_step = epoch as u64 * steps_per_epoch;
        save_train_checkpoint(&epoch_path(&out, epoch), p, &hook_meta, Some(o))
    };
    let output = train_loop(
        &mut params,
        &mut opt,
        &shard_refs,
        &train_cfg,
        0,
        None,
        Some(&mut hook),
    )?;

    meta.train_step = train_cfg.total_steps();
    save_train_checkpoint(&out, &params, &meta, Some(&opt))?;
    if let Some(csv_path) = &args.loss_csv {
        write_text(csv_path, &loss_curve_to_csv(&output.loss_curve))?;
    }
    let last = output.loss_curve.last().map(|p| p.msd).unwrap_or(f64::NAN);
    println!(
        "trained {} steps; final batch msd {last:.6}; checkpoint {}",
        output.loss_curve.len(),
        out.display()
    );
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let (mut params, mut meta, _) = load_train_checkpoint(&args.ckpt, 1e-4)?;
    let shard = read_shard_at(&args.shard)?;
    let cfg = TrainConfig {
        batch_size: args.batch,
        k_demos: args.k_demos.unwrap_or(meta.k_demos),
        seed: args.seed,
        peak_lr: args.peak_lr,
        ..Default::default()
    };
    let output = run_finetune(&mut params, &shard, args.iters, &cfg, None)?;
    meta.train_step += args.iters;
    if !meta.norms.iter().any(|(s, _)| *s == shard.manifest.system) {
        meta.norms
            .push((shard.manifest.system, shard.manifest.norm.clone()));
    }
    let out = out_path(&args.out);
    save_train_checkpoint(&out, &params, &meta, None)?;
    if let Some(csv_path) = &args.loss_csv {
        write_text(csv_path, &loss_curve_to_csv(&output.loss_curve))?;
    }
    println!(
        "fine-tuned {} steps on {}; checkpoint {}",
        args.iters,
        shard.manifest.system,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (params, meta, _) = load_train_checkpoint(&args.ckpt, 1e-4)?;
    let shard = read_shard_at(&args.shard)?;
    let norm = meta
        .norm_for(shard.manifest.system)
        .ok_or_else(|| {
            Error::InvalidArg(format!(
                "checkpoint has no normalization stats for system {}; fine-tune on it first",
                shard.manifest.system
            ))
        })?
        .clone();
    let corrector = ModelCorrector::new(params, norm);
    let k = args.k_demos.unwrap_or(meta.k_demos);
    let report = evaluate_correction(&shard, &corrector, k)?;

    let csv = metrics_csv(&[
        (report.system, "coarse", report.coarse),
        (report.system, "corrected", report.corrected),
    ]);
    write_text(&args.out, &csv)?;
    if let Some(p) = &args.histogram {
        write_text(p, &report.histogram_corrected.to_csv())?;
    }
    if let Some(p) = &args.histogram_coarse {
        write_text(p, &report.histogram_coarse.to_csv())?;
    }
    println!(
        "{}: {} equations x {} realizations; AMD coarse {:.6e} -> corrected {:.6e} (x{:.2} better)",
        report.system,
        report.n_eq,
        report.m,
        report.coarse.amd,
        report.corrected.amd,
        report.coarse.amd / report.corrected.amd.max(1e-300),
    );
    Ok(())
}

fn cmd_rollout(args: &RolloutArgs) -> Result<()> {
    let sys = sde::get(args.system);
    let block_len = args.block_len.unwrap_or(sys.horizon_steps_coarse);
    let total = args.blocks * block_len;
    if total == 0 {
        return Err(Error::InvalidArg("blocks * block_len must be positive".into()));
    }

    let params = match &args.preset {
        Some(name) => sys
            .presets()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| {
                Error::InvalidArg(format!(
                    "unknown preset `{name}` for {}; available: {}",
                    sys.id,
                    sys.presets()
                        .iter()
                        .map(|(n, _)| n.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })?,
        None => sys.sample_params(&mut substream(
            args.seed,
            sys.id.tag(),
            StreamRole::Params,
            0,
            0,
            0,
        )),
    };

    let opts = SimOptions::default();
    let simulate = |ic_idx: u64, noise_idx: u64, n: usize| {
        let x0 = sys.sample_initial(&mut substream(
            args.seed,
            sys.id.tag(),
            StreamRole::InitialCondition,
            0,
            ic_idx,
            0,
        ));
        let mut ns = NoiseStream::for_trajectory(
            args.seed,
            sys.id,
            sys.dt_fine,
            sys.noise_dim,
            0,
            ic_idx,
            noise_idx,
        );
        simulate_pair(sys, &params, &x0, &mut ns, n, sys.stride_k, &opts)
    };

    let long_pair = simulate(0, 0, total)?;
    let long = QueryCond::from_pair(&long_pair);
    let oracle = OracleCorrector::from_pair(&long_pair);

    let demos: Vec<_> = (1..=args.k_demos as u64)
        .map(|i| simulate(i, i, block_len).and_then(|p| build_demo(&p)))
        .collect::<Result<_>>()?;

    let model_corrector;
    let corrector: &dyn Corrector = match args.corrector {
        CorrectorKind::Oracle => &oracle,
        CorrectorKind::Zero => &ZeroCorrector,
        CorrectorKind::Model => {
            let ckpt = args
                .ckpt
                .as_ref()
                .ok_or_else(|| Error::InvalidArg("--corrector model requires --ckpt".into()))?;
            let (p, meta, _) = load_train_checkpoint(ckpt, 1e-4)?;
            let norm = meta
                .norm_for(sys.id)
                .ok_or_else(|| {
                    Error::InvalidArg(format!(
                        "checkpoint has no normalization stats for system {}",
                        sys.id
                    ))
                })?
                .clone();
            model_corrector = ModelCorrector::new(p, norm);
            &model_corrector
        }
    };

    let result = rollout(corrector, &demos, &long, block_len)?;
    let csv = correction_to_csv(&result, Some(&oracle.fine));
    write_text(&args.out, &csv)?;

    let mut worst = 0.0f64;
    for (n, c) in result.corrected.iter().enumerate() {
        for d in 0..result.state_dim {
            worst = worst.max((c[d] - oracle.fine[n][d]).abs());
        }
    }
    println!(
        "{}: {} blocks x {} steps with {} corrector; max |corrected - fine| = {:.3e}",
        sys.id,
        args.blocks,
        block_len,
        corrector.name(),
        worst
    );
    Ok(())
}

fn cmd_convergence(args: &ConvergenceArgs) -> Result<()> {
    match args.probe {
        ProbeKind::Strong => {
            if args.system != SystemId::Gbm {
                return Err(Error::InvalidArg(
                    "the strong-order probe uses the analytic gbm reference".into(),
                ));
            }
            let method = Method::parse(&args.method)?;
            let cfg = StrongOrderConfig {
                m: args.m,
                seed: args.seed,
                ..Default::default()
            };
            let result = strong_order_probe(method, &cfg)?;
            write_text(&args.out, &result.to_csv())?;
            println!(
                "strong-order probe ({}): fitted slope {:.3}",
                args.method, result.slope
            );
        }
        ProbeKind::Scaling => {
            let (params, x0) = scaling_probe_defaults(args.system).ok_or_else(|| {
                Error::InvalidArg(format!(
                    "no scaling-probe reference coefficients for {}; use gbm or ou",
                    args.system
                ))
            })?;
            let cfg = ScalingProbeConfig {
                m: args.m,
                seed: args.seed,
                ..Default::default()
            };
            let result = coarse_error_scaling_probe(sde::get(args.system), &params, &x0, &cfg)?;
            write_text(&args.out, &result.to_csv())?;
            println!(
                "coarse-error scaling probe ({}): fitted slope {:.3}",
                args.system, result.slope
            );
        }
    }
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| Error::InvalidArg(format!("cannot read {}: {e}", args.input.display())))?;
    let (header, rows) = plot::parse_csv(&text)?;
    let size = plot::PlotSize {
        width: args.width,
        height: args.height,
    };
    let svg = match args.kind {
        PlotKind::Line => plot::line_chart(&header, &rows, size)?,
        PlotKind::Histogram => plot::histogram_chart(&header, &rows, size)?,
    };
    write_text(&args.out, &svg)?;
    println!("wrote {}", out_path(&args.out).display());
    Ok(())
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Rollout(args) => cmd_rollout(args),
        Command::Convergence(args) => cmd_convergence(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.dump_config {
        match serde_json::to_string_pretty(&cli.command) {
            Ok(json) => {
                println!("{json}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        }
    } else {
        match run(&cli.command) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        }
    }
}
