use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use trajseq::baseline::CvModel;
use trajseq::config::RunConfig;
use trajseq::datagen::{self, manifest_path, Split, TrajectoryRecord};
use trajseq::eval::{evaluate, render_report, Predictor, Selection};
use trajseq::ogm::{GridCell, GridDims};
use trajseq::seq2seq::{
    beam_search_decode, encode, greedy_decode, load_checkpoint, save_checkpoint, Hypothesis,
    ModelParams,
};
use trajseq::train::{self, crop_windows, metrics_csv, EpochRecord, TrainConfig, TrainingExample};
use trajseq::verify::{run_battery, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "trajseq",
    version,
    about = "Grid-based trajectory prediction with an LSTM encoder-decoder"
)]
struct Cli {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Datagen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, writing the best checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Decode the K best grid sequences for every vehicle in a frames file.
    Predict(PredictArgs),
    /// Top-Omega MAE report on the test split.
    Eval(EvalArgs),
    /// Run the self-check battery.
    Verify {
        #[arg(long, hide = true)]
        perturb_gradient: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Memorize the first N training windows (fixed LR, no early stop,
    /// at most 2000 steps).
    #[arg(long, value_name = "N")]
    overfit: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON lines of trajectory records; the last M frames of each are used.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Decoder steps.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, conflicts_with = "beam_width")]
    greedy: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    PerStep,
    WholeTrajectory,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "kalman")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the constant-velocity Kalman baseline instead of a model.
    #[arg(long)]
    kalman: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    omega: Option<Vec<usize>>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Report horizons in seconds.
    #[arg(long, value_delimiter = ',')]
    horizon: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
    #[arg(long)]
    series: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
        cfg = cfg.resolved();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn windows(
    cfg: &RunConfig,
    records: &[TrajectoryRecord],
    obs_len: usize,
    horizon: usize,
) -> Result<Vec<TrainingExample>> {
    Ok(crop_windows(records, &cfg.grid, obs_len, horizon)?.examples)
}

fn cmd_datagen(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.paths.data.clone());
    ensure_parent(&out)?;
    let data = datagen::generate_dataset(&cfg.scenario)?;
    datagen::save(&data, &out)?;
    let manifest = manifest_path(&out);
    let bytes = fs::read(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
    println!("wrote {} records to {}", data.records.len(), out.display());
    let mut fit_windows = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        let recs = data.split(split);
        let crop = crop_windows(&recs, &cfg.grid, cfg.model.obs_len, cfg.model.horizon)?;
        if split != Split::Test {
            fit_windows += crop.examples.len();
        }
        println!(
            "{:<5} scenarios {:>4}  sequences {:>4}  windows {:>6}  skipped {}",
            format!("{split:?}").to_lowercase(),
            data.manifest.splits.ids(split).len(),
            recs.len(),
            crop.examples.len(),
            crop.skipped
        );
    }
    println!("usable training windows (train + val): {fit_windows}");
    println!(
        "manifest {} sha256 {}",
        manifest.display(),
        sha256_hex(&bytes)
    );
    Ok(())
}

fn overfit_config(base: &TrainConfig, n: usize) -> TrainConfig {
    TrainConfig {
        lr0: 0.01,
        batch_size: n,
        plateau_patience: usize::MAX,
        early_stop_patience: usize::MAX,
        max_epochs: 2000,
        max_steps: Some(2000),
        target_nll: Some(0.01),
        ..base.clone()
    }
}

fn cmd_train(cfg: &RunConfig, args: TrainArgs) -> Result<()> {
    let data_path = args.data.unwrap_or_else(|| cfg.paths.data.clone());
    let ckpt = args.out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let metrics = args.metrics.unwrap_or_else(|| cfg.paths.metrics.clone());
    let data = datagen::load(&data_path)
        .with_context(|| format!("loading dataset {}", data_path.display()))?;
    let (m, h) = (cfg.model.obs_len, cfg.model.horizon);
    let mut train_set = windows(cfg, &data.split(Split::Train), m, h)?;
    let (val_set, tcfg) = match args.overfit {
        Some(0) => bail!("--overfit needs at least one window"),
        Some(n) => {
            if train_set.len() < n {
                bail!(
                    "--overfit {n}: only {} training windows available",
                    train_set.len()
                );
            }
            train_set.truncate(n);
            (train_set.clone(), overfit_config(&cfg.train, n))
        }
        None => (
            windows(cfg, &data.split(Split::Val), m, h)?,
            cfg.train.clone(),
        ),
    };
    println!(
        "training on {} windows, validating on {}",
        train_set.len(),
        val_set.len()
    );
    ensure_parent(&ckpt)?;
    let mut trace: Vec<EpochRecord> = Vec::new();
    let mut observer =
        |r: &EpochRecord, improved: bool, best: &ModelParams| -> trajseq::Result<()> {
            println!(
                "epoch {:>4}  steps {:>6}  train {:.4}  val {:.4}  lr {:.2e}{}",
                r.epoch,
                r.steps,
                r.train_nll,
                r.val_nll,
                r.lr,
                if improved { "  *" } else { "" }
            );
            trace.push(r.clone());
            if improved {
                save_checkpoint(best, &ckpt)?;
            }
            write_atomic(&metrics, &metrics_csv(&trace))
                .map_err(|e| trajseq::Error::InvalidInput(format!("{e:#}")))
        };
    let outcome = train::train(&cfg.model, &train_set, &val_set, &tcfg, &mut observer)?;
    save_checkpoint(&outcome.params, &ckpt)?;
    let best = &outcome.trace[outcome.best_epoch];
    println!(
        "stopped ({:?}); best epoch {} val {:.4}; checkpoint {}",
        outcome.stop,
        outcome.best_epoch,
        best.val_nll,
        ckpt.display()
    );
    if args.overfit.is_some() {
        match outcome.trace.iter().find(|r| r.val_nll < 0.1) {
            Some(r) => println!("nll below 0.1 after {} steps", r.steps),
            None => println!("nll never dropped below 0.1"),
        }
        let mut hit = 0;
        let mut total = 0;
        for ex in &train_set {
            let g = greedy_decode(&outcome.params, &encode(&outcome.params, &ex.inputs)?, h)?;
            hit += g
                .classes
                .iter()
                .zip(&ex.labels)
                .filter(|(a, b)| a == b)
                .count();
            total += ex.labels.len();
        }
        println!(
            "greedy reproduces {hit}/{total} labels ({:.1}%)",
            100.0 * hit as f64 / total as f64
        );
    }
    Ok(())
}

fn cell_json(dims: GridDims, h: &Hypothesis) -> Result<Vec<serde_json::Value>> {
    h.classes
        .iter()
        .map(|&q| {
            Ok(match dims.unflatten(q)? {
                GridCell::InMap { w, l } => json!([w, l]),
                GridCell::OutOfMap => serde_json::Value::Null,
            })
        })
        .collect()
}

fn cmd_predict(cfg: &RunConfig, args: PredictArgs) -> Result<()> {
    let ckpt = args
        .checkpoint
        .unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let params = load_checkpoint(&ckpt)?;
    let m = params.config.obs_len;
    let horizon = args.horizon.unwrap_or(params.config.horizon);
    let k = args.beam_width.unwrap_or(params.config.beam_width);
    if horizon == 0 || k == 0 {
        bail!("beam width and horizon must be at least 1");
    }
    let records = datagen::read_dataset(&args.input)?;
    let out = args.out.unwrap_or_else(|| cfg.paths.predictions.clone());
    ensure_parent(&out)?;
    let dims = params.config.grid();
    let mut w = BufWriter::new(
        fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?,
    );
    for r in &records {
        let who = format!("scenario {} vehicle {}", r.scenario_id, r.vehicle_id);
        if r.frames.len() < m {
            bail!("{who}: needs at least {m} frames, has {}", r.frames.len());
        }
        let summary =
            encode(&params, &r.frames[r.frames.len() - m..]).with_context(|| who.clone())?;
        let hyps = if args.greedy {
            vec![greedy_decode(&params, &summary, horizon)?]
        } else {
            beam_search_decode(&params, &summary, k, horizon)?.hypotheses
        };
        let hyps: Vec<serde_json::Value> = hyps
            .iter()
            .map(|h| {
                Ok(json!({
                    "log_prob": h.log_prob,
                    "classes": h.classes.iter().map(|q| q.0).collect::<Vec<_>>(),
                    "cells": cell_json(dims, h)?,
                }))
            })
            .collect::<Result<_>>()?;
        let line =
            json!({"scenario_id": r.scenario_id, "vehicle_id": r.vehicle_id, "hypotheses": hyps});
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    println!(
        "wrote predictions for {} vehicles to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, args: EvalArgs) -> Result<()> {
    let mut ecfg = cfg.eval.clone();
    if let Some(o) = args.omega {
        ecfg.omegas = o;
    }
    if let Some(h) = args.horizon {
        ecfg.horizons = h;
    }
    if let Some(s) = args.selection {
        ecfg.selection = match s {
            SelectionArg::PerStep => Selection::PerStep,
            SelectionArg::WholeTrajectory => Selection::WholeTrajectory,
        };
    }
    let params = if args.kalman {
        None
    } else {
        let ckpt = args
            .checkpoint
            .unwrap_or_else(|| cfg.paths.checkpoint.clone());
        Some(load_checkpoint(&ckpt)?)
    };
    let (obs_len, horizon, k) = match &params {
        Some(p) => (
            p.config.obs_len,
            p.config.horizon,
            args.beam_width.unwrap_or(p.config.beam_width),
        ),
        None => (
            cfg.model.obs_len,
            cfg.model.horizon,
            args.beam_width.unwrap_or(cfg.model.beam_width),
        ),
    };
    if params.is_some() {
        ecfg.validate(k, horizon)?;
    } else {
        ecfg.validate(usize::MAX, horizon)?;
    }
    let data_path = args.data.unwrap_or_else(|| cfg.paths.data.clone());
    let data = datagen::load(&data_path)
        .with_context(|| format!("loading dataset {}", data_path.display()))?;
    let test = windows(cfg, &data.split(Split::Test), obs_len, horizon)?;
    let predictor = match &params {
        Some(p) => Predictor::Model {
            params: p,
            beam_width: k,
        },
        None => Predictor::Kalman {
            model: CvModel::new(&cfg.kalman),
            grid: cfg.grid,
        },
    };
    let dims = params.as_ref().map_or(cfg.grid.dims(), |p| p.config.grid());
    let report = evaluate(&predictor, dims, &test, &ecfg)?;
    let (table, csv) = render_report(&report);
    print!("{table}");
    let series = args.series.unwrap_or_else(|| cfg.paths.series.clone());
    write_atomic(&series, &csv)?;
    println!("series written to {}", series.display());
    Ok(())
}

fn cmd_verify(perturb: bool) -> Result<bool> {
    let results = run_battery(&VerifyOptions {
        perturb_analytic_gradient: perturb,
    });
    for r in &results {
        println!(
            "{:<16} {}  max error {:.3e}  {:.2}s  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_error,
            r.seconds,
            r.detail
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(true)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(false)
    }
}

fn run(cli: Cli) -> Result<bool> {
    if let Command::Verify { perturb_gradient } = cli.command {
        return cmd_verify(perturb_gradient);
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Datagen { out } => cmd_datagen(&cfg, out)?,
        Command::Train(a) => cmd_train(&cfg, a)?,
        Command::Predict(a) => cmd_predict(&cfg, a)?,
        Command::Eval(a) => cmd_eval(&cfg, a)?,
        Command::Verify { .. } => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
