//! Teacher-forced training: window cropping, the NLL objective, ADAM, and the
//! plateau / early-stopping schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::datagen::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::ogm::{FlatClass, GridSpec};
use crate::seq2seq::{sequence_nll, ModelConfig, ModelParams, Normalizer, Observation};

/// Frames between consecutive labels (0.2 s labels from 0.1 s frames).
pub const LABEL_STRIDE: usize = 2;

/// Examples per forward/backward chunk. Chunk sums are reduced in chunk
/// order, so results do not depend on the thread count.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<usize>,
    /// Stop as soon as validation NLL drops below this value.
    pub target_nll: Option<f64>,
    /// Wall-clock budget in seconds. Training stops before an epoch that
    /// would likely overrun it, judged by the slowest epoch so far.
    pub max_secs: Option<f64>,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.0008,
            batch_size: 256,
            plateau_patience: 3,
            plateau_min_delta: 1e-3,
            early_stop_patience: 5,
            max_epochs: 200,
            max_steps: None,
            target_nll: None,
            max_secs: None,
            grad_clip_norm: 5.0,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.max_secs.is_some_and(|t| !(t > 0.0)) {
            return bad("max_secs must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.plateau_min_delta >= 0.0) {
            return bad("plateau_min_delta must be non-negative");
        }
        Ok(())
    }
}

/// `M` input frames at 0.1 s and `Δ` labels at 0.2 s spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub inputs: Vec<Observation>,
    pub labels: Vec<FlatClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropResult {
    pub examples: Vec<TrainingExample>,
    /// Records shorter than `M + 2Δ` frames.
    pub skipped: usize,
}

/// Every stride-1 window of `obs_len` input frames followed by `horizon`
/// labels taken at every second later frame. Out-of-map targets are kept.
pub fn crop_windows(
    records: &[TrajectoryRecord],
    grid: &GridSpec,
    obs_len: usize,
    horizon: usize,
) -> Result<CropResult> {
    if obs_len == 0 || horizon == 0 {
        return Err(Error::InvalidInput(
            "window length and horizon must be at least 1".into(),
        ));
    }
    let span = obs_len + LABEL_STRIDE * horizon;
    let mut examples = Vec::new();
    let mut skipped = 0;
    for rec in records {
        let frames = &rec.frames;
        if frames.len() < span {
            skipped += 1;
            continue;
        }
        let classes = frames
            .iter()
            .map(|f| grid.quantize_class(f.x, f.y))
            .collect::<Result<Vec<_>>>()?;
        for s in 0..=frames.len() - span {
            let last = s + obs_len - 1;
            examples.push(TrainingExample {
                inputs: frames[s..=last].to_vec(),
                labels: (1..=horizon)
                    .map(|d| classes[last + LABEL_STRIDE * d])
                    .collect(),
            });
        }
    }
    Ok(CropResult { examples, skipped })
}

fn chunked_nll(
    params: &ModelParams,
    examples: &[TrainingExample],
    want_grad: bool,
) -> Result<(f64, Option<ModelParams>)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let parts: Vec<(f64, Option<ModelParams>)> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let ins: Vec<&[Observation]> = chunk.iter().map(|e| e.inputs.as_slice()).collect();
            let labs: Vec<&[FlatClass]> = chunk.iter().map(|e| e.labels.as_slice()).collect();
            sequence_nll(params, &ins, &labs, want_grad)
        })
        .collect::<Result<_>>()?;
    let norm = 1.0 / (examples.len() * params.config.horizon) as f64;
    let mut loss = 0.0;
    let mut grads: Option<ModelParams> = None;
    for (l, g) in parts {
        loss += l;
        match (&mut grads, g) {
            (None, Some(g)) => grads = Some(g),
            (Some(acc), Some(g)) => acc.add_scaled(&g, 1.0),
            _ => {}
        }
    }
    if let Some(g) = &mut grads {
        g.scale(norm);
    }
    Ok((loss * norm, grads))
}

/// Mean per-step negative log-likelihood over `examples x Δ`, with the
/// gradient of that mean.
pub fn nll_loss(params: &ModelParams, examples: &[TrainingExample]) -> Result<(f64, ModelParams)> {
    let (l, g) = chunked_nll(params, examples, true)?;
    Ok((l, g.expect("gradient requested")))
}

/// Mean per-step negative log-likelihood without gradients.
pub fn mean_nll(params: &ModelParams, examples: &[TrainingExample]) -> Result<f64> {
    Ok(chunked_nll(params, examples, false)?.0)
}

/// Bias-corrected ADAM moments over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// One update of `params` (given as consecutive slices) from `grads`.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut [f64]>,
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<()> {
        let mut k = 0;
        for (ti, g) in grads.iter().enumerate() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} at tensor {ti} entry {i}",
                    g[i]
                )));
            }
            k += g.len();
        }
        if k != self.m.len() {
            return Err(Error::Shape(format!(
                "{k} gradients for {} moments",
                self.m.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut k = 0;
        for (p, g) in params.into_iter().zip(grads) {
            for (x, &gi) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                k += 1;
            }
        }
        Ok(())
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
) -> Result<()> {
    let g = grads.tensors();
    state.update(params.tensors_mut(), &g, lr)
}

/// Replays the plateau rule over the whole validation history and halves
/// `lr` only if a halving falls on the newest evaluation. The counter
/// restarts after every halving.
pub fn lr_on_plateau(history: &[f64], lr: f64, cfg: &TrainConfig) -> f64 {
    let Some((&first, rest)) = history.split_first() else {
        return lr;
    };
    let mut best = first;
    let mut stale = 0;
    let mut halve_now = false;
    for &v in rest {
        halve_now = false;
        if v < best - cfg.plateau_min_delta * best.abs() {
            best = v;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                halve_now = true;
                stale = 0;
            }
        }
    }
    if halve_now {
        lr / 2.0
    } else {
        lr
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Epoch 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    EarlyStop,
    TargetReached,
    TimeBudget,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation evaluation.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Called after every evaluation with the record and whether it is a new
/// best, together with the current best parameters.
pub trait TrainObserver {
    fn on_epoch(&mut self, record: &EpochRecord, improved: bool, best: &ModelParams) -> Result<()>;
}

impl<F: FnMut(&EpochRecord, bool, &ModelParams) -> Result<()>> TrainObserver for F {
    fn on_epoch(&mut self, record: &EpochRecord, improved: bool, best: &ModelParams) -> Result<()> {
        self(record, improved, best)
    }
}

/// No-op observer.
pub fn silent(_: &EpochRecord, _: bool, _: &ModelParams) -> Result<()> {
    Ok(())
}

/// Initial parameters for `train`: seeded init plus a normalizer fitted on
/// the training inputs.
pub fn initial_params(
    model: &ModelConfig,
    train_set: &[TrainingExample],
    seed: u64,
) -> Result<ModelParams> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(model, &mut rng);
    params.normalizer = Normalizer::fit(train_set.iter().flat_map(|e| e.inputs.iter()));
    Ok(params)
}

pub fn train(
    model: &ModelConfig,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    cfg: &TrainConfig,
    observer: &mut impl TrainObserver,
) -> Result<TrainOutcome> {
    let params = initial_params(model, train_set, cfg.seed)?;
    train_from(params, train_set, val_set, cfg, observer)
}

/// Trains starting from `params` (architecture and normalizer are kept).
pub fn train_from(
    mut params: ModelParams,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    cfg: &TrainConfig,
    observer: &mut impl TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput(format!(
            "training needs non-empty splits (train {}, validation {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut adam = AdamState::new(params.num_params(), cfg);
    let mut lr = cfg.lr0;
    let mut steps = 0;

    let diverged = |epoch, step, what: &str, v: f64, best_epoch| Error::Diverged {
        epoch,
        step,
        message: format!("{what} is {v}; last good parameters are from epoch {best_epoch}"),
    };

    let started = Instant::now();
    let mut slowest_epoch = 0.0f64;
    let val0 = mean_nll(&params, val_set)?;
    let train0 = mean_nll(&params, train_set)?;
    if !val0.is_finite() || !train0.is_finite() {
        return Err(diverged(0, 0, "initial loss", val0 + train0, 0));
    }
    let first = EpochRecord {
        epoch: 0,
        train_nll: train0,
        val_nll: val0,
        lr,
        steps: 0,
    };
    let mut trace = vec![first];
    let mut history = vec![val0];
    let mut best = params.clone();
    let mut best_val = val0;
    let mut best_epoch = 0;
    let mut stale = 0;
    observer.on_epoch(&first, true, &best)?;
    if cfg.target_nll.is_some_and(|t| val0 < t) {
        return Ok(TrainOutcome {
            params: best,
            best_epoch,
            trace,
            stop: StopReason::TargetReached,
        });
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stop = StopReason::MaxEpochs;
    'epochs: for epoch in 1..=cfg.max_epochs {
        let epoch_start = started.elapsed().as_secs_f64();
        if cfg
            .max_secs
            .is_some_and(|t| epoch_start + slowest_epoch > t)
        {
            stop = StopReason::TimeBudget;
            break;
        }
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                stop = StopReason::MaxSteps;
                break;
            }
            let batch: Vec<TrainingExample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, mut grads) = nll_loss(&params, &batch)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, steps, "training loss", loss, best_epoch));
            }
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            adam_step(&mut adam, &mut params, &grads, lr).map_err(|e| Error::Diverged {
                epoch,
                step: steps,
                message: format!("{e}; last good parameters are from epoch {best_epoch}"),
            })?;
            steps += 1;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            break;
        }
        let val = mean_nll(&params, val_set)?;
        if !val.is_finite() {
            return Err(diverged(epoch, steps, "validation loss", val, best_epoch));
        }
        slowest_epoch = slowest_epoch.max(started.elapsed().as_secs_f64() - epoch_start);
        let rec = EpochRecord {
            epoch,
            train_nll: loss_sum / seen as f64,
            val_nll: val,
            lr,
            steps,
        };
        trace.push(rec);
        history.push(val);
        let improved = val < best_val;
        if improved {
            best_val = val;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        observer.on_epoch(&rec, improved, &best)?;
        if cfg.target_nll.is_some_and(|t| val < t) {
            stop = StopReason::TargetReached;
            break 'epochs;
        }
        if stale >= cfg.early_stop_patience {
            stop = StopReason::EarlyStop;
            break;
        }
        if stop == StopReason::MaxSteps || cfg.max_steps.is_some_and(|m| steps >= m) {
            stop = StopReason::MaxSteps;
            break;
        }
        lr = lr_on_plateau(&history, lr, cfg);
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        trace,
        stop,
    })
}

/// Comma-separated `epoch,train_nll,val_nll,lr` rows with a header.
pub fn metrics_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_nll,val_nll,lr\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:?},{:?},{:?}\n",
            r.epoch, r.train_nll, r.val_nll, r.lr
        ));
    }
    out
}
