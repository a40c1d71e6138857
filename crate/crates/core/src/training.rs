//! AdamW training on the generalized objective: per-window plan sampling,
//! linear per-step warmup, validation under the standard plan after every
//! epoch and best-validation model retention.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{window_starts, DataError, DatasetBundle, Split};
use crate::evaluation::{forecast_metrics, EvalError};
use crate::formulation::{sample_plan, Strategy};
use crate::model::{Checkpoint, ModelError, OptimizerSnapshot, TimePerceiver};
use crate::nn::{Grads, Mode, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite gradient for parameter {param}")]
    NanGradient { param: String },
    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    ConstantAfterWarmup,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; off when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Target placement used when sampling a plan for every training window.
    pub strategy: Strategy,
    pub lr_schedule: LrSchedule,
    /// Step between consecutive training windows.
    pub window_stride: usize,
    /// Step between consecutive validation windows.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 5e-4,
            weight_decay: 0.05,
            warmup_epochs: 5,
            epochs: 30,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            seed: 0,
            strategy: Strategy::Mixed,
            lr_schedule: LrSchedule::ConstantAfterWarmup,
            window_stride: 1,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            out.push(format!("lr_base must be positive, got {}", self.lr_base));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs > 0 && self.warmup_epochs > self.epochs {
            out.push(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            out.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                out.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.window_stride == 0 {
            out.push("window_stride must be positive".into());
        }
        if self.eval_stride == 0 {
            out.push("eval_stride must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(p.join("; ")))
        }
    }
}

/// AdamW moments aligned with a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .params()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.value.numel() && v.len() == p.value.numel())
    }
}

/// Flat mean of squared errors over every predicted entry.
pub fn loss_generalized(pred: &Tensor, target: &Tensor) -> std::result::Result<f64, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::Dimension {
            op: "loss_generalized",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.numel() as f64)
}

/// One AdamW update: decoupled decay `theta -= lr * wd * theta` on decaying
/// parameters, then the bias-corrected adaptive step.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Grads,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (p, g) in store.params().iter().zip(grads.iter()) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NanGradient { param: p.name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in store
        .params_mut()
        .iter_mut()
        .zip(grads.iter())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
        for (((theta, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= decay * *theta;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Learning rate for a 0-based step within a 0-based epoch: linear ramp from
/// 0 over the warmup steps, then constant or cosine decay to 0.
pub fn lr_at(epoch: usize, step_in_epoch: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let s = (epoch * steps_per_epoch + step_in_epoch) as f64;
    let warmup = (cfg.warmup_epochs * steps_per_epoch) as f64;
    if s < warmup {
        return cfg.lr_base * (s + 1.0) / warmup;
    }
    match cfg.lr_schedule {
        LrSchedule::ConstantAfterWarmup => cfg.lr_base,
        LrSchedule::Cosine => {
            let total = (cfg.epochs * steps_per_epoch) as f64;
            let span = (total - warmup).max(1.0);
            let progress = ((s - warmup + 1.0) / span).min(1.0);
            cfg.lr_base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of per-batch losses.
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// JSON-lines history, appended to when resuming.
    pub history_path: Option<PathBuf>,
    /// Receives `best.json` and `last.json` checkpoints after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Optimizer state to continue from; the model passed to
    /// [`train_with`] must be the matching `last` checkpoint.
    pub resume: Option<OptimizerSnapshot>,
    /// Best model so far when resuming.
    pub resume_best: Option<TimePerceiver>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MSE (the initial ones when no
    /// epoch ran).
    pub best: TimePerceiver,
    /// Parameters after the final epoch.
    pub last: TimePerceiver,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub optimizer: OptimizerState,
}

pub const BEST_CHECKPOINT: &str = "best.json";
pub const LAST_CHECKPOINT: &str = "last.json";

pub fn train(model: TimePerceiver, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, bundle, cfg, TrainOptions::default())
}

/// Loads `last.json` (with optimizer state) and, when present, `best.json`
/// from a checkpoint directory.
pub fn load_resume(dir: &Path) -> Result<(TimePerceiver, TrainOptions)> {
    let last = Checkpoint::load(dir.join(LAST_CHECKPOINT))?;
    let snapshot = last
        .optimizer
        .clone()
        .ok_or_else(|| TrainError::Config(format!("{} has no optimizer state", dir.join(LAST_CHECKPOINT).display())))?;
    let best_path = dir.join(BEST_CHECKPOINT);
    let best = if best_path.exists() {
        Some(TimePerceiver::load(&best_path)?)
    } else {
        None
    };
    Ok((
        last.to_model()?,
        TrainOptions {
            history_path: None,
            checkpoint_dir: Some(dir.to_path_buf()),
            resume: Some(snapshot),
            resume_best: best,
        },
    ))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn snapshot(state: &OptimizerState, epoch: usize, best_val: Option<f64>, best_epoch: Option<usize>) -> OptimizerSnapshot {
    OptimizerSnapshot {
        step: state.step,
        epoch,
        first_moment: state.m.clone(),
        second_moment: state.v.clone(),
        best_val_mse: best_val,
        best_epoch,
    }
}

pub fn train_with(
    mut model: TimePerceiver,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mc = model.config().clone();
    if bundle.series.channels() != mc.channels {
        return Err(TrainError::Config(format!(
            "data has {} channels, model expects {}",
            bundle.series.channels(),
            mc.channels
        )));
    }
    let grid = model.grid();
    // feasibility depends only on the grid, so any rng will do
    sample_plan(&grid, mc.lookback, cfg.strategy, &mut rng::stream(0, "probe"))
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let width = grid.total();
    let starts = window_starts(bundle.range(Split::Train), Split::Train, width, cfg.window_stride)?;
    // fail on a too-short validation split before any compute
    window_starts(bundle.range(Split::Val), Split::Val, width, cfg.eval_stride)?;
    let steps_per_epoch = starts.len().div_ceil(cfg.batch_size);

    let (mut state, first_epoch, mut best_val, mut best_epoch) = match &opts.resume {
        Some(s) => {
            let state = OptimizerState {
                step: s.step,
                m: s.first_moment.clone(),
                v: s.second_moment.clone(),
            };
            if !state.matches(model.params()) {
                return Err(TrainError::Config("optimizer state does not match model parameters".into()));
            }
            (state, s.epoch, s.best_val_mse, s.best_epoch)
        }
        None => (OptimizerState::new(model.params()), 0, None, None),
    };
    let mut best = opts.resume_best.clone().unwrap_or_else(|| model.clone());

    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut history_out = match &opts.history_path {
        Some(path) => {
            let file = if opts.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(path)
            } else {
                File::create(path)
            }
            .map_err(io_err(path))?;
            Some((BufWriter::new(file), path.clone()))
        }
        None => None,
    };

    let save_checkpoints = |model: &TimePerceiver,
                            best: &TimePerceiver,
                            state: &OptimizerState,
                            epoch: usize,
                            best_val: Option<f64>,
                            best_epoch: Option<usize>|
     -> Result<()> {
        if let Some(dir) = &opts.checkpoint_dir {
            Checkpoint::from_model(model, Some(snapshot(state, epoch, best_val, best_epoch)))
                .save(dir.join(LAST_CHECKPOINT))?;
            best.save(dir.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    };
    if first_epoch >= cfg.epochs {
        save_checkpoints(&model, &best, &state, first_epoch, best_val, best_epoch)?;
    }

    let mut history = Vec::new();
    for epoch in first_epoch..cfg.epochs {
        let mut order = starts.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("{}/{epoch}", rng::STREAM_SHUFFLE)));
        let mut plan_rng = rng::stream(cfg.seed, &format!("{}/{epoch}", rng::STREAM_PLAN));
        let mut drop_rng = rng::stream(cfg.seed, &format!("{}/{epoch}", rng::STREAM_DROPOUT));

        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = model.params().zero_grads();
            let mut batch_loss = 0.0;
            for &origin in batch {
                let window = bundle.series.slice(origin, origin + width);
                let plan = sample_plan(&grid, mc.lookback, cfg.strategy, &mut plan_rng).map_err(ModelError::from)?;
                let target = TimePerceiver::target_values(&window, &plan, &grid);
                let mut tape = Tape::new();
                let bound = model.params().bind(&mut tape);
                let mut mode = Mode::Train {
                    dropout: mc.dropout,
                    rng: &mut drop_rng,
                };
                let out = model.forward_on_tape(&mut tape, &bound, &window, &plan, &mut mode)?;
                let t = tape.constant(target);
                let loss = tape.mse(out.prediction, t).map_err(|e| ModelError::Stage {
                    stage: "loss",
                    source: e,
                })?;
                batch_loss += tape.value(loss).item();
                tape.backward(loss).map_err(|e| ModelError::Stage {
                    stage: "backward",
                    source: e,
                })?;
                bound.accumulate(&tape, &mut grads);
            }
            let n = batch.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: state.step,
                });
            }
            grads.scale(1.0 / n);
            if let Some(bound) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > bound {
                    grads.scale(bound / norm);
                }
            }
            lr = lr_at(epoch, b, steps_per_epoch, cfg);
            adamw_step(model.params_mut(), &grads, &mut state, lr, cfg)?;
            loss_sum += batch_loss;
        }

        let val = forecast_metrics(&model, bundle, Split::Val, cfg.eval_stride)?;
        if best_val.is_none_or(|b| val.mse < b) {
            best_val = Some(val.mse);
            best_epoch = Some(epoch);
            best = model.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_mse: val.mse,
            val_mae: val.mae,
            lr,
            step: state.step,
        };
        if let Some((out, path)) = &mut history_out {
            let line = serde_json::to_string(&record).expect("plain record");
            writeln!(out, "{line}").and_then(|_| out.flush()).map_err(io_err(path))?;
        }
        history.push(record);
        save_checkpoints(&model, &best, &state, epoch + 1, best_val, best_epoch)?;
    }

    Ok(TrainOutcome {
        best,
        last: model,
        history,
        best_epoch,
        best_val_mse: best_val,
        optimizer: state,
    })
}
