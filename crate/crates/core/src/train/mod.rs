//! Adam and the training loop.

mod adam;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};

use crate::data::{batch_iterator, make_windows, SequenceDataset, WindowPlan};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, total_loss, EvalEntry, EvalReport, LossWeights};
use crate::model::{forward, save_checkpoint, MixSTE, PoseSequence3D};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::transformer::Forward;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Window length `t`; also the stride between training windows.
    pub window: usize,
    pub interval: usize,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    /// Learning-rate factor applied after every epoch (exponential schedule).
    pub lr_decay: f64,
    /// Linear ramp from `lr / warmup_steps` to `lr` over the first steps.
    pub warmup_steps: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Evaluate every this many epochs (0 disables).
    pub eval_every: usize,
    /// Save `last.mxst` every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            max_steps: None,
            batch_size: 32,
            seed: 0,
            window: 16,
            interval: 16,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            schedule: LrSchedule::Exponential,
            lr_decay: 0.99,
            warmup_steps: 0,
            grad_clip: Some(1.0),
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// `lr * lr_decay^epoch`.
    #[default]
    Exponential,
    /// Half-cosine from `lr` to zero over the planned number of steps.
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(LrSchedule::Exponential),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?} (exponential or cosine)"))),
        }
    }
}

/// Learning rate for optimizer step `step` (zero-based) in `epoch`, out of
/// `total_steps` planned steps.
pub fn learning_rate(cfg: &TrainConfig, step: usize, epoch: usize, total_steps: usize) -> f64 {
    let base = match cfg.schedule {
        LrSchedule::Exponential => cfg.adam.lr * cfg.lr_decay.powi(epoch as i32),
        LrSchedule::Cosine => {
            let frac = step.min(total_steps) as f64 / total_steps.max(1) as f64;
            cfg.adam.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    };
    if step < cfg.warmup_steps {
        base * (step + 1) as f64 / cfg.warmup_steps as f64
    } else {
        base
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window == 0 || self.interval == 0 {
            return Err(Error::Config("batch size, window and interval must be positive".into()));
        }
        if !(self.adam.lr >= 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate must be >= 0 and decay > 0".into()));
        }
        self.loss.validate()
    }
}

/// Loss terms of one optimizer step. `loss_t` and `loss_m` are the weighted
/// contributions, so `loss_total = loss_w + loss_t + loss_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_w: f64,
    pub loss_t: f64,
    pub loss_m: f64,
    pub lr: f64,
}

/// Evaluation metrics after an epoch; position errors in millimeters,
/// `wmpjpe` in model units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub mpjve: f64,
    pub wmpjpe: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_wmpjpe: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Stacks 3D targets into `[B, T, N, 3]` model units.
pub fn target_tensor<T: Scalar>(poses: &[&PoseSequence3D], scale_mm: f64) -> Result<Tensor<T>> {
    let first = poses.first().ok_or_else(|| Error::ShapeMsg("empty target batch".into()))?;
    let (t, n) = (first.frames, first.joints);
    let mut data = Vec::with_capacity(poses.len() * t * n * 3);
    for p in poses {
        if p.frames != t || p.joints != n {
            return Err(Error::shape("target batch", &[p.frames, p.joints], &[t, n]));
        }
        data.extend(p.coords.iter().map(|&v| T::c(v / scale_mm)));
    }
    Tensor::new(vec![poses.len(), t, n, 3], data)
}

/// Predictions for every window of `plan`, trimmed to the valid frames.
pub fn predict_plan<T: Scalar>(
    model: &MixSTE<T>,
    dataset: &SequenceDataset,
    plan: &WindowPlan,
    batch_size: usize,
) -> Result<Vec<EvalEntry>> {
    let mut out = Vec::with_capacity(plan.windows.len());
    for batch in batch_iterator(plan, dataset, batch_size, None)? {
        let inputs: Vec<_> = batch.inputs.iter().collect();
        let preds = model.predict_batch(&inputs)?;
        for ((w, pred), gt) in batch.windows.iter().zip(preds).zip(batch.targets) {
            let gt = gt.ok_or_else(|| Error::Schema(format!("clip {} has no 3D poses to evaluate against", w.clip)))?;
            out.push(EvalEntry {
                action: dataset.clips[w.clip].action.clone(),
                pred: pred.window(0, w.valid),
                gt: gt.window(0, w.valid),
            });
        }
    }
    Ok(out)
}

/// Evaluates `model` over disjoint, edge-padded windows of `dataset`.
pub fn evaluate_model<T: Scalar>(
    model: &MixSTE<T>,
    dataset: &SequenceDataset,
    window: usize,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<EvalReport> {
    let plan = make_windows(dataset, window, window, true)?;
    let entries = predict_plan(model, dataset, &plan, batch_size)?;
    evaluate(&entries, &dataset.skeleton, weights, 10.0)
}

fn write_record<W: Write + ?Sized, R: Serialize>(log: &mut W, r: &R) -> Result<()> {
    serde_json::to_writer(&mut *log, r)?;
    log.write_all(b"\n")?;
    Ok(())
}

/// Trains `model` on `train`, evaluating on `eval` (or `train` when absent).
/// Writes one JSON line per step and per evaluation to `log`; keeps the best
/// checkpoint by evaluation WMPJPE in `checkpoint_dir`.
pub fn fit<T: Scalar>(
    model: &mut MixSTE<T>,
    train: &SequenceDataset,
    eval: Option<&SequenceDataset>,
    cfg: &TrainConfig,
    log: &mut dyn Write,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    train.validate()?;
    if train.skeleton.len() != model.config.joints {
        return Err(Error::Schema(format!(
            "dataset has {} joints, model expects {}",
            train.skeleton.len(),
            model.config.joints
        )));
    }
    let plan = make_windows(train, cfg.window, cfg.interval, true)?;
    if plan.windows.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    let joint_weights = cfg.loss.joint_weights(&train.skeleton);
    let scale = model.config.output_scale_mm;
    let mut state = OptimizerState::new(&model.store, cfg.adam);
    let mut report = TrainReport::default();
    let mut step = 0usize;
    let per_epoch = plan.windows.len().div_ceil(cfg.batch_size);
    let planned = cfg.epochs.saturating_mul(per_epoch);
    let total_steps = cfg.max_steps.map_or(planned, |m| m.min(planned));
    'epochs: for epoch in 0..cfg.epochs {
        let shuffle = cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64);
        for (batch_id, batch) in batch_iterator(&plan, train, cfg.batch_size, Some(shuffle))?.enumerate() {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let inputs: Vec<_> = batch.inputs.iter().collect();
            let targets = batch
                .targets
                .iter()
                .map(|t| t.as_ref().ok_or_else(|| Error::Schema("training clip without 3D poses".into())))
                .collect::<Result<Vec<_>>>()?;
            let x = model.input_tensor(&inputs)?;
            let y = target_tensor::<T>(&targets, scale)?;
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
            let mut fw = Forward {
                tape: &mut tape,
                params: &bound,
                rng: &mut rng,
                training: true,
                gelu: model.config.activation,
                capture: None,
            };
            let pred = forward(&mut fw, &model.params, xv)?;
            let losses = total_loss(&mut tape, pred, yv, &cfg.loss, &joint_weights)?;
            state.lr = learning_rate(cfg, step, epoch, total_steps);
            let value = |v| tape.value(v).item().f64();
            let record = StepRecord {
                step,
                loss_total: value(losses.total),
                loss_w: value(losses.wmpjpe),
                loss_t: cfg.loss.lambda_t * value(losses.tc),
                loss_m: cfg.loss.lambda_m * value(losses.mpjve),
                lr: state.lr,
            };
            if !record.loss_total.is_finite() {
                return Err(Error::NonFiniteLoss { batch: batch_id, step });
            }
            tape.backward(losses.total)?;
            model.store.zero_grads();
            model.store.absorb_grads(&tape, &bound)?;
            drop(tape);
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut model.store, max);
            }
            adam_step(&mut model.store, &mut state)?;
            model.store.zero_grads();
            write_record(log, &record)?;
            report.steps.push(record);
            step += 1;
        }
        let last_epoch = epoch + 1 == cfg.epochs || cfg.max_steps.is_some_and(|m| step >= m);
        if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
            let r = evaluate_model(model, eval.unwrap_or(train), cfg.window, &cfg.loss, cfg.batch_size)?;
            let rec = EvalRecord {
                epoch,
                mpjpe: r.summary.mpjpe,
                p_mpjpe: r.summary.p_mpjpe,
                mpjve: r.summary.mpjve,
                wmpjpe: r.summary.wmpjpe / scale,
            };
            write_record(log, &rec)?;
            if report.best_wmpjpe.map_or(true, |b| rec.wmpjpe < b) {
                report.best_wmpjpe = Some(rec.wmpjpe);
                if let Some(dir) = checkpoint_dir {
                    let path = dir.join("best.mxst");
                    save_checkpoint(model, &path)?;
                    report.best_checkpoint = Some(path);
                }
            }
            report.evals.push(rec);
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(model, &dir.join("last.mxst"))?;
            }
        }
        if last_epoch {
            break;
        }
    }
    Ok(report)
}
