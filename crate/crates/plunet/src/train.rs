//! Adam, the epoch loop, checkpointing, and evaluation.
//!
//! Training is deterministic in single-threaded mode: parameter init
//! draws from the config seed, and each epoch shuffles with its own
//! ChaCha stream derived from (seed, epoch), so a run resumed from the
//! last checkpoint continues exactly where the uninterrupted run would
//! have been. Checkpoints hold every model parameter plus the optimizer
//! moments under `adam.m.<name>` / `adam.v.<name>`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, Model};
use crate::blocks::{Mode, Session};
use crate::codec::{self, Checkpoint, CheckpointMeta};
use crate::data::{self, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, AggregateMode, EvalReport};
use crate::params::ParamSet;
use crate::tensor::{dims, Scalar, Tensor};

/// Where training samples come from: generated on the fly or a
/// directory of `<id>.ppm` / `<id>_mask.pgm` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        count: usize,
        height: usize,
        width: usize,
        #[serde(default)]
        seed: u64,
    },
    Dir {
        path: PathBuf,
    },
}

pub fn load_data<T: Scalar>(source: &DataSource) -> Result<Vec<Sample<T>>> {
    match source {
        DataSource::Synth {
            count,
            height,
            width,
            seed,
        } => data::synth_generate(*count, *height, *width, *seed),
        DataSource::Dir { path } => data::load_dir(path),
    }
}

fn default_epochs() -> u32 {
    100
}
fn default_batch_size() -> usize {
    16
}
fn default_lr() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps_adam() -> f64 {
    1e-8
}
fn default_threshold() -> f64 {
    0.5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps_adam")]
    pub eps_adam: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub data: DataSource,
    pub split: SplitSpec,
    pub checkpoint_dir: PathBuf,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.split.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.eps_adam > 0.0 && self.eps_adam.is_finite()) {
            return Err(Error::Config(format!(
                "eps_adam must be positive, got {}",
                self.eps_adam
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie strictly inside (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let config: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

struct AdamSlot<T> {
    param_index: usize,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// First and second moment estimates for every learnable parameter,
/// plus the step counter.
pub struct AdamState<T> {
    t: u64,
    slots: Vec<AdamSlot<T>>,
    by_index: HashMap<usize, usize>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> AdamState<T> {
        let mut slots = Vec::new();
        let mut by_index = HashMap::new();
        for idx in params.learnable_indices() {
            by_index.insert(idx, slots.len());
            let d = params.at(idx).tensor.dims();
            slots.push(AdamSlot {
                param_index: idx,
                m: Tensor::zeros(d),
                v: Tensor::zeros(d),
            });
        }
        AdamState {
            t: 0,
            slots,
            by_index,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moment tensor for a parameter index, for inspection in tests.
    pub fn moments(&self, param_index: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        let slot = *self.by_index.get(&param_index)?;
        Some((&self.slots[slot].m, &self.slots[slot].v))
    }
}

/// base^e by binary exponentiation: plain f64 multiplies, so the result
/// is identical on every platform and exact at e = 1.
fn pow_u(base: f64, mut e: u64) -> f64 {
    let mut result = 1.0;
    let mut b = base;
    while e > 0 {
        if e & 1 == 1 {
            result *= b;
        }
        b *= b;
        e >>= 1;
    }
    result
}

/// One Adam update. `grads` pairs parameter indices with gradient
/// tensors and must cover every learnable parameter exactly once; the
/// arithmetic runs in f64 regardless of the parameter dtype.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[(usize, Tensor<T>)],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    let mut by_slot: Vec<Option<&Tensor<T>>> = vec![None; state.slots.len()];
    for (idx, g) in grads {
        let slot = *state.by_index.get(idx).ok_or_else(|| {
            Error::Spec(format!(
                "gradient supplied for non-learnable parameter index {idx}"
            ))
        })?;
        if by_slot[slot].is_some() {
            return Err(Error::Spec(format!(
                "duplicate gradient for {:?}",
                params.at(*idx).name
            )));
        }
        if g.dims() != params.at(*idx).tensor.dims() {
            return Err(Error::Shape(format!(
                "gradient for {:?} is {:?}, parameter is {:?}",
                params.at(*idx).name,
                g.dims(),
                params.at(*idx).tensor.dims()
            )));
        }
        by_slot[slot] = Some(g);
    }
    for (i, g) in by_slot.iter().enumerate() {
        if g.is_none() {
            return Err(Error::Spec(format!(
                "missing gradient for {:?}",
                params.at(state.slots[i].param_index).name
            )));
        }
    }

    state.t += 1;
    let bc1 = 1.0 - pow_u(hyper.beta1, state.t);
    let bc2 = 1.0 - pow_u(hyper.beta2, state.t);
    for (i, slot) in state.slots.iter_mut().enumerate() {
        let g = by_slot[i].expect("presence checked above");
        let gd = g.data();
        let mut theta = params.at(slot.param_index).tensor.clone();
        {
            let md = slot.m.data_mut();
            let vd = slot.v.data_mut();
            let td = theta.data_mut();
            for e in 0..gd.len() {
                let gv = gd[e].to_f64();
                let m = hyper.beta1 * md[e].to_f64() + (1.0 - hyper.beta1) * gv;
                let v = hyper.beta2 * vd[e].to_f64() + (1.0 - hyper.beta2) * gv * gv;
                md[e] = T::from_f64(m);
                vd[e] = T::from_f64(v);
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                td[e] = T::from_f64(td[e].to_f64() - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps));
            }
        }
        params.set_at(slot.param_index, theta)?;
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_pc: f64,
    pub val_se: f64,
    pub val_f1: f64,
    pub val_js: f64,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: u32,
    pub best_val_f1: Option<f64>,
    pub last_path: PathBuf,
    pub best_path: PathBuf,
    pub log_path: PathBuf,
}

fn stack_batch<T: Scalar>(batch: &[&Sample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let id = batch[0].image.dims();
    let md = batch[0].mask.dims();
    for s in batch {
        if s.image.dims() != id || s.mask.dims() != md {
            return Err(Error::Data(format!(
                "sample {:?} is {:?}, batch started at {:?}; all samples in a batch must match",
                s.id,
                s.image.dims(),
                id
            )));
        }
    }
    let b = batch.len();
    let mut images = Tensor::zeros(dims(b, id.c, id.h, id.w));
    let mut masks = Tensor::zeros(dims(b, md.c, md.h, md.w));
    let ilen = id.count();
    let mlen = md.count();
    {
        let out = images.data_mut();
        for (i, s) in batch.iter().enumerate() {
            out[i * ilen..(i + 1) * ilen].copy_from_slice(s.image.data());
        }
    }
    {
        let out = masks.data_mut();
        for (i, s) in batch.iter().enumerate() {
            out[i * mlen..(i + 1) * mlen].copy_from_slice(s.mask.data());
        }
    }
    Ok((images, masks))
}

/// Forward, loss, backward, Adam. Returns the batch BCE; a non-finite
/// loss aborts before the parameters are touched.
fn train_step<T: Scalar>(
    model: &Model,
    params: &mut ParamSet<T>,
    adam: &mut AdamState<T>,
    hyper: &AdamHyper,
    images: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<f64> {
    let (loss, grads_by_param) = {
        let mut sess = Session::new(params, Mode::Train, true);
        let logits = model.forward(&mut sess, images)?;
        let (loss, seed) = metrics::bce_loss(logits.tensor(), targets)?;
        if !loss.is_finite() {
            return Err(Error::Train(format!("loss is not finite ({loss})")));
        }
        let grads = sess.tape.backward(&logits, &seed)?;
        let by_param: Vec<(usize, Tensor<T>)> = sess
            .bound()
            .iter()
            .map(|&(idx, vid)| {
                let d = sess.params().at(idx).tensor.dims();
                (idx, grads.get_or_zeros(vid, d))
            })
            .collect();
        (loss, by_param)
    };
    adam_step(params, &grads_by_param, adam, hyper)?;
    Ok(loss)
}

/// Eval-mode forward over each sample individually, binarize at
/// `threshold`, aggregate confusion counts.
pub fn evaluate_params<T: Scalar>(
    model: &Model,
    params: &mut ParamSet<T>,
    samples: &[Sample<T>],
    threshold: f64,
    mode: AggregateMode,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let thr = T::from_f64(threshold);
    let mut counts = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = model.forward_probs(params, &s.image)?;
        let pred = metrics::binarize(&probs, thr)?;
        counts.push(metrics::confusion(&pred, &s.mask)?);
    }
    metrics::aggregate(&counts, mode)
}

/// Rebuilds the model a checkpoint was trained with and scores it on
/// `samples` with per-image aggregation.
pub fn evaluate<T: Scalar>(
    ckpt: &Checkpoint<T>,
    samples: &[Sample<T>],
    threshold: f64,
) -> Result<EvalReport> {
    let model = Model::new(ckpt.meta.config.clone())?;
    let mut params = model.init_params::<T>(0)?;
    restore_checkpoint(&mut params, None, ckpt)?;
    evaluate_params(&model, &mut params, samples, threshold, AggregateMode::PerImage)
}

/// Snapshot of parameters and optimizer moments, in a fixed order so
/// identical states serialize to identical bytes.
pub fn build_checkpoint<T: Scalar>(
    params: &ParamSet<T>,
    adam: &AdamState<T>,
    meta: CheckpointMeta,
) -> Checkpoint<T> {
    let mut entries = Vec::with_capacity(params.len() + 2 * adam.slots.len());
    for e in params.iter() {
        entries.push((e.name.clone(), e.tensor.clone()));
    }
    for slot in &adam.slots {
        let name = &params.at(slot.param_index).name;
        entries.push((format!("adam.m.{name}"), slot.m.clone()));
        entries.push((format!("adam.v.{name}"), slot.v.clone()));
    }
    Checkpoint { entries, meta }
}

/// Loads a checkpoint back into a parameter set and, when given,
/// optimizer state. Every model parameter must appear exactly once;
/// optimizer entries are required only when `adam` is present.
pub fn restore_checkpoint<T: Scalar>(
    params: &mut ParamSet<T>,
    adam: Option<&mut AdamState<T>>,
    ckpt: &Checkpoint<T>,
) -> Result<()> {
    let by_name: HashMap<&str, &Tensor<T>> = ckpt
        .entries
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let mut used = 0usize;
    for idx in 0..params.len() {
        let name = params.at(idx).name.clone();
        let tensor = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name:?}")))?;
        params.set_at(idx, (*tensor).clone())?;
        used += 1;
    }
    match adam {
        Some(state) => {
            state.t = ckpt.meta.step;
            for slot in &mut state.slots {
                let pname = &params.at(slot.param_index).name;
                for (label, dst) in [("m", &mut slot.m), ("v", &mut slot.v)] {
                    let key = format!("adam.{label}.{pname}");
                    let tensor = by_name.get(key.as_str()).ok_or_else(|| {
                        Error::Config(format!("checkpoint is missing optimizer entry {key:?}"))
                    })?;
                    if tensor.dims() != dst.dims() {
                        return Err(Error::Shape(format!(
                            "{key:?} is {:?}, expected {:?}",
                            tensor.dims(),
                            dst.dims()
                        )));
                    }
                    *dst = (*tensor).clone();
                    used += 1;
                }
            }
        }
        None => {
            used += ckpt
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with("adam."))
                .count();
        }
    }
    if used != ckpt.entries.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} entries this model does not use",
            ckpt.entries.len() - used
        )));
    }
    Ok(())
}

/// Resolves the data source and trains. `resume_from` continues from a
/// saved checkpoint, reproducing the uninterrupted run bit for bit.
pub fn train<T: Scalar>(config: &TrainConfig, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let samples = load_data::<T>(&config.data)?;
    run_training(config, samples, resume_from)
}

/// The epoch loop on an already-loaded dataset. Splits, then per epoch:
/// seeded shuffle of the train split, minibatch steps (final short
/// batch included), a validation pass, one log line, and checkpoint
/// writes (`last.pluw` always, `best.pluw` on a new best validation F1).
pub fn run_training<T: Scalar>(
    config: &TrainConfig,
    samples: Vec<Sample<T>>,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(config.arch.clone())?;
    let (train_set, val_set, _test) = data::split(samples, &config.split)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "split left {} train and {} val samples; both must be non-empty",
            train_set.len(),
            val_set.len()
        )));
    }

    let mut params = model.init_params::<T>(config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut best_val_f1: Option<f64> = None;
    let mut best_epoch: u32 = 0;
    let mut start_epoch: u32 = 0;
    if let Some(path) = resume_from {
        let ckpt = codec::load_checkpoint::<T>(path)?;
        if ckpt.meta.config != config.arch {
            return Err(Error::Config(
                "checkpoint architecture does not match the training config".into(),
            ));
        }
        restore_checkpoint(&mut params, Some(&mut adam), &ckpt)?;
        start_epoch = ckpt.meta.epoch;
        best_val_f1 = ckpt.meta.best_val_f1;
        best_epoch = ckpt.meta.best_epoch;
    }

    fs::create_dir_all(&config.checkpoint_dir)?;
    let last_path = config.checkpoint_dir.join("last.pluw");
    let best_path = config.checkpoint_dir.join("best.pluw");
    let log_path = config.checkpoint_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let hyper = AdamHyper {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps_adam,
    };

    let mut records = Vec::new();
    for epoch in start_epoch..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut elems = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (images, targets) = stack_batch(&batch)?;
            let n = targets.len();
            let loss = train_step(&model, &mut params, &mut adam, &hyper, &images, &targets)
                .map_err(|e| match e {
                    Error::Train(m) => Error::Train(format!(
                        "epoch {}, step {}: {m}",
                        epoch + 1,
                        adam.t + 1
                    )),
                    other => other,
                })?;
            loss_sum += loss * n as f64;
            elems += n;
        }

        let report = evaluate_params(
            &model,
            &mut params,
            &val_set,
            config.threshold,
            AggregateMode::PerImage,
        )?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / elems as f64,
            val_pc: report.pc,
            val_se: report.se,
            val_f1: report.f1,
            val_js: report.js,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Format(format!("log record does not serialize: {e}")))?;
        writeln!(log, "{line}")?;

        let improved = best_val_f1.map_or(true, |b| report.f1 > b);
        if improved {
            best_val_f1 = Some(report.f1);
            best_epoch = epoch + 1;
        }
        let ckpt = build_checkpoint(
            &params,
            &adam,
            CheckpointMeta {
                config: config.arch.clone(),
                step: adam.t,
                epoch: epoch + 1,
                best_val_f1,
                best_epoch,
            },
        );
        codec::save_checkpoint(&last_path, &ckpt)?;
        if improved {
            codec::save_checkpoint(&best_path, &ckpt)?;
        }
        records.push(record);
    }

    Ok(TrainOutcome {
        records,
        best_epoch,
        best_val_f1,
        last_path,
        best_path,
        log_path,
    })
}
