//! Regularized multi-task objective, Adam and the early-stopping loop.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GesmeNet, SampleBatch};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Optimizer and loop settings; defaults follow the published training regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L2 weight on architecture parameters.
    pub alpha: f64,
    /// L1 weight on feature-weighting parameters.
    pub beta: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            alpha: 0.001,
            beta: 0.001,
            patience: 50,
            max_epochs: 500,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::config("learning rate, alpha and beta must be non-negative"));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size, patience and max epochs must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// `‖O − A‖²` per sample, averaged over the batch.
pub fn task_loss<T: Scalar>(tape: &mut Tape<T>, o: Var, a: Var) -> Result<Var> {
    if tape.shape(o) != tape.shape(a) {
        return Err(Error::dim(format!(
            "task loss: prediction {:?} vs target {:?}",
            tape.shape(o),
            tape.shape(a)
        )));
    }
    let rows = tape.shape(o)[0];
    let d = tape.sub(o, a)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, T::one() / T::from_usize(rows).unwrap())
}

/// `α Σ w²` over architecture parameters plus `β Σ |w|` over weighting masks.
pub fn regularizer<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &Bound, alpha: f64, beta: f64) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for (group, weight) in [(ParamGroup::Architecture, alpha), (ParamGroup::FeatureWeighting, beta)] {
        if weight == 0.0 {
            continue;
        }
        let mut acc: Option<Var> = None;
        for id in store.ids() {
            if store.entries()[id.index()].group != group {
                continue;
            }
            let v = p.get(id);
            let t = match group {
                ParamGroup::Architecture => tape.square(v)?,
                ParamGroup::FeatureWeighting => tape.abs(v)?,
            };
            let s = tape.sum(t)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        if let Some(a) = acc {
            terms.push(tape.scale(a, T::from_f64_lossy(weight))?);
        }
    }
    Ok(match terms.as_slice() {
        [] => None,
        [one] => Some(*one),
        [a, b] => Some(tape.add(*a, *b)?),
        _ => unreachable!(),
    })
}

/// Handles to the pieces of the training objective on one tape.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub tasks: Vec<Var>,
    pub regularizer: Option<Var>,
}

/// Σ task losses + regularizers for one batch.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    net: &GesmeNet<T>,
    p: &Bound,
    batch: &SampleBatch<T>,
    alpha: f64,
    beta: f64,
) -> Result<LossParts> {
    if batch.targets.len() != net.tasks().len() {
        return Err(Error::usage(format!(
            "batch carries {} targets for {} tasks {:?}",
            batch.targets.len(),
            net.tasks().len(),
            net.tasks()
        )));
    }
    let x = net.inputs(tape, batch)?;
    let outs = net.forward_all(tape, p, x)?;
    let mut tasks = Vec::with_capacity(outs.len());
    for (o, t) in outs.iter().zip(&batch.targets) {
        let a = tape.constant(t.clone());
        tasks.push(task_loss(tape, *o, a)?);
    }
    let mut total = tasks[0];
    for &t in &tasks[1..] {
        total = tape.add(total, t)?;
    }
    let regularizer = regularizer(tape, &net.params, p, alpha, beta)?;
    if let Some(r) = regularizer {
        total = tape.add(total, r)?;
    }
    Ok(LossParts {
        total,
        tasks,
        regularizer,
    })
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (e, g) in store.entries().iter().zip(grads) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numerical(
                    "adam step",
                    format!("non-finite gradient in `{}` at flat index {i}", e.name),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, lr, eps) = (T::one(), T::from_f64_lossy(lr), T::from_f64_lossy(self.eps));
        // Subnormal moments are flushed; they carry no signal and are very slow on most CPUs.
        let tiny = T::min_positive_value();
        let flush = |x: T| if x.abs() < tiny { T::zero() } else { x };
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let w = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..w.len() {
                let gi = grads[k][i];
                m[i] = flush(b1 * m[i] + (one - b1) * gi);
                v[i] = flush(b2 * v[i] + (one - b2) * gi * gi);
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn clip<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean regularized objective over the epoch's batches.
    pub train_loss: f64,
    /// Mean Σ task loss (no regularizers) over the epoch's batches.
    pub train_task_loss: f64,
    /// Σ task loss on the validation set.
    pub val_loss: f64,
    pub val_task_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub tasks: Vec<String>,
    /// Epoch 0 is the untrained model; later epochs follow one pass each.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub wall_time_s: f64,
}

impl FitReport {
    /// `epoch,train_loss,train_task_loss,val_loss,val_<task>...`
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::fs::File::create(path)?;
        write!(out, "epoch,train_loss,train_task_loss,val_loss")?;
        for t in &self.tasks {
            write!(out, ",val_{t}")?;
        }
        writeln!(out)?;
        for e in &self.epochs {
            write!(out, "{},{},{},{}", e.epoch, e.train_loss, e.train_task_loss, e.val_loss)?;
            for v in &e.val_task_losses {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("a fit report always holds epoch 0")
    }
}

/// Flushes subnormal floats to zero on the current thread while alive.
///
/// Weights that drift towards zero otherwise produce subnormal products that
/// slow the matrix kernels down by an order of magnitude.
struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    fn new() -> Self {
        let mut saved = 0u32;
        // SAFETY: reading and writing MXCSR only changes SSE rounding/flush behaviour of this thread.
        unsafe {
            std::arch::asm!("stmxcsr [{}]", in(reg) &mut saved, options(nostack));
            let ftz_daz = saved | 0x8040;
            std::arch::asm!("ldmxcsr [{}]", in(reg) &ftz_daz, options(nostack, readonly));
        }
        Self { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn new() -> Self {
        Self {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `new`.
        unsafe {
            std::arch::asm!("ldmxcsr [{}]", in(reg) &self.saved, options(nostack, readonly));
        }
    }
}

/// Row count for evaluation-only passes.
const EVAL_CHUNK: usize = 256;

/// Per-task Σ‖O − A‖² / S over a whole sample set, without gradients.
pub fn evaluate_losses<T: Scalar>(net: &GesmeNet<T>, set: &SampleBatch<T>) -> Result<Vec<f64>> {
    let preds = predict_set(net, set)?;
    let s = set.rows() as f64;
    Ok(preds
        .iter()
        .zip(&set.targets)
        .map(|(o, a)| {
            o.data()
                .iter()
                .zip(a.data())
                .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
                .sum::<f64>()
                / s
        })
        .collect())
}

/// Predictions `[S, N]` per task for a whole sample set, in chunks.
pub fn predict_set<T: Scalar>(net: &GesmeNet<T>, set: &SampleBatch<T>) -> Result<Vec<Tensor<T>>> {
    let rows = set.rows();
    let mut parts: Vec<Vec<Tensor<T>>> = vec![Vec::new(); net.tasks().len()];
    let mut start = 0;
    while start < rows {
        let end = (start + EVAL_CHUNK).min(rows);
        let chunk = set.slice(start, end)?;
        for (dst, o) in parts.iter_mut().zip(net.predict(&chunk)?) {
            dst.push(o);
        }
        start = end;
    }
    parts.iter().map(|p| Tensor::concat_leading(p)).collect()
}

/// Mean objective and mean Σ task loss over mini-batches, without updating.
fn batch_losses<T: Scalar>(net: &GesmeNet<T>, set: &SampleBatch<T>, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let (mut total, mut task, mut count) = (0.0, 0.0, 0);
    let mut start = 0;
    while start < set.rows() {
        let end = (start + cfg.batch_size).min(set.rows());
        let batch = set.slice(start, end)?;
        let mut tape = Tape::new();
        let p = net.params.bind_frozen(&mut tape);
        let parts = total_loss(&mut tape, net, &p, &batch, cfg.alpha, cfg.beta)?;
        total += tape.value(parts.total).data()[0].to_f64_lossy();
        task += parts.tasks.iter().map(|t| tape.value(*t).data()[0].to_f64_lossy()).sum::<f64>();
        count += 1;
        start = end;
    }
    Ok((total / count as f64, task / count as f64))
}

pub fn fit<T: Scalar>(net: &mut GesmeNet<T>, train: &SampleBatch<T>, val: &SampleBatch<T>, cfg: &TrainConfig) -> Result<FitReport> {
    fit_with(net, train, val, cfg, None, |_| ControlFlow::Continue(()))
}

/// Training loop with an optional checkpoint written on every validation
/// improvement and an observer that may stop the run after any epoch.
///
/// On return the network holds the best-validation parameters.
pub fn fit_with<T: Scalar>(
    net: &mut GesmeNet<T>,
    train: &SampleBatch<T>,
    val: &SampleBatch<T>,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut observer: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.x_st.shape()[0] == 0 || val.x_st.shape()[0] == 0 {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    if train.targets.len() != net.tasks().len() || val.targets.len() != net.tasks().len() {
        return Err(Error::usage("every task needs targets in both splits"));
    }
    let _ftz = FlushDenormals::new();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&net.params);

    let (l0, t0) = batch_losses(net, train, cfg)?;
    let v0 = evaluate_losses(net, val)?;
    let first = EpochRecord {
        epoch: 0,
        train_loss: l0,
        train_task_loss: t0,
        val_loss: v0.iter().sum(),
        val_task_losses: v0,
    };
    let mut report = FitReport {
        tasks: net.tasks().to_vec(),
        epochs: vec![first],
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        wall_time_s: 0.0,
    };
    if observer(&report.epochs[0]).is_break() {
        report.stopped_early = true;
        report.best_val_loss = report.epochs[0].val_loss;
        report.wall_time_s = started.elapsed().as_secs_f64();
        return Ok(report);
    }

    let mut best = net.params.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.rows()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_task, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.gather(idx)?;
            let mut tape = Tape::new();
            let p = net.params.bind(&mut tape);
            let parts = total_loss(&mut tape, net, &p, &batch, cfg.alpha, cfg.beta)?;
            tape.backward(parts.total)?;
            let mut grads = net.params.gradients(&tape, &p);
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            sum_total += tape.value(parts.total).data()[0].to_f64_lossy();
            sum_task += parts.tasks.iter().map(|t| tape.value(*t).data()[0].to_f64_lossy()).sum::<f64>();
            batches += 1;
            adam.step(&mut net.params, &grads, cfg.learning_rate)?;
        }
        let val_tasks = evaluate_losses(net, val)?;
        let record = EpochRecord {
            epoch,
            train_loss: sum_total / batches as f64,
            train_task_loss: sum_task / batches as f64,
            val_loss: val_tasks.iter().sum(),
            val_task_losses: val_tasks,
        };
        if !record.train_loss.is_finite() || !record.val_loss.is_finite() {
            net.params = best;
            return Err(Error::numerical("training", format!("non-finite loss at epoch {epoch}")));
        }
        if record.val_loss < report.best_val_loss {
            report.best_val_loss = record.val_loss;
            report.best_epoch = epoch;
            best = net.params.clone();
            since_best = 0;
            if let Some(base) = checkpoint {
                net.save(base)?;
            }
        } else {
            since_best += 1;
        }
        let flow = observer(&record);
        report.epochs.push(record);
        if flow.is_break() || since_best >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    net.params = best;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}
