//! AdamW, the learning-rate schedule, the training loop and evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{AugmentPolicy, Batch, BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::layers::{apply_bn_updates, Ctx};
use crate::model::StripMlp;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Moments for every trainable tensor, indexed by parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub hyper: AdamW,
    pub step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, hyper: AdamW) -> Self {
        let moments = store
            .iter()
            .map(|(_, spec, t)| spec.role.trainable().then(|| (Tensor::zeros(t.shape()), Tensor::zeros(t.shape()))))
            .collect();
        Self { hyper, step: 0, moments }
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(id.0).and_then(Option::as_ref)
    }

    pub fn set_moments(&mut self, store: &ParamStore, id: ParamId, m: Tensor, v: Tensor) -> Result<()> {
        let expected = store.get(id).shape();
        for t in [&m, &v] {
            if t.shape() != expected {
                return Err(Error::TensorShape {
                    name: format!("optimizer state of {}", store.name(id)),
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        match self.moments.get_mut(id.0) {
            Some(slot @ Some(_)) => {
                *slot = Some((m, v));
                Ok(())
            }
            _ => Err(Error::Checkpoint(format!("`{}` has no optimizer state", store.name(id)))),
        }
    }
}

/// One decoupled-decay Adam update. Tensors without a gradient are untouched.
pub fn adamw_step(store: &mut ParamStore, grads: &[(ParamId, Tensor)], state: &mut OptimState, lr: f64) -> Result<()> {
    state.step += 1;
    let AdamW { beta1, beta2, eps, weight_decay } = state.hyper;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (id, g) in grads {
        let role = store.role(*id);
        let name = store.name(*id).to_string();
        let Some(Some((m, v))) = state.moments.get_mut(id.0) else {
            return Err(Error::Usage(format!("gradient for non-trainable tensor `{name}`")));
        };
        if g.shape() != m.shape() {
            return Err(Error::TensorShape { name, expected: m.shape().to_vec(), found: g.shape().to_vec() });
        }
        let decay = if role.decays() { 1.0 - lr * weight_decay } else { 1.0 };
        let (md, vd) = (m.data_mut(), v.data_mut());
        let theta = store.get_mut(*id).data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i];
            md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
            let update = (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            theta[i] = theta[i] * decay - lr * update;
        }
    }
    Ok(())
}

/// Linear warm-up followed by cosine decay, indexed by optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
    pub warmup_start_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { base_lr: 1e-3, warmup_epochs: 30, total_epochs: 300, min_lr: 1e-5, warmup_start_lr: 1e-6 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "warm-up ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if [self.base_lr, self.min_lr, self.warmup_start_lr].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        Ok(())
    }

    /// The final step `total_epochs * steps_per_epoch - 1` lands on `min_lr`.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warmup = self.warmup_epochs * steps_per_epoch;
        let total = self.total_epochs * steps_per_epoch;
        if step < warmup {
            let t = step as f64 / warmup as f64;
            return self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * t;
        }
        let span = total.saturating_sub(1).saturating_sub(warmup);
        let progress = if span == 0 { 1.0 } else { ((step - warmup) as f64 / span as f64).min(1.0) };
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Anything that maps an image batch to logits.
pub trait Classifier {
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

/// A model with its parameters, evaluated with running BN statistics.
pub struct Bound<'a> {
    pub model: &'a StripMlp,
    pub store: &'a ParamStore,
}

impl Classifier for Bound<'_> {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.model.logits(self.store, images)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let (n, k) = logits.dims2()?;
    if n != labels.len() {
        return Err(Error::dim(format!("{n} logit rows for {} labels", labels.len())));
    }
    Ok(logits.data().chunks(k.max(1)).zip(labels).filter(|(row, &l)| argmax(row) == l).count())
}

/// Top-1 accuracy over the whole dataset.
pub fn evaluate(clf: &dyn Classifier, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    for batch in BatchIter::sequential(ds, batch_size)? {
        correct += count_correct(&clf.logits(&batch.images)?, &batch.labels)?;
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
    pub logits: Tensor,
}

/// Forward, backward, BN running-stat update and one AdamW step.
pub fn train_step(
    model: &StripMlp,
    store: &mut ParamStore,
    opt: &mut OptimState,
    batch: &Batch,
    lr: f64,
    label_smoothing: f64,
) -> Result<StepOutput> {
    let (loss, logits, grads, bn) = {
        let mut cx = Ctx::training(store);
        let x = cx.input(batch.images.clone());
        let logits = model.forward(&mut cx, x)?;
        let loss = cx.graph.cross_entropy(logits, &batch.labels, label_smoothing)?;
        let loss_value = cx.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Ok(StepOutput { loss: loss_value, correct: 0, logits: cx.value(logits).clone() });
        }
        let mut g = cx.graph.backward(loss)?;
        let grads = cx.param_grads(&mut g);
        (loss_value, cx.value(logits).clone(), grads, cx.take_bn_updates())
    };
    apply_bn_updates(store, &bn);
    adamw_step(store, &grads, opt, lr)?;
    let correct = count_correct(&logits, &batch.labels)?;
    Ok(StepOutput { loss, correct, logits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub optimizer: AdamW,
    pub label_smoothing: f64,
    pub augment: AugmentPolicy,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Stop once an epoch's running train top-1 reaches this value.
    pub stop_at_train_top1: Option<f64>,
    /// Cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            schedule: Schedule::default(),
            optimizer: AdamW::default(),
            label_smoothing: 0.1,
            augment: AugmentPolicy::Basic,
            checkpoint_every: 0,
            stop_at_train_top1: None,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        train_top1: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        test_top1: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSummary {
    pub metrics: Vec<Metric>,
    pub steps: usize,
    pub final_train_top1: f64,
    pub final_test_top1: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainSummary {
    pub fn losses(&self) -> Vec<f64> {
        self.metrics
            .iter()
            .filter_map(|m| match m {
                Metric::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn lrs(&self) -> Vec<f64> {
        self.metrics
            .iter()
            .filter_map(|m| match m {
                Metric::Step { lr, .. } => Some(*lr),
                _ => None,
            })
            .collect()
    }

    pub fn epoch_top1(&self) -> Vec<f64> {
        self.metrics
            .iter()
            .filter_map(|m| match m {
                Metric::Epoch { train_top1, .. } => Some(*train_top1),
                _ => None,
            })
            .collect()
    }
}

struct MetricsLog(Option<BufWriter<File>>);

impl MetricsLog {
    fn write(&mut self, m: &Metric) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::to_string(m).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

pub struct TrainInputs<'a> {
    pub train: &'a Dataset,
    pub test: Option<&'a Dataset>,
    /// Metrics and checkpoints go here when set.
    pub run_dir: Option<&'a Path>,
    pub seed: u64,
}

/// Runs the configured epochs; aborts with [`Error::Diverged`] on a non-finite loss.
pub fn train(
    model: &StripMlp,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    inputs: &TrainInputs<'_>,
) -> Result<TrainSummary> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("epochs and batch size must be positive"));
    }
    cfg.schedule.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if inputs.train.classes > model.cfg.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model predicts {}",
            inputs.train.classes, model.cfg.num_classes
        )));
    }
    let mut log = MetricsLog(match inputs.run_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(BufWriter::new(File::create(d.join("metrics.jsonl"))?))
        }
        None => None,
    });
    let steps_per_epoch = inputs.train.len().div_ceil(cfg.batch_size);
    let mut opt = OptimState::new(store, cfg.optimizer);
    let mut summary = TrainSummary::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = BatchIter::new(inputs.train, cfg.batch_size, inputs.seed, epoch as u64, cfg.augment)?;
        let mut correct = 0;
        let mut seen = 0;
        for batch in batches {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let lr = cfg.schedule.lr_at(step, steps_per_epoch);
            let out = train_step(model, store, &mut opt, &batch, lr, cfg.label_smoothing).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step, lr, loss: f64::NAN },
                other => other,
            })?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged { step, lr, loss: out.loss });
            }
            let m = Metric::Step { step, epoch, lr, loss: out.loss };
            log.write(&m)?;
            summary.metrics.push(m);
            correct += out.correct;
            seen += batch.labels.len();
            step += 1;
        }
        if seen == 0 {
            break;
        }
        let train_top1 = correct as f64 / seen as f64;
        let test_top1 = inputs.test.map(|t| evaluate(&Bound { model, store }, t, cfg.batch_size)).transpose()?;
        let m = Metric::Epoch { epoch, step, train_top1, test_top1 };
        log.write(&m)?;
        summary.metrics.push(m);
        summary.final_train_top1 = train_top1;
        summary.final_test_top1 = test_top1;
        if let Some(dir) = inputs.run_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let p = dir.join(format!("checkpoint-epoch{}.smlp", epoch + 1));
                save_checkpoint(&p, store, Some(&opt))?;
                summary.checkpoints.push(p);
            }
        }
        if cfg.stop_at_train_top1.is_some_and(|t| train_top1 >= t) {
            break;
        }
    }
    summary.steps = step;
    if let Some(dir) = inputs.run_dir {
        let p = dir.join("checkpoint.smlp");
        save_checkpoint(&p, store, Some(&opt))?;
        summary.checkpoints.push(p);
    }
    if let Some(w) = &mut log.0 {
        w.flush()?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamBuilder, ParamRole};

    fn store() -> ParamStore {
        let mut b = ParamBuilder::materialized(0);
        b.alloc("w", &[2], ParamRole::Weight, Init::Ones).unwrap();
        b.alloc("g", &[2], ParamRole::NormScale, Init::Ones).unwrap();
        b.into_store().unwrap()
    }

    #[test]
    fn zero_grad_applies_pure_decay() {
        let mut s = store();
        let mut o = OptimState::new(&s, AdamW::default());
        let grads: Vec<_> = s.ids().map(|id| (id, Tensor::zeros(&[2]))).collect();
        adamw_step(&mut s, &grads, &mut o, 0.1).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.0 - 0.1 * 0.05; 2]);
        assert_eq!(s.get(ParamId(1)).data(), &[1.0; 2]);
    }

    #[test]
    fn schedule_end_points() {
        let s = Schedule { warmup_epochs: 2, total_epochs: 10, ..Schedule::default() };
        assert_eq!(s.lr_at(0, 5), s.warmup_start_lr);
        assert_eq!(s.lr_at(10, 5), s.base_lr);
        assert!((s.lr_at(49, 5) - s.min_lr).abs() <= 1e-12);
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }
}
