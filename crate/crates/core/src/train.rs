//! Mini-batch SGD with momentum, step learning-rate decay, evaluation and
//! resumable state.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{clip_seed, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics;
use crate::network::Network;
use crate::nn::{Forward, Mode, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Decoupled decay applied to convolution and linear weights only.
    pub weight_decay: f64,
    /// Dropout before the classifier.
    pub dropout: f64,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Keep every normalization layer after the stem at its initial
    /// statistics and scale.
    pub freeze_bn: bool,
    pub eval_batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            dropout: 0.5,
            epochs: 30,
            decay_epochs: vec![20, 27],
            decay_factor: 10.0,
            freeze_bn: false,
            eval_batch_size: 100,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.decay_factor > 1.0) {
            return bad(format!("decay_factor must exceed 1, got {}", self.decay_factor));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay_epochs must be strictly increasing, got {:?}", self.decay_epochs));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad(format!("decay_epochs {:?} must be below epochs = {}", self.decay_epochs, self.epochs));
        }
        Ok(())
    }

    /// Step schedule: `lr / factor^(number of decay epochs <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr / self.decay_factor.powi(steps as i32)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Network, parameters and optimizer state.
pub struct Trainer {
    pub config: RunConfig,
    pub network: Network,
    pub store: ParamStore<f32>,
    pub momentum: Vec<Option<Tensor<f32>>>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_top1: f64,
    pub best_epoch: Option<usize>,
}

/// Accumulates loss and accuracy over batches.
#[derive(Default)]
struct Tally {
    loss: f64,
    top1: usize,
    top5: usize,
    count: usize,
}

impl Tally {
    fn add(&mut self, scores: &Tensor<f32>, labels: &[usize], mean_loss: f64) -> Result<()> {
        let m = scores.shape()[1];
        self.loss += mean_loss * labels.len() as f64;
        self.top1 += metrics::topk_correct(scores, labels, 1)?;
        self.top5 += metrics::topk_correct(scores, labels, 5.min(m))?;
        self.count += labels.len();
        Ok(())
    }

    fn finish(&self, epoch: usize, split: &str, lr: f64) -> EpochMetrics {
        let n = self.count.max(1) as f64;
        EpochMetrics {
            epoch,
            split: split.into(),
            loss: self.loss / n,
            top1: self.top1 as f64 / n,
            top5: self.top5 as f64 / n,
            lr,
        }
    }
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.model.validate()?;
        config.trainer.validate()?;
        let mut store = ParamStore::new();
        let mut network = Network::new(config.model.clone(), &mut store, config.seed)?;
        if config.trainer.freeze_bn {
            network.freeze_batch_norm(&mut store);
        }
        let momentum = vec![None; store.len()];
        Ok(Trainer { config, network, store, momentum, epoch: 0, best_top1: 0.0, best_epoch: None })
    }

    /// Rebuilds the trainer recorded in a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut trainer = Trainer::new(ck.meta.config.clone())?;
        trainer.momentum = ck.restore(&mut trainer.store)?;
        trainer.epoch = ck.meta.epoch;
        trainer.best_top1 = ck.meta.best_top1;
        trainer.best_epoch = ck.meta.best_epoch;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            epoch: self.epoch,
            best_top1: self.best_top1,
            best_epoch: self.best_epoch,
            config: self.config.clone(),
        };
        Checkpoint::capture(meta, &self.store, &self.momentum)
    }

    /// Rejects data whose channels or classes do not match the model.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let model = &self.config.model;
        if data.dims[1] != model.in_channels {
            return Err(Error::Shape(format!(
                "dataset clips have {} channels but model in_channels = {}",
                data.dims[1], model.in_channels
            )));
        }
        if data.num_classes() != model.num_classes {
            return Err(Error::Shape(format!(
                "dataset has {} classes but model num_classes = {}",
                data.num_classes(),
                model.num_classes
            )));
        }
        let pool = model.pool;
        if !data.dims[2].is_multiple_of(pool) || !data.dims[3].is_multiple_of(pool) {
            return Err(Error::Shape(format!(
                "dataset frames are {}x{}, not divisible by model pool = {pool}",
                data.dims[2], data.dims[3]
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Deterministic order of training clips for `epoch`.
    pub fn epoch_order(&self, data: &Dataset, epoch: usize) -> Vec<usize> {
        let mut order = data.indices(Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(self.config.seed ^ 0x5348_5546, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// One SGD step on the given clips. Returns the scores and mean loss.
    pub fn step(&mut self, data: &Dataset, batch: &[usize], lr: f64, dropout_seed: u64) -> Result<(Tensor<f32>, f64)> {
        let x = data.batch::<f32>(batch)?;
        let labels = data.labels_of(batch);
        let tape = Tape::new();
        let (scores, loss, grads, updates) = {
            let ctx = Forward::new(&tape, &self.store, Mode::Train, dropout_seed);
            let scores = self.network.forward(&ctx, tape.constant(x), self.config.trainer.dropout)?;
            let loss = scores.cross_entropy(&labels)?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: self.epoch, batch: 0 });
            }
            let g = tape.backward(loss)?;
            ((*scores.value()).clone(), value, ctx.param_grads(&g), ctx.take_updates())
        };
        for (id, value) in updates {
            self.store.set(id, value)?;
        }
        self.apply_sgd(&grads, lr);
        Ok((scores, loss))
    }

    /// `v = mu v + g; w -= lr v + lr wd w` (decay on weights only).
    pub fn apply_sgd(&mut self, grads: &[Option<Tensor<f32>>], lr: f64) {
        let cfg = &self.config.trainer;
        let (mu, lr32) = (cfg.momentum as f32, lr as f32);
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let entry = self.store.entry(id);
            if !entry.trainable {
                continue;
            }
            let decay = if entry.kind == ParamKind::Weight { (lr * cfg.weight_decay) as f32 } else { 0.0 };
            let v = self.momentum[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = mu * *vi + *gi;
            }
            let w = self.store.value_mut(id);
            for (wi, vi) in w.data_mut().iter_mut().zip(v.data()) {
                *wi -= lr32 * *vi + decay * *wi;
            }
        }
    }

    /// Trains one epoch on the training split and returns its metrics.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let lr = self.config.trainer.lr_at(epoch);
        let order = self.epoch_order(data, epoch);
        let mut tally = Tally::default();
        for (b, batch) in order.chunks(self.config.trainer.batch_size).enumerate() {
            let seed = clip_seed(self.config.seed ^ 0x4452_4f50, ((epoch as u64) << 32) | b as u64);
            let (scores, loss) = self.step(data, batch, lr, seed).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, batch: b },
                other => other,
            })?;
            tally.add(&scores, &data.labels_of(batch), loss)?;
        }
        self.epoch += 1;
        Ok(tally.finish(epoch, "train", lr))
    }

    /// Scores of the given clips in evaluation mode.
    pub fn predict(&self, data: &Dataset, indices: &[usize]) -> Result<Tensor<f32>> {
        let m = self.config.model.num_classes;
        let mut out = Vec::with_capacity(indices.len() * m);
        for batch in indices.chunks(self.config.trainer.eval_batch_size) {
            let tape = Tape::new();
            let ctx = Forward::new(&tape, &self.store, Mode::Eval, 0);
            let scores = self.network.forward(&ctx, tape.constant(data.batch(batch)?), 0.0)?;
            out.extend_from_slice(scores.value().data());
        }
        Tensor::new(&[indices.len(), m], out)
    }

    pub fn evaluate(&self, data: &Dataset, split: Split, epoch: usize) -> Result<EpochMetrics> {
        let indices = data.indices(split);
        let mut tally = Tally::default();
        if !indices.is_empty() {
            let scores = self.predict(data, &indices)?;
            let labels = data.labels_of(&indices);
            tally.add(&scores, &labels, metrics::cross_entropy(&scores, &labels)?)?;
        }
        let name = if split == Split::Train { "train" } else { "val" };
        Ok(tally.finish(epoch, name, self.config.trainer.lr_at(epoch)))
    }

    /// Trains until `until` epochs are complete (at most the configured
    /// count), calling `on_epoch` with the train and validation lines of
    /// each epoch. Returns whether the last epoch set a new best.
    pub fn fit(
        &mut self,
        data: &Dataset,
        until: usize,
        mut on_epoch: impl FnMut(&Trainer, &[EpochMetrics], bool) -> Result<()>,
    ) -> Result<()> {
        self.check_dataset(data)?;
        let until = until.min(self.config.trainer.epochs);
        while self.epoch < until {
            let train = self.train_epoch(data)?;
            let mut lines = vec![train];
            let mut improved = false;
            if !data.indices(Split::Val).is_empty() {
                let val = self.evaluate(data, Split::Val, self.epoch - 1)?;
                if self.best_epoch.is_none() || val.top1 > self.best_top1 {
                    self.best_top1 = val.top1;
                    self.best_epoch = Some(val.epoch);
                    improved = true;
                }
                lines.push(val);
            }
            on_epoch(self, &lines, improved)?;
        }
        Ok(())
    }

    /// Trains to completion and returns the full metrics stream.
    pub fn run(&mut self, data: &Dataset) -> Result<Vec<EpochMetrics>> {
        let mut stream = Vec::new();
        let epochs = self.config.trainer.epochs;
        self.fit(data, epochs, |_, lines, _| {
            stream.extend_from_slice(lines);
            Ok(())
        })?;
        Ok(stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps() {
        let paper = SgdConfig { epochs: 50, decay_epochs: vec![30, 40, 45], ..SgdConfig::default() };
        assert_eq!(paper.lr_at(0), 0.01);
        assert!((paper.lr_at(30) - 1e-3).abs() < 1e-15);
        assert!((paper.lr_at(45) - 1e-5).abs() < 1e-15);
        let desk = SgdConfig { decay_epochs: vec![10, 20], ..SgdConfig::default() };
        assert_eq!(desk.lr_at(25), desk.lr / 100.0);
        assert_eq!(desk.lr_at(9), desk.lr);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let base = SgdConfig::default();
        assert!(SgdConfig { decay_epochs: vec![5, 5], ..base.clone() }.validate().is_err());
        assert!(SgdConfig { decay_epochs: vec![30], ..base.clone() }.validate().is_err());
        assert!(SgdConfig { decay_factor: 1.0, ..base.clone() }.validate().is_err());
        assert!(SgdConfig { lr: -0.1, ..base.clone() }.validate().is_err());
        assert!(SgdConfig { lr: 0.0, ..base }.validate().is_ok());
    }

    #[test]
    fn plain_step_is_minus_lr_times_grad() {
        let mut cfg = RunConfig::default();
        cfg.trainer.momentum = 0.0;
        cfg.trainer.weight_decay = 0.0;
        let mut trainer = Trainer::new(cfg).unwrap();
        let before = trainer.store.clone();
        let grads: Vec<_> =
            trainer.store.entries().iter().map(|e| Some(Tensor::full(e.value.shape(), 0.5f32))).collect();
        trainer.apply_sgd(&grads, 0.1);
        for (a, b) in before.entries().iter().zip(trainer.store.entries()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                let expect = if a.trainable { x - 0.05 } else { *x };
                assert!((y - expect).abs() <= 1e-7 * expect.abs().max(1.0), "{}", a.name);
            }
        }
    }
}
