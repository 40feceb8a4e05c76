//! Minibatch training and evaluation.

use std::collections::VecDeque;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{focal_loss, masked_cross_entropy};
use super::metrics::{ConfusionMatrix, Metrics};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::LrSchedule;
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint};
use crate::embedding::SitsTensor;
use crate::error::{Error, Result};
use crate::model::{Task, TsvitModel};
use crate::params::Bound;
use crate::tensor::Tensor;

/// Supervision for one series.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Row-major `H·W` labels; the background label is `K`.
    Pixels(Vec<usize>),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sits: SitsTensor,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub adamw: AdamWConfig,
    pub focal_gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            warmup_epochs: 10,
            peak_lr: 1e-3,
            floor_lr: 5e-6,
            adamw: AdamWConfig::default(),
            focal_gamma: 2.0,
            seed: 0,
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimisation steps completed so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub overall_accuracy: f64,
    pub mean_iou: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch,step,lr,loss,OA,mIoU";

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.loss, self.overall_accuracy, self.mean_iou
        )
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Runs `model` over `examples` without recording gradients.
pub fn evaluate(model: &TsvitModel, examples: &[Example], batch_size: usize) -> Result<EvalReport> {
    let k = model.config().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        for group in group_examples(&refs) {
            let sits: Vec<&SitsTensor> = group.iter().map(|e| &e.sits).collect();
            let logits = model.predict(&sits)?;
            let pred = logits.argmax_last();
            let per = pred.len() / group.len();
            for (e, p) in group.iter().zip(pred.chunks(per)) {
                match &e.target {
                    Target::Pixels(labels) => {
                        if labels.len() != p.len() {
                            return Err(Error::Dimension(format!(
                                "{} labels for {} predicted pixels",
                                labels.len(),
                                p.len()
                            )));
                        }
                        for (&y, &yhat) in labels.iter().zip(p) {
                            cm.record(y, yhat, k)?;
                        }
                    }
                    Target::Class(y) => cm.record(*y, p[0], k)?,
                }
            }
        }
    }
    let metrics = cm.metrics()?;
    Ok(EvalReport {
        confusion: cm,
        metrics,
    })
}

fn group_examples<'a>(batch: &[&'a Example]) -> Vec<Vec<&'a Example>> {
    let mut groups: Vec<(usize, Vec<&Example>)> = Vec::new();
    for e in batch {
        let t = e.sits.dims().0;
        match groups.iter_mut().find(|(len, _)| *len == t) {
            Some((_, g)) => g.push(e),
            None => groups.push((t, vec![e])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// Owns the model and optimiser through a training run.
pub struct Trainer {
    model: TsvitModel,
    config: TrainConfig,
    optimizer: AdamW,
    schedule: LrSchedule,
    epoch: usize,
    step: usize,
    best_miou: f64,
    recent_losses: VecDeque<f64>,
}

const HISTORY: usize = 16;

impl Trainer {
    pub fn new(model: TsvitModel, config: TrainConfig, train_len: usize) -> Result<Self> {
        if train_len == 0 {
            return Err(Error::Config("training split is empty".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let steps_per_epoch = train_len.div_ceil(config.batch_size);
        let schedule = LrSchedule::new(
            config.warmup_epochs,
            config.peak_lr,
            config.floor_lr,
            config.epochs,
            steps_per_epoch,
        )?;
        let optimizer = AdamW::new(config.adamw, model.params());
        Ok(Self {
            model,
            config,
            optimizer,
            schedule,
            epoch: 0,
            step: 0,
            best_miou: f64::NEG_INFINITY,
            recent_losses: VecDeque::new(),
        })
    }

    pub fn model(&self) -> &TsvitModel {
        &self.model
    }

    pub fn into_model(self) -> TsvitModel {
        self.model
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Loss of one minibatch on a fresh tape.
    fn batch_loss(&self, tape: &mut Tape<f32>, p: &Bound, batch: &[&Example]) -> Result<Var> {
        let k = self.model.config().num_classes;
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for group in group_examples(batch) {
            let sits: Vec<&SitsTensor> = group.iter().map(|e| &e.sits).collect();
            let y = self.model.forward(tape, p, &sits)?;
            let rows = tape.value(y).numel() / k;
            logits.push(tape.reshape(y, &[rows, k])?);
            for e in &group {
                match (&e.target, self.model.config().task) {
                    (Target::Pixels(l), Task::Segmentation) => labels.extend_from_slice(l),
                    (Target::Class(c), Task::Classification) => labels.push(*c),
                    _ => {
                        return Err(Error::Data(
                            "example target does not match the model task".into(),
                        ))
                    }
                }
            }
        }
        let logits = if logits.len() == 1 {
            logits[0]
        } else {
            tape.concat(&logits, 0)?
        };
        match self.model.config().task {
            Task::Segmentation => masked_cross_entropy(tape, logits, &labels, k),
            Task::Classification => focal_loss(tape, logits, &labels, self.config.focal_gamma),
        }
    }

    /// One pass over `train` in a seed- and epoch-determined order, followed
    /// by evaluation on `eval` (or on `train` when `eval` is empty).
    pub fn run_epoch(&mut self, train: &[Example], eval: &[Example]) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            lr = self.schedule.lr_at(self.step);
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let p = self.model.params().bind(&mut tape, true);
            let loss = self.batch_loss(&mut tape, &p, &batch)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                self.recent_losses.push_back(value);
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    lr,
                    history: self.recent_losses.iter().copied().collect(),
                });
            }
            let mut grads = tape.backward(loss)?;
            let grads = p.collect_grads(&mut grads, self.model.params());
            self.optimizer.step(self.model.params_mut(), &grads, lr)?;

            self.recent_losses.push_back(value);
            if self.recent_losses.len() > HISTORY {
                self.recent_losses.pop_front();
            }
            debug!("step {} lr {lr} loss {value}", self.step);
            loss_sum += value;
            batches += 1;
            self.step += 1;
        }
        self.epoch += 1;

        let report = evaluate(
            &self.model,
            if eval.is_empty() { train } else { eval },
            self.config.batch_size,
        )?;
        let record = EpochRecord {
            epoch: self.epoch,
            step: self.step,
            lr,
            loss: loss_sum / batches as f64,
            overall_accuracy: report.metrics.overall_accuracy,
            mean_iou: report.metrics.mean_iou,
        };
        info!("{}", record.to_line());
        Ok(record)
    }

    /// Model parameters plus optimiser moments and loop counters.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = model_checkpoint(&self.model);
        for (k, v) in [
            ("train_epoch", self.epoch.to_string()),
            ("train_step", self.step.to_string()),
            ("train_best_miou", self.best_miou.to_string()),
            ("adam_step", self.optimizer.steps().to_string()),
        ] {
            ck.header.push((k.into(), v));
        }
        for (i, (name, _)) in self.model.params().iter().enumerate() {
            ck.tensors.push((
                format!("adam.m/{name}"),
                self.optimizer.first_moments()[i].clone(),
            ));
            ck.tensors.push((
                format!("adam.v/{name}"),
                self.optimizer.second_moments()[i].clone(),
            ));
        }
        ck
    }

    /// Continues a run saved with [`Trainer::state_checkpoint`].
    pub fn resume(ck: &Checkpoint, config: TrainConfig, train_len: usize) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let mut t = Self::new(model, config, train_len)?;
        let num = |key: &str| -> Result<&str> {
            ck.header_value(key)
                .ok_or_else(|| Error::Compatibility(format!("training state lacks {key}")))
        };
        let bad = |key: &str| Error::Compatibility(format!("malformed {key}"));
        t.epoch = num("train_epoch")?
            .parse()
            .map_err(|_| bad("train_epoch"))?;
        t.step = num("train_step")?.parse().map_err(|_| bad("train_step"))?;
        t.best_miou = num("train_best_miou")?
            .parse()
            .map_err(|_| bad("train_best_miou"))?;
        let adam_step: u64 = num("adam_step")?.parse().map_err(|_| bad("adam_step"))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in t.model.params().iter() {
            for (prefix, dst) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                let key = format!("{prefix}{name}");
                let buf: &Tensor<f32> = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::Compatibility(format!("training state lacks {key}")))?;
                if buf.shape() != p.shape() {
                    return Err(Error::Compatibility(format!("{key} has the wrong shape")));
                }
                dst.push(buf.clone());
            }
        }
        t.optimizer = AdamW::from_state(t.config.adamw, adam_step, m, v);
        Ok(t)
    }
}

/// Files written by [`train_loop`] inside its output directory.
pub struct RunFiles {
    pub metric_log: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_confusion: PathBuf,
    pub state: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metric_log: dir.join("metrics.log"),
            best_checkpoint: dir.join("best.ckpt"),
            best_confusion: dir.join("best_confusion.txt"),
            state: dir.join("state.ckpt"),
        }
    }
}

/// Trains until the configured epoch count, appending one metric line per
/// epoch, keeping the best-mIoU checkpoint and saving resumable state after
/// every epoch. A `state.ckpt` already present in `out_dir` is resumed.
pub fn train_loop(
    model: TsvitModel,
    train: &[Example],
    eval: &[Example],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<(TsvitModel, Vec<EpochRecord>)> {
    fs::create_dir_all(out_dir)?;
    let files = RunFiles::in_dir(out_dir);
    let mut trainer = if files.state.exists() {
        info!("resuming from {}", files.state.display());
        Trainer::resume(
            &Checkpoint::load(&files.state)?,
            config.clone(),
            train.len(),
        )?
    } else {
        Trainer::new(model, config.clone(), train.len())?
    };
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&files.metric_log)?;
    let mut records = Vec::new();
    while !trainer.is_finished() {
        let rec = trainer.run_epoch(train, eval)?;
        writeln!(log, "{}", rec.to_line())?;
        log.flush()?;
        if rec.mean_iou > trainer.best_miou {
            trainer.best_miou = rec.mean_iou;
            model_checkpoint(trainer.model()).save(&files.best_checkpoint)?;
            let report = evaluate(
                trainer.model(),
                if eval.is_empty() { train } else { eval },
                config.batch_size,
            )?;
            fs::write(&files.best_confusion, report.confusion.to_text())?;
        }
        trainer.state_checkpoint().save(&files.state)?;
        records.push(rec);
    }
    Ok((trainer.into_model(), records))
}
