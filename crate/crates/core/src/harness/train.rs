//! Warm-start, frozen-backbone and joint training stages with Adam.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result, TensorError};
use crate::objectives::LossBreakdown;
use crate::params::{Ctx, ParamGroup};
use crate::rng::Rng;
use crate::text::{EncodedCaption, TextBatch};
use crate::visual::{ImageBatch, PersonImage};

use super::adam::{Adam, AdamConfig};
use super::checkpoint;
use super::config::TrainConfig;
use super::model::Model;

pub const CHECKPOINT_FILE: &str = "checkpoint.pmac";
pub const LOG_FILE: &str = "train.jsonl";

/// Seed stream of the first epoch's batch order.
const EPOCH_STREAM: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Everything trains at the stage-1 rate; ranking terms off unless configured.
    Warmup,
    /// Visual CNN frozen, stage-1 rate.
    Frozen,
    /// Everything trains at the stage-2 rate.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn first_epoch_mean(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mean_loss)
    }

    pub fn final_epoch_mean(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives the checkpoint and the JSON-lines log.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

impl TrainConfig {
    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.warmup_epochs {
            Stage::Warmup
        } else if epoch < self.warmup_epochs + self.stage1_epochs {
            Stage::Frozen
        } else {
            Stage::Joint
        }
    }

    pub fn lr_of(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Warmup | Stage::Frozen => self.lr_stage1,
            Stage::Joint => self.lr_stage2,
        }
    }
}

/// Image ids of each batch of `epoch`, with the caption drawn for each image.
pub fn epoch_batches(config: &TrainConfig, corpus: &Corpus, epoch: usize) -> Vec<Vec<(usize, usize)>> {
    let mut rng = Rng::new(config.seed).fork(EPOCH_STREAM + epoch as u64);
    let mut order = corpus.split_images(Split::Train);
    rng.shuffle(&mut order);
    let pairs: Vec<(usize, usize)> = order.into_iter().map(|i| (i, rng.below(corpus.images[i].captions.len()))).collect();
    pairs.chunks(config.batch_size).filter(|c| c.len() >= 2).map(<[_]>::to_vec).collect()
}

/// True when the latest moving average improved on the previous one by less than `min_improvement`.
pub fn converged(means: &[f64], window: usize, min_improvement: f64) -> bool {
    let n = means.len();
    if n < window + 1 {
        return false;
    }
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = avg(&means[n - 1 - window..n - 1]);
    let cur = avg(&means[n - window..]);
    (prev - cur) < min_improvement * prev.abs()
}

struct Trainer<'c> {
    corpus: &'c Corpus,
    model: Model,
    adam: Adam,
    step: u64,
    log: Option<BufWriter<File>>,
    checkpoint: Option<PathBuf>,
}

impl Trainer<'_> {
    fn run_step(&mut self, batch: &[(usize, usize)], stage: Stage, epoch: usize) -> Result<StepLog> {
        let cfg = &self.model.config;
        let frozen: &[ParamGroup] = if stage == Stage::Frozen { &[ParamGroup::VisualCnn] } else { &[] };
        let caps: Vec<EncodedCaption> = batch.iter().map(|&(i, c)| self.corpus.encode(i, c)).collect();
        let imgs: Vec<&PersonImage> = batch.iter().map(|&(i, _)| &self.corpus.images[i].image).collect();
        let texts = TextBatch::new(&caps)?;
        let images = ImageBatch::new(&imgs, cfg.con_pose, &self.model.grouping)?;
        let labels = images
            .identities
            .iter()
            .map(|&id| self.model.label_of(id).ok_or_else(|| Error::Data(format!("identity {id} is not a training identity"))))
            .collect::<Result<Vec<_>>>()?;
        let ids = &images.identities;
        let n = ids.len();
        let exclude: Vec<bool> = (0..n * n).map(|k| k / n != k % n && ids[k / n] == ids[k % n]).collect();
        let exclude = cfg.exclude_same_identity.then_some(exclude.as_slice());

        let tape = Tape::new();
        let bound = self.model.store.bind(&tape, frozen);
        let ctx = Ctx::new(&tape, &bound);
        let diverged = Error::Diverged { step: self.step as usize };
        let (loss, parts) = match self.model.loss(&ctx, &texts, &images, &labels, exclude, stage != Stage::Warmup || cfg.warmup_ranking) {
            Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(diverged),
            r => r?,
        };
        if !parts.total.is_finite() {
            return Err(diverged);
        }
        tape.backward(loss)?;
        let store = &self.model.store;
        let grads: Vec<_> = store
            .ids()
            .filter(|&id| !frozen.contains(&store.group(id)))
            .filter_map(|id| tape.grad(bound.var(id)).map(|g| (id, g)))
            .collect();
        let lr = cfg.lr_of(stage);
        drop(ctx);
        self.adam.step(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        let entry = StepLog { step: self.step, epoch, stage, lr, loss: parts };
        if let Some(w) = &mut self.log {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
        }
        Ok(entry)
    }

    fn save(&mut self) -> Result<()> {
        if let Some(w) = &mut self.log {
            w.flush()?;
        }
        if let Some(path) = &self.checkpoint {
            checkpoint::save(&self.model, self.step, path)?;
        }
        Ok(())
    }
}

/// Trains a fresh model on the corpus's training split.
pub fn train(config: TrainConfig, corpus: &Corpus, mut opts: TrainOptions) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let identities = corpus.split_identities(Split::Train);
    if corpus.split_images(Split::Train).len() < 2 {
        return Err(Error::Data("training needs at least 2 images".into()));
    }
    let model = Model::new(config.clone(), corpus.vocab.clone(), identities)?;
    let adam = Adam::new(
        &model.store,
        AdamConfig { beta1: config.adam_beta1, beta2: config.adam_beta2, eps: config.adam_eps },
    );
    let (log, checkpoint) = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            (Some(BufWriter::new(File::create(dir.join(LOG_FILE))?)), Some(dir.join(CHECKPOINT_FILE)))
        }
        None => (None, None),
    };
    let mut t = Trainer { corpus, model, adam, step: 0, log, checkpoint };
    let mut report = TrainReport::default();
    let mut joint_epochs = 0;
    'epochs: for epoch in 0..config.total_epochs() {
        let stage = config.stage_of(epoch);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in epoch_batches(&config, corpus, epoch) {
            let entry = t.run_step(&batch, stage, epoch)?;
            sum += entry.loss.total;
            count += 1;
            report.steps.push(entry);
            if opts.max_steps.is_some_and(|m| t.step >= m) {
                break;
            }
        }
        let summary = EpochLog { epoch, stage, steps: count, mean_loss: sum / count.max(1) as f64 };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&summary);
        }
        report.epochs.push(summary);
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            t.save()?;
        }
        if opts.max_steps.is_some_and(|m| t.step >= m) {
            break;
        }
        if stage == Stage::Joint {
            joint_epochs += 1;
            let means: Vec<f64> = report.epochs.iter().map(|e| e.mean_loss).collect();
            if joint_epochs >= config.early_stop_window
                && converged(&means, config.early_stop_window, config.early_stop_min_improvement)
            {
                report.stopped_early = true;
                break 'epochs;
            }
        }
    }
    t.save()?;
    Ok((t.model, report))
}

/// Reads the JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
