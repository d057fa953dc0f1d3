//! Optimization loop, learning-rate schedule, per-epoch dev evaluation and
//! best-checkpoint selection.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::RunConfig;
use crate::corpus::{batch, Sentence};
use crate::evaluation::{score, EvalError, EvalReport};
use crate::model::{Extractor, ModelBatch, ModelError, BACKBONE_PREFIX};
use crate::params::ForwardCtx;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: span {span}, triplet {triplet}, separation {separation:?}")]
    NonFiniteLoss {
        step: usize,
        span: f64,
        triplet: f64,
        separation: Option<f64>,
    },
    #[error("out of memory with batch size {batch_size}; retry with a smaller batch_size ({message})")]
    OutOfMemory { batch_size: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training split is empty")]
    EmptyTrainingSet,
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_owned(),
        source,
    }
}

/// L_sp + L_tri + α·L_kl on plain numbers.
pub fn total_loss(span: f64, triplet: f64, separation: f64, alpha: f64) -> Result<f64, TrainError> {
    let total = span + triplet + alpha * separation;
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: 0,
            span,
            triplet,
            separation: Some(separation),
        });
    }
    Ok(total)
}

/// Linear warmup over the first `warmup_ratio` of steps to `peak`, then
/// linear decay. `step` counts from 0.
pub fn learning_rate(step: usize, total_steps: usize, warmup_ratio: f64, peak: f64) -> f64 {
    let total = total_steps.max(1);
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        let remaining = total.saturating_sub(step).max(1);
        peak * remaining as f64 / (total - warmup).max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub total: f64,
    pub span: f64,
    pub triplet: f64,
    pub separation: Option<f64>,
    pub learning_rate: f64,
}

struct Group {
    optimizer: AdamW,
    peak: f64,
}

/// Owns an extractor and steps its optimizers.
pub struct Trainer {
    pub extractor: Extractor,
    groups: Vec<Group>,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    pub fn new(extractor: Extractor, total_steps: usize) -> Result<Self, TrainError> {
        let cfg = &extractor.config;
        let params = |lr: f64| ParamsAdamW {
            lr,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        };
        let vars = extractor.store.vars();
        let groups = match cfg.head_learning_rate {
            None => vec![Group {
                optimizer: AdamW::new(vars.into_iter().map(|(_, v)| v).collect(), params(cfg.learning_rate))?,
                peak: cfg.learning_rate,
            }],
            Some(head_lr) => {
                let (backbone, head): (Vec<(String, Var)>, Vec<(String, Var)>) =
                    vars.into_iter().partition(|(n, _)| n.starts_with(BACKBONE_PREFIX));
                vec![
                    Group {
                        optimizer: AdamW::new(backbone.into_iter().map(|(_, v)| v).collect(), params(cfg.learning_rate))?,
                        peak: cfg.learning_rate,
                    },
                    Group {
                        optimizer: AdamW::new(head.into_iter().map(|(_, v)| v).collect(), params(head_lr))?,
                        peak: head_lr,
                    },
                ]
            }
        };
        Ok(Trainer {
            extractor,
            groups,
            step: 0,
            total_steps,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer step on `batch`. A non-finite loss aborts before any
    /// parameter changes.
    pub fn step(&mut self, batch: &ModelBatch) -> Result<StepStats, TrainError> {
        let cfg = &self.extractor.config;
        let mut ctx = ForwardCtx::train(cfg.seed.wrapping_add(self.step as u64));
        let out = self.extractor.model.forward(batch, &mut ctx)?;
        let l = &out.losses;
        let scalar = |t: &candle_core::Tensor| -> Result<f64, TrainError> {
            Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
        };
        let span = scalar(&l.span)?;
        let triplet = scalar(&l.triplet)?;
        let separation = l.separation.as_ref().map(scalar).transpose()?;
        let total = scalar(&l.total)?;
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                span,
                triplet,
                separation,
            });
        }
        let grads = l.total.backward().map_err(|e| oom(e, batch.gold.len()))?;
        let mut lr = 0.0;
        for g in &mut self.groups {
            lr = learning_rate(self.step, self.total_steps, cfg.warmup_ratio, g.peak);
            g.optimizer.set_learning_rate(lr);
            g.optimizer.step(&grads)?;
        }
        let stats = StepStats {
            step: self.step,
            total,
            span,
            triplet,
            separation,
            learning_rate: lr,
        };
        self.step += 1;
        Ok(stats)
    }

    pub fn evaluate(&self, sentences: &[Sentence]) -> Result<EvalReport, TrainError> {
        let preds = self
            .extractor
            .predict(sentences, self.extractor.config.batch_size)?;
        let gold: Vec<_> = sentences.iter().map(|s| s.gold_triplets.clone()).collect();
        Ok(score(&preds, &gold)?)
    }
}

fn oom(e: candle_core::Error, batch_size: usize) -> TrainError {
    let message = e.to_string();
    if message.to_ascii_lowercase().contains("out of memory") {
        TrainError::OutOfMemory { batch_size, message }
    } else {
        e.into()
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub learning_rate: f64,
    pub dev_precision: Option<f64>,
    pub dev_recall: Option<f64>,
    pub dev_f1: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub steps: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_dev_f1: Option<f64>,
    pub final_train_loss: f64,
}

pub fn run_dir(out_dir: &Path, cfg: &RunConfig) -> PathBuf {
    out_dir.join(&cfg.run_name)
}

/// Trains on `train`, evaluating on `dev` every `eval_every` epochs and on
/// the last one. Writes `config.json`, `metrics.jsonl` and `best.ckpt`
/// under `{out_dir}/{run_name}`. With an empty dev set the latest
/// evaluation point is kept.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Sentence],
    dev_set: &[Sentence],
    out_dir: &Path,
    device: &Device,
) -> Result<TrainSummary, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let dir = run_dir(out_dir, cfg);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json_pretty()).map_err(io_err(&cfg_path))?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;

    let extractor = Extractor::from_config(cfg, train_set, device)?;
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut total_steps = per_epoch * cfg.epochs;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let mut trainer = Trainer::new(extractor, total_steps)?;
    let mut best: Option<(usize, f64)> = None;
    let mut last_loss = f64::NAN;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        let batches = batch(train_set, cfg.batch_size, Some(cfg.seed.wrapping_add(epoch as u64)));
        let mut losses = Vec::new();
        let mut lr = 0.0;
        for b in &batches {
            if trainer.steps_taken() >= total_steps {
                break;
            }
            let refs: Vec<&Sentence> = b.indices.iter().map(|&i| &train_set[i]).collect();
            let mb = trainer.extractor.batch(&refs)?;
            let s = trainer.step(&mb)?;
            losses.push(s.total);
            lr = s.learning_rate;
        }
        if losses.is_empty() {
            break;
        }
        epochs_run = epoch;
        last_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let last = epoch == cfg.epochs || trainer.steps_taken() >= total_steps;
        let mut record = EpochRecord {
            epoch,
            steps: trainer.steps_taken(),
            train_loss: last_loss,
            learning_rate: lr,
            dev_precision: None,
            dev_recall: None,
            dev_f1: None,
            best: false,
        };
        if epoch % cfg.eval_every == 0 || last {
            let f1 = if dev_set.is_empty() {
                0.0
            } else {
                let r = trainer.evaluate(dev_set)?;
                record.dev_precision = Some(r.precision());
                record.dev_recall = Some(r.recall());
                record.dev_f1 = Some(r.f1());
                r.f1()
            };
            if best.is_none_or(|(_, b)| f1 > b || dev_set.is_empty()) {
                best = Some((epoch, f1));
                record.best = true;
                checkpoint::save(&trainer.extractor, &dir.join("best.ckpt"))?;
            }
            log::info!(
                "epoch {epoch} step {} loss {last_loss:.4} dev f1 {:?}",
                trainer.steps_taken(),
                record.dev_f1
            );
        }
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
        if last {
            break;
        }
    }
    Ok(TrainSummary {
        run_dir: dir,
        steps: trainer.steps_taken(),
        epochs: epochs_run,
        best_epoch: best.map(|b| b.0),
        best_dev_f1: if dev_set.is_empty() { None } else { best.map(|b| b.1) },
        final_train_loss: last_loss,
    })
}
