//! Training loop: shuffled mini-batches, Adam with a one-cycle schedule,
//! per-epoch validation, early stopping and checkpointing.

pub mod metrics;
pub mod optim;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::{Dataset, Splits};
use crate::error::{contract_err, Error, Result};
use crate::model::DuoFormer;
use crate::nn::Mode;
use crate::rng::Rng;
use crate::tensor::Float;

pub use metrics::{argmax_rows, balanced_accuracy, Confusion};
pub use optim::{adam_update, onecycle_lr, Adam, AdamParams, AdamSlot, OneCycle};

/// One line of `run.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_acc: f64,
    pub lr: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    /// Per-class recall; `None` for classes absent from the split.
    pub recalls: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// 1-based index of the epoch with the best validation score.
    pub best_epoch: usize,
    pub best_val_balanced_acc: f64,
    pub stopped_early: bool,
    pub test: EvalResult,
}

/// Tracks the best validation score; ties do not count as improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: 0,
            best_score: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Records a score; returns (improved, should_stop).
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best_score {
            self.best_score = score;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write `run.jsonl`, `best.dfc`, `last.dfc` and `summary.json`.
    pub out_dir: Option<PathBuf>,
    /// Also measure training-set accuracy each epoch.
    pub track_train_acc: bool,
    /// Stop as soon as training accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub const EVAL_BATCH: usize = 64;

/// Eval-mode predictions and metrics over a dataset.
pub fn evaluate<T: Float>(model: &DuoFormer<T>, data: &Dataset<T>) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(contract_err!("cannot evaluate an empty split"));
    }
    let classes = model.cfg.num_classes;
    let mut predictions = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for rows in idx.chunks(EVAL_BATCH) {
        let batch = data.inputs.rows(rows);
        let logits = model.logits(batch.as_input())?;
        predictions.extend(argmax_rows(logits.data(), classes));
    }
    let conf = Confusion::new(&predictions, &data.labels, classes.max(data.num_classes))?;
    Ok(EvalResult {
        balanced_accuracy: conf.balanced_accuracy(),
        accuracy: conf.accuracy(),
        recalls: conf.recalls(),
        confusion: conf.counts,
        predictions,
    })
}

/// Forward, backward and one Adam update on a batch; returns the loss.
pub fn train_step<T: Float>(
    model: &mut DuoFormer<T>,
    adam: &mut Adam,
    data: &Dataset<T>,
    rows: &[usize],
    lr: f64,
) -> Result<f64> {
    let batch = data.inputs.rows(rows);
    let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
    let (loss, out) = {
        let mut ctx = model.ctx(Mode::Train);
        let logits = model.forward(&mut ctx, batch.as_input())?;
        let loss = ctx.tape.cross_entropy(logits, &labels)?;
        ctx.tape.backward(loss)?;
        let value = ctx.tape.value(loss)[0].as_f64();
        (value, ctx.finish())
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    model.params.zero_grad();
    out.accumulate_grads(&mut model.params)?;
    adam.step(&mut model.params, lr)?;
    out.apply_buffers(&mut model.params)?;
    model.params.zero_grad();
    Ok(loss)
}

/// Batches per epoch; a trailing batch of one sample is dropped because
/// train-mode batch norm needs more than one value per channel.
pub fn epoch_batches(n: usize, batch: usize, order: &[usize]) -> Vec<Vec<usize>> {
    order
        .chunks(batch)
        .filter(|c| c.len() > 1 || n == 1)
        .map(|c| c.to_vec())
        .collect()
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = File::options().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    f.flush()?;
    Ok(())
}

fn json<S: Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("records serialize")
}

/// Trains with early stopping on validation balanced accuracy and restores
/// the best checkpoint before the test evaluation.
pub fn train<T: Float>(
    model: &mut DuoFormer<T>,
    splits: &Splits<T>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<RunRecord> {
    cfg.validate()?;
    let n = splits.train.len();
    if n < 2 {
        return Err(contract_err!(
            "training needs at least two samples, got {n}"
        ));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        let log = dir.join("run.jsonl");
        if log.exists() {
            fs::remove_file(&log)?;
        }
    }
    let per_epoch = epoch_batches(n, cfg.batch_size, &(0..n).collect::<Vec<_>>()).len();
    let schedule = OneCycle::new(cfg, per_epoch * cfg.max_epochs);
    let mut adam = Adam::from_config(cfg);
    let rng = Rng::new(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        rng.fork(&format!("epoch{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let batches = epoch_batches(n, cfg.batch_size, &order);
        for (b, rows) in batches.iter().enumerate() {
            lr = schedule.lr(step)?;
            step += 1;
            let loss =
                train_step(model, &mut adam, &splits.train, rows, lr).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            loss_sum += loss;
        }
        let val = evaluate(model, &splits.val)?;
        let train_acc = if opts.track_train_acc || opts.stop_at_train_acc.is_some() {
            Some(evaluate(model, &splits.train)?.accuracy)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_balanced_acc: val.balanced_accuracy,
            lr,
            seconds: start.elapsed().as_secs_f64(),
            train_acc,
        };
        if opts.verbose {
            eprintln!("{}", json(&record));
        }
        if let Some(dir) = &opts.out_dir {
            append_line(&dir.join("run.jsonl"), &json(&record))?;
        }
        epochs.push(record);
        let (improved, stop) = stopper.observe(epoch, val.balanced_accuracy);
        if improved {
            best = model.params.clone();
            if let Some(dir) = &opts.out_dir {
                model.save(&dir.join("best.dfc"))?;
            }
        }
        let reached = matches!((opts.stop_at_train_acc, train_acc), (Some(t), Some(a)) if a >= t);
        if stop || reached {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    if let Some(dir) = &opts.out_dir {
        model.save(&dir.join("last.dfc"))?;
    }
    model.params = best;
    let test = evaluate(model, &splits.test)?;
    let record = RunRecord {
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_balanced_acc: stopper.best_score,
        stopped_early,
        test,
    };
    if let Some(dir) = &opts.out_dir {
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&record).expect("serialize"),
        )?;
    }
    Ok(record)
}
