//! Minibatch training with Adam on categorical cross-entropy, validation
//! monitoring and best-weights early stopping.

mod adam;
pub mod checkpoint;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample, Split};
use crate::error::{validation_err, Error, Result};
use crate::model::FusionModel;
use crate::tensor::{argmax, Tape, Tensor};

pub use adam::{AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, patience: 5, seed: 0, adam: AdamHyper::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean loss and accuracy for one pass over a split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: Option<usize>,
}

pub const LOG_CSV_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_CSV_HEADER}\n");
        for (i, e) in self.epochs.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", i + 1, e.train_loss, e.train_acc, e.val_loss, e.val_acc);
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.get(e - 1))
    }
}

/// Stacks samples into an image batch and one-hot label matrix.
pub fn make_batch(samples: &[&Sample], num_classes: usize) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let x = Tensor::stack(&images)?;
    let mut y = Tensor::zeros(&[samples.len(), num_classes]);
    for (i, s) in samples.iter().enumerate() {
        if s.label >= num_classes {
            return Err(validation_err!("sample {} has label {} >= {num_classes}", s.source_id, s.label));
        }
        y.data_mut()[i * num_classes + s.label] = 1.0;
    }
    Ok((x, y))
}

fn count_correct(probs: &Tensor, samples: &[&Sample]) -> usize {
    let c = probs.shape()[1];
    probs.data().chunks(c).zip(samples).filter(|(row, s)| argmax(row) == s.label).count()
}

/// Per-epoch generator: the shuffle order and dropout masks of epoch `e`
/// depend only on `(seed, e)`, so a resumed run replays them exactly.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One shuffled pass of minibatch updates. Returns mean training loss and
/// accuracy (dropout active).
pub fn train_epoch(
    model: &mut FusionModel,
    adam: &mut AdamState,
    train: &[&Sample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    if train.is_empty() {
        return Err(validation_err!("training split is empty"));
    }
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let classes = model.num_classes();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
        let (x, y) = make_batch(&batch, classes)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fp = model.forward(&mut tape, xv, true, Some(&mut rng))?;
        let loss = tape.softmax_cross_entropy(fp.logits, &y)?;
        tape.backward(loss)?;
        loss_sum += tape.value(loss).data()[0] * batch.len() as f64;
        correct += count_correct(tape.value(fp.probs), &batch);
        let grads: Vec<Tensor> = fp.params.iter().map(|&p| tape.grad_or_zeros(p)).collect();
        drop(tape);
        let mut params: Vec<_> = model.params_mut().collect();
        adam.step(&mut params, &grads)?;
    }
    let n = train.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Mean cross-entropy and accuracy in evaluation mode.
pub fn evaluate(model: &FusionModel, samples: &[&Sample], batch_size: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(validation_err!("cannot evaluate an empty split"));
    }
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for batch in samples.chunks(batch_size.max(1)) {
        let (x, y) = make_batch(batch, model.num_classes())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fp = model.forward(&mut tape, xv, false, None)?;
        let loss = tape.cce_loss(fp.probs, &y)?;
        loss_sum += tape.value(loss).data()[0] * batch.len() as f64;
        correct += count_correct(tape.value(fp.probs), batch);
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Evaluation-mode probabilities for every sample, `[N, C]` row-major.
pub fn predict_probabilities(
    model: &FusionModel,
    samples: &[&Sample],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(samples.len());
    for batch in samples.chunks(batch_size.max(1)) {
        let (x, _) = make_batch(batch, model.num_classes())?;
        let probs = model.probabilities(&x)?;
        rows.extend(probs.data().chunks(model.num_classes()).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

/// Drives `run_epoch` until the validation loss has failed to strictly
/// improve for `patience` consecutive epochs or `epochs` run out, then
/// restores the parameters saved at the best epoch.
pub fn run_with_early_stopping<F>(
    model: &mut FusionModel,
    epochs: usize,
    patience: usize,
    mut run_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(&mut FusionModel, usize) -> Result<EpochRecord>,
{
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut stale = 0;
    for epoch in 0..epochs {
        let record = run_epoch(model, epoch)?;
        log.epochs.push(record);
        let improved = match &best {
            None => !record.val_loss.is_nan(),
            Some((b, _)) => record.val_loss < *b,
        };
        if improved {
            best = Some((record.val_loss, model.snapshot()));
            log.best_epoch = Some(epoch + 1);
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                log::info!("early stop after epoch {}, best epoch {:?}", epoch + 1, log.best_epoch);
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        model.restore(&snapshot)?;
    }
    Ok(log)
}

/// Result of [`fit_with_early_stopping`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub log: TrainLog,
    pub adam: AdamState,
}

/// Trains on the dataset's train split, monitoring the validation split.
pub fn fit_with_early_stopping(
    model: &mut FusionModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let train = data.split_samples(Split::Train)?;
    let val = data.split_samples(Split::Validation)?;
    if train.is_empty() || val.is_empty() {
        return Err(validation_err!("train and validation splits must be non-empty"));
    }
    let mut adam = AdamState::for_params(model.params(), cfg.adam);
    let log = run_with_early_stopping(model, cfg.epochs, cfg.patience, |m, epoch| {
        let (train_loss, train_acc) = train_epoch(m, &mut adam, &train, cfg, epoch)?;
        let (val_loss, val_acc) = evaluate(m, &val, cfg.batch_size)?;
        log::info!(
            "epoch {:>3}: train loss {train_loss:.4} acc {train_acc:.4} | val loss {val_loss:.4} acc {val_acc:.4}",
            epoch + 1
        );
        Ok(EpochRecord { train_loss, train_acc, val_loss, val_acc })
    })?;
    Ok(FitOutcome { log, adam })
}
