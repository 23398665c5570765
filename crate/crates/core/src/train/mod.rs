//! Loss, optimizer, schedule and the epoch loop.

mod adam;
mod recipe;

use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::{batch_to_tensor, prepare_clip, sequence_rng, DatasetManifest, SkeletonSequence, Split};
use crate::error::{Error, Result};
use crate::eval::score_sequences;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, Tape, Tensor};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use recipe::{lr_at_epoch, TrainRecipe};

/// Salt separating the validation-split stream from the epoch streams.
const VAL_SPLIT_SALT: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Empty when there is no validation set.
    pub val_acc: Option<f64>,
    pub wall_seconds: f64,
}

pub struct TrainOutcome<S> {
    pub model: Model<S>,
    pub log: Vec<EpochLog>,
}

/// Training and validation sequences for a run.
///
/// A `val` split in the dataset is used as is; otherwise `val_fraction` of the
/// training sequences is held out by a seeded shuffle.
pub fn split_for_training<'a>(
    manifest: &'a DatasetManifest,
    recipe: &TrainRecipe,
) -> (Vec<&'a SkeletonSequence>, Vec<&'a SkeletonSequence>) {
    let mut train: Vec<&SkeletonSequence> = manifest.split(Split::Train).collect();
    let val: Vec<&SkeletonSequence> = manifest.split(Split::Val).collect();
    if !val.is_empty() || recipe.val_fraction == 0.0 {
        return (train, val);
    }
    let n_val = (recipe.val_fraction * train.len() as f64).round() as usize;
    if n_val == 0 || n_val >= train.len() {
        return (train, Vec::new());
    }
    let mut rng = sequence_rng(recipe.seed, VAL_SPLIT_SALT, "validation");
    train.shuffle(&mut rng);
    let val = train.split_off(train.len() - n_val);
    (train, val)
}

fn check_compatible<S: Scalar>(model: &Model<S>, manifest: &DatasetManifest) -> Result<()> {
    let cfg = model.config();
    if cfg.joints != manifest.joints || cfg.classes != manifest.classes {
        return Err(Error::Schema(format!(
            "model expects {} joints and {} classes, dataset has {} and {}",
            cfg.joints, cfg.classes, manifest.joints, manifest.classes
        )));
    }
    Ok(())
}

/// Trains `model` on the dataset's training split.
///
/// Each epoch shuffles with a seeded stream, then for every sequence samples
/// clips, optionally rotates, translates, and takes one Adam step per batch.
/// `on_epoch` sees every log row as soon as it is produced.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    manifest: &DatasetManifest,
    recipe: &TrainRecipe,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<S>> {
    recipe.validate()?;
    check_compatible(&model, manifest)?;
    let (train_set, val_set) = split_for_training(manifest, recipe);
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let cfg = model.config().clone();
    let rotation = cfg.data_augmentation.then_some(recipe.rotation_degrees);
    let adam = AdamConfig {
        beta1: recipe.beta1,
        beta2: recipe.beta2,
        eps: recipe.adam_eps,
    };
    let mut state = OptimizerState::new();
    let mut log = Vec::with_capacity(recipe.epochs);
    let start = Instant::now();
    for epoch in 0..recipe.epochs {
        let lr = lr_at_epoch(recipe, epoch)?;
        let mut order = train_set.clone();
        order.shuffle(&mut sequence_rng(recipe.seed, epoch as u64, "epoch-order"));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in order.chunks(recipe.batch_size).enumerate() {
            let clips = batch
                .iter()
                .map(|s| {
                    let mut rng = sequence_rng(recipe.seed, epoch as u64, &s.id);
                    prepare_clip(s, cfg.frames, recipe.ref_joint, rotation, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let x: Tensor<S> = batch_to_tensor(&clips)?;
            let context = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
                other => other,
            };
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &x, BatchNormMode::Train).map_err(context)?;
            let loss = tape
                .smoothed_cross_entropy(out.logits, &labels, recipe.label_smoothing)
                .map_err(context)?;
            let loss_value = tape.value(loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, step {step}: loss is {loss_value}")));
            }
            let logits = tape.value(out.logits);
            correct += argmax_rows(logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += loss_value * batch.len() as f64;
            let mut grads_by_var = tape.backward(loss)?;
            let mut grads = IndexMap::new();
            for (name, var) in &out.params {
                if let Some(g) = grads_by_var.take(*var) {
                    grads.insert(name.clone(), g);
                }
            }
            adam_step(model.params_mut(), &grads, &mut state, lr, recipe.weight_decay, &adam)?;
            model.set_running_stats(out.bn_stats)?;
            model.set_step(model.step() + 1);
        }
        let val_acc = if val_set.is_empty() {
            None
        } else {
            Some(accuracy_of(&model, &val_set, recipe)?)
        };
        let row = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

fn accuracy_of<S: Scalar>(model: &Model<S>, seqs: &[&SkeletonSequence], recipe: &TrainRecipe) -> Result<f64> {
    let scores = score_sequences(model, seqs, 1, recipe.seed, recipe.ref_joint)?;
    let hits = seqs
        .iter()
        .zip(&scores)
        .filter(|(s, p)| argmax(p) == s.label)
        .count();
    Ok(hits as f64 / seqs.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k.max(1))
        .map(|r| argmax(&r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect()
}

/// Writes the log as CSV with columns
/// `epoch,lr,train_loss,train_acc,val_acc,wall_seconds`.
pub fn write_log_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row)?;
    }
    if log.is_empty() {
        w.write_record(["epoch", "lr", "train_loss", "train_acc", "val_acc", "wall_seconds"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::model::write_atomic(path.as_ref(), &bytes)
}
