//! Training loop: truncated BPTT over each batch sequence, one Adam step per
//! window, evaluation and early stopping on held-out loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{argmax, features_matrix, targets, ModelError, ModelParams};
use crate::dataset::{DatasetSplit, LabeledSample};
use crate::nn::{adam_step, loss, softmax_rows, AdamMoments, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at epoch {epoch}, subject {subject}, batch {batch}, window {window}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        subject: usize,
        batch: usize,
        window: usize,
    },
    #[error("no training data")]
    NoData,
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub max_epochs: usize,
    /// Evaluations without a drop in test loss before stopping.
    pub patience: usize,
    /// Evaluate every this many epochs.
    pub eval_every: usize,
    /// Truncated-BPTT window in time steps.
    pub bptt_window: usize,
    /// When set, batches are visited in a per-epoch order drawn from this
    /// seed instead of in sequence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            max_epochs: 300,
            patience: 20,
            eval_every: 1,
            bptt_window: 100,
            shuffle_seed: None,
        }
    }
}

impl TrainingSchedule {
    fn validate(&self) -> Result<(), TrainError> {
        if self.eval_every == 0 {
            return Err(TrainError::Schedule("eval_every must be at least 1".into()));
        }
        if self.bptt_window == 0 {
            return Err(TrainError::Schedule("bptt_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the training history. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective (cross-entropy plus penalty) over the epoch's windows;
    /// at epoch 0 the evaluated training cross-entropy.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the evaluation with the highest test accuracy.
    pub model: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Epochs actually run.
    pub epochs: usize,
}

/// Cross-entropy and accuracy of a model over whole sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Evaluates each sequence from zero state and pools the results.
pub fn evaluate<'a>(
    model: &ModelParams,
    sequences: impl IntoIterator<Item = &'a [LabeledSample]>,
) -> Result<Evaluation, ModelError> {
    let (mut ce, mut correct, mut n) = (0.0, 0usize, 0usize);
    for seq in sequences {
        if seq.is_empty() {
            continue;
        }
        let pass = model.network.forward(&features_matrix(seq), &model.network.zero_states())?;
        let probs = softmax_rows(pass.logits());
        let t = targets(seq);
        let value = loss(&probs, &t, std::iter::empty::<&[f64]>(), 0.0)?;
        ce += value.data * seq.len() as f64;
        correct += t.iter().enumerate().filter(|&(i, &c)| argmax(probs.row(i)) == c).count();
        n += seq.len();
    }
    if n == 0 {
        return Ok(Evaluation { loss: f64::NAN, accuracy: f64::NAN, samples: 0 });
    }
    Ok(Evaluation {
        loss: ce / n as f64,
        accuracy: correct as f64 / n as f64,
        samples: n,
    })
}

fn train_sequences(splits: &[DatasetSplit]) -> impl Iterator<Item = &[LabeledSample]> {
    splits.iter().flat_map(|s| s.batches())
}

fn test_sequences(splits: &[DatasetSplit]) -> impl Iterator<Item = &[LabeledSample]> {
    splits.iter().map(|s| s.test.as_slice())
}

/// Trains `model` with Adam on every subject's batches and returns the
/// checkpoint with the best test accuracy.
///
/// Each batch is one time sequence: LSTM state starts at zero, carries over
/// between BPTT windows of the batch and is never differentiated across
/// windows.
pub fn train(
    model: ModelParams,
    splits: &[DatasetSplit],
    lambda: f64,
    lr: f64,
    schedule: &TrainingSchedule,
) -> Result<TrainOutcome, TrainError> {
    schedule.validate()?;
    if splits.iter().all(|s| s.train.is_empty()) {
        return Err(TrainError::NoData);
    }
    let mut model = model;
    let mut moments = AdamMoments::for_network(&model.network);
    let batches: Vec<(usize, usize, &[LabeledSample])> = splits
        .iter()
        .enumerate()
        .flat_map(|(s, split)| split.batches().enumerate().map(move |(b, x)| (s, b, x)))
        .collect();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut shuffler = schedule.shuffle_seed.map(ChaCha8Rng::seed_from_u64);

    let started = Instant::now();
    let initial_train = evaluate(&model, train_sequences(splits))?;
    let initial_test = evaluate(&model, test_sequences(splits))?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train.loss,
        train_accuracy: initial_train.accuracy,
        test_loss: initial_test.loss,
        test_accuracy: initial_test.accuracy,
        seconds: started.elapsed().as_secs_f64(),
    }];
    let mut best = (model.clone(), 0usize, initial_test.accuracy);
    let mut best_loss = initial_test.loss;
    let mut stale = 0usize;
    let mut epochs = 0usize;
    let mut last_objective = None;

    for epoch in 1..=schedule.max_epochs {
        if let Some(rng) = shuffler.as_mut() {
            order.shuffle(rng);
        }
        let (mut objective_sum, mut windows) = (0.0, 0usize);
        for &k in &order {
            let (subject, batch, seq) = batches[k];
            let mut state = model.network.zero_states();
            for (window, chunk) in seq.chunks(schedule.bptt_window).enumerate() {
                let fail = |what| TrainError::NonFinite { what, epoch, subject, batch, window };
                let g = model.network.gradients(&features_matrix(chunk), &targets(chunk), lambda, &state)?;
                let objective = g.loss.total();
                if !objective.is_finite() {
                    return Err(fail("loss"));
                }
                match adam_step(&mut model.network, &g.gradients, &mut moments, lr) {
                    Err(NnError::NonFiniteGradient { .. }) => return Err(fail("gradient")),
                    other => other?,
                }
                if !model.network.is_finite() {
                    return Err(fail("parameter"));
                }
                state = g.final_states;
                objective_sum += objective;
                windows += 1;
            }
        }
        epochs = epoch;
        let train_loss = objective_sum / windows as f64;
        last_objective = Some(train_loss);

        if epoch % schedule.eval_every != 0 && epoch != schedule.max_epochs {
            continue;
        }
        let tr = evaluate(&model, train_sequences(splits))?;
        let te = evaluate(&model, test_sequences(splits))?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy: tr.accuracy,
            test_loss: te.loss,
            test_accuracy: te.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4} acc {:.4}, test loss {:.4} acc {:.4}",
            tr.accuracy,
            te.loss,
            te.accuracy
        );
        if te.accuracy > best.2 || best.2.is_nan() {
            best = (model.clone(), epoch, te.accuracy);
        }
        if te.loss < best_loss || best_loss.is_nan() {
            best_loss = te.loss;
            stale = 0;
        } else {
            stale += 1;
            if schedule.patience > 0 && stale >= schedule.patience {
                log::info!("stopping at epoch {epoch}: no test-loss improvement in {stale} evaluations");
                break;
            }
        }
    }

    let (mut model, best_epoch, accuracy) = best;
    model.meta.epochs_run = epochs;
    model.meta.final_loss = last_objective;
    model.meta.test_accuracy = (!accuracy.is_nan()).then_some(accuracy);
    Ok(TrainOutcome { model, history, best_epoch, epochs })
}
