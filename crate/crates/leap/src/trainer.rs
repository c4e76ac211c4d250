//! Epoch loop, evaluation, and dev-set early stopping.

use std::time::Instant;

use leap_core::data::{make_batches, schedule_mask, Document};
use leap_core::gumbel::RngNoise;
use leap_core::model::{DecisionRule, Inference, LeapModel};
use leap_core::tape::PROB_FLOOR;
use leap_core::train::{train_step, AdamState, TrainConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LeapError, Result};

/// Accuracy, mean classifier loss, and skip rate of a pass over a data set.
/// Wall-clock time is carried alongside but never serialized, so metric
/// files stay reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub skip_rate: f64,
    #[serde(skip)]
    pub seconds: f64,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mask_probability: f64,
    pub train: Metrics,
    pub dev: Metrics,
    pub best_so_far: bool,
}

/// Runs one epoch of minibatch training. Schedule training deletes words
/// from every document with this epoch's probability and requires the
/// skip pathway to be off.
pub fn train_epoch(
    model: &mut LeapModel,
    state: &mut AdamState,
    docs: &[Document],
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Metrics> {
    if cfg.schedule.enabled && model.skipping {
        return Err(LeapError::Invalid(
            "schedule training applies to the plain LSTM only".into(),
        ));
    }
    let start = Instant::now();
    let p = cfg.schedule.probability(epoch);
    let masked: Vec<Document>;
    let data = if p > 0.0 {
        masked = docs.iter().map(|d| schedule_mask(d, p, rng)).collect();
        &masked
    } else {
        docs
    };
    let batches = make_batches(data, cfg.batch_size, Some(rng));

    let (mut correct, mut documents, mut tokens) = (0usize, 0usize, 0usize);
    let (mut loss_sum, mut skip_sum) = (0.0, 0.0);
    for (i, batch) in batches.iter().enumerate() {
        let mut noise = RngNoise(&mut *rng);
        let stats = train_step(model, state, batch, cfg, &mut noise)
            .map_err(|source| LeapError::Training { batch: i, source })?;
        correct += stats.correct;
        documents += stats.documents;
        tokens += stats.tokens;
        loss_sum += stats.classifier_loss * stats.documents as f64;
        skip_sum += stats.skip_rate * stats.tokens as f64;
    }
    Ok(Metrics {
        accuracy: ratio(correct, documents),
        loss: loss_sum / documents.max(1) as f64,
        skip_rate: skip_sum / tokens.max(1) as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Hard-decision pass over a data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Executed LSTM updates summed over all documents.
    pub updates: usize,
    /// Non-padding tokens read.
    pub tokens: usize,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    /// Fraction of tokens that triggered a cell update.
    pub fn update_ratio(&self) -> f64 {
        ratio(self.updates, self.tokens)
    }
}

/// How hard skip decisions are taken at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule")]
pub enum InferenceRule {
    /// Skip when π_skip > π_keep.
    Argmax,
    /// Draw each decision from π. Document `i` uses stream `i` of a
    /// generator seeded with `seed`, so results do not depend on threads.
    Sample { seed: u64 },
}

impl Default for InferenceRule {
    fn default() -> Self {
        InferenceRule::Sample { seed: 0 }
    }
}

/// Reads document number `index` of a data set under `rule`.
pub fn infer_document(
    model: &LeapModel,
    tokens: &[u32],
    index: usize,
    rule: InferenceRule,
) -> Result<Inference> {
    match rule {
        InferenceRule::Argmax => Ok(model.infer(tokens)?),
        InferenceRule::Sample { seed } => {
            let mut rng = document_rng(seed, index);
            Ok(model.infer_with(tokens, DecisionRule::Sample(&mut rng as &mut dyn RngCore))?)
        }
    }
}

fn document_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs inference on every document, split across `threads` workers.
/// Results are gathered in document order and do not depend on the thread
/// count.
pub fn infer_all(
    model: &LeapModel,
    docs: &[Document],
    threads: usize,
    rule: InferenceRule,
) -> Result<Vec<Inference>> {
    let run = |offset: usize, part: &[Document]| {
        part.iter()
            .enumerate()
            .map(|(i, d)| infer_document(model, &d.tokens, offset + i, rule))
            .collect::<Result<Vec<_>>>()
    };
    let threads = threads.max(1).min(docs.len().max(1));
    if threads == 1 {
        return run(0, docs);
    }
    let chunk = docs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = docs
            .chunks(chunk)
            .enumerate()
            .map(|(k, part)| scope.spawn(move || run(k * chunk, part)))
            .collect();
        let mut out = Vec::with_capacity(docs.len());
        for h in handles {
            out.extend(h.join().expect("inference worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate(
    model: &LeapModel,
    docs: &[Document],
    threads: usize,
    rule: InferenceRule,
) -> Result<Evaluation> {
    let start = Instant::now();
    let results = infer_all(model, docs, threads, rule)?;
    let seconds = start.elapsed().as_secs_f64();
    let mut correct = 0;
    let mut loss = 0.0;
    let (mut skipped, mut updates, mut tokens) = (0, 0, 0);
    let mut predictions = Vec::with_capacity(docs.len());
    for (doc, inf) in docs.iter().zip(&results) {
        let pred = inf.predicted();
        if pred == doc.label {
            correct += 1;
        }
        loss -= inf.probs[doc.label].max(PROB_FLOOR).ln();
        skipped += inf.trace.skipped();
        updates += inf.updates;
        tokens += doc.len();
        predictions.push(pred);
    }
    Ok(Evaluation {
        metrics: Metrics {
            accuracy: ratio(correct, docs.len()),
            loss: loss / docs.len().max(1) as f64,
            skip_rate: ratio(skipped, tokens),
            seconds,
        },
        updates,
        tokens,
        predictions,
    })
}

/// Dev-accuracy bookkeeping for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    since_best: usize,
}

/// What one dev score means for checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    /// At least as good as every earlier score; this epoch becomes the
    /// checkpoint.
    pub selected: bool,
    /// Strictly better than every earlier score.
    pub improved: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, accuracy: f64) -> Observation {
        let obs = Observation {
            selected: accuracy >= self.best,
            improved: accuracy > self.best,
        };
        if obs.improved {
            self.best = accuracy;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        obs
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// True once `patience` epochs in a row brought no strict improvement;
    /// never true with patience 0.
    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.since_best >= self.patience
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: LeapModel,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains for up to `max_epochs`, evaluating on `dev` after each epoch and
/// keeping the parameters with the best dev accuracy; among equal
/// accuracies the latest epoch wins. Stops once `patience` consecutive
/// epochs bring no strict improvement (0 disables early stopping).
/// `on_epoch` sees every record as soon as it exists.
pub fn fit(
    model: LeapModel,
    train: &[Document],
    dev: &[Document],
    cfg: &TrainConfig,
    threads: usize,
    rule: InferenceRule,
    on_epoch: &mut dyn FnMut(&EpochRecord, &LeapModel),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(LeapError::Invalid("empty dev set".into()));
    }
    if train.is_empty() {
        return Err(LeapError::Invalid("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut state = AdamState::for_params(&model.params);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let train_metrics = train_epoch(&mut model, &mut state, train, cfg, epoch, &mut rng)?;
        let dev_eval = evaluate(&model, dev, threads, rule)?;
        let obs = stopper.observe(dev_eval.metrics.accuracy);
        if obs.selected {
            best = model.clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            mask_probability: cfg.schedule.probability(epoch),
            train: train_metrics,
            dev: dev_eval.metrics,
            best_so_far: obs.selected,
        };
        on_epoch(&record, &model);
        history.push(record);
        if stopper.should_stop() {
            break;
        }
    }
    Ok(FitOutcome {
        best,
        best_epoch,
        best_dev_accuracy: stopper.best(),
        history,
    })
}
