//! Message-level anomaly detection on top of the trained encoder.
//!
//! Unsupervised: a message is anomalous when too many of its tokens fall
//! outside the model's top-ε predictions. Supervised: the vocabulary head is
//! swapped for a two-way classifier on the `CLS` row and the whole network is
//! fine-tuned on labels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::extraction::{constant_flags, frame_records};
use crate::ingest::{AnomalyLabel, LogRecord};
use crate::model::{
    init_parameters, run_batches, train_with, Encoder, Layout, ModelConfig, ModelState, TrainOptions,
};
use crate::numerics::{softmax, Matrix, OptimizerState, ParameterSet, Tape};
use crate::tokenizer::{compute_frame_length, TokenSequence, Tokenizer, Vocabulary};

pub const DEFAULT_DELTA: f64 = 0.5;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Thresholds, split and epoch counts of the detection studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnomalyConfig {
    pub epsilon: usize,
    pub delta: f64,
    pub train_fraction: f64,
    pub epochs_unsupervised: usize,
    pub epochs_finetune: usize,
    pub seed: u64,
}

impl AnomalyConfig {
    pub fn new(epsilon: usize) -> Self {
        AnomalyConfig {
            epsilon,
            delta: DEFAULT_DELTA,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            epochs_unsupervised: 3,
            epochs_finetune: 2,
            seed: crate::model::DEFAULT_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon == 0 {
            return Err(Error::Validation("epsilon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Validation(format!("delta {} is outside [0, 1]", self.delta)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train fraction {} is outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Scores with anomaly as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion-matrix metrics; zero denominators give 0.
pub fn compute_metrics(verdicts: &[AnomalyLabel], labels: &[AnomalyLabel]) -> Result<DetectionMetrics> {
    if verdicts.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} verdicts for {} labels",
            verdicts.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (v, l) in verdicts.iter().zip(labels) {
        match (v.is_anomaly(), l.is_anomaly()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DetectionMetrics {
        accuracy: ratio(tp + tn, verdicts.len()),
        precision,
        recall,
        f1,
    })
}

/// Share of the message's tokens that are not constant under top-ε.
pub fn token_anomaly_fraction(message: &TokenSequence, state: &ModelState, epsilon: usize) -> Result<f64> {
    if message.tokens.is_empty() {
        log::warn!("message {} has no tokens; scoring it 0", message.message_index);
        return Ok(0.0);
    }
    let flags = constant_flags(message, state, epsilon)?;
    let variable = flags.iter().filter(|&&c| !c).count();
    Ok(variable as f64 / flags.len() as f64)
}

/// Anomaly iff `fraction > delta`.
pub fn unsupervised_classify(fraction: f64, delta: f64) -> AnomalyLabel {
    if fraction > delta {
        AnomalyLabel::Anomaly
    } else {
        AnomalyLabel::Normal
    }
}

/// Metrics at each threshold in `deltas`.
pub fn delta_sweep(
    fractions: &[f64],
    labels: &[AnomalyLabel],
    deltas: &[f64],
) -> Result<Vec<(f64, DetectionMetrics)>> {
    deltas
        .iter()
        .map(|&d| {
            let verdicts: Vec<_> = fractions.iter().map(|&f| unsupervised_classify(f, d)).collect();
            Ok((d, compute_metrics(&verdicts, labels)?))
        })
        .collect()
}

/// The thresholds 0.1, 0.2, …, 0.9.
pub fn default_sweep() -> Vec<f64> {
    (1..10).map(|i| i as f64 / 10.0).collect()
}

/// Tokenized, framed train and test portions of a positional split.
#[derive(Debug, Clone)]
pub struct Split {
    pub vocab: Vocabulary,
    pub frame_length: usize,
    /// Index of the first test record.
    pub test_offset: usize,
    pub train: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

/// First `train_fraction` of the records trains, the rest tests. The
/// vocabulary and frame length come from the training part only.
pub fn split_records(records: &[LogRecord], tokenizer: &Tokenizer, train_fraction: f64) -> Result<Split> {
    let cut = ((records.len() as f64 * train_fraction) + 1e-9).floor() as usize;
    if cut == 0 || cut >= records.len() {
        return Err(Error::Validation(format!(
            "a {train_fraction} split of {} records leaves an empty side",
            records.len()
        )));
    }
    let (train_recs, test_recs) = records.split_at(cut);
    let tokens: Vec<Vec<String>> = train_recs.iter().map(|r| tokenizer.tokenize(&r.content)).collect();
    let vocab = Vocabulary::build(&tokens)?;
    let frame_length = compute_frame_length(&tokens)? + 1;
    let train = frame_records(train_recs, tokenizer, &vocab, frame_length);
    let test = frame_records(test_recs, tokenizer, &vocab, frame_length);
    Ok(Split {
        vocab,
        frame_length,
        test_offset: cut,
        train,
        test,
    })
}

fn labels_of(records: &[LogRecord]) -> Result<Vec<AnomalyLabel>> {
    records
        .iter()
        .map(|r| {
            r.anomaly_label
                .ok_or_else(|| Error::Validation(format!("line {} has no anomaly label", r.line_id)))
        })
        .collect()
}

/// Per-test-message scores and verdicts of a study.
#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub metrics: DetectionMetrics,
    pub test_offset: usize,
    /// Anomalous-token fraction, or anomaly probability when supervised.
    pub scores: Vec<f64>,
    pub verdicts: Vec<AnomalyLabel>,
    pub labels: Vec<AnomalyLabel>,
}

fn pretrain(split: &Split, arch: &ModelConfig, config: &AnomalyConfig) -> Result<ModelState> {
    let model_config = ModelConfig {
        vocab_size: split.vocab.len(),
        frame_length: split.frame_length,
        epochs: config.epochs_unsupervised,
        seed: config.seed,
        ..*arch
    };
    Ok(train_with(&split.train, &model_config, &TrainOptions::default())?.state)
}

/// Self-supervised training on the leading portion, then top-ε scoring of
/// the trailing portion. Labels are only used for the metrics.
pub fn run_unsupervised_study(
    records: &[LogRecord],
    tokenizer: &Tokenizer,
    arch: &ModelConfig,
    config: &AnomalyConfig,
) -> Result<StudyOutcome> {
    config.validate()?;
    let labels_all = labels_of(records)?;
    let split = split_records(records, tokenizer, config.train_fraction)?;
    let state = pretrain(&split, arch, config)?;
    let scores = split
        .test
        .par_iter()
        .map(|m| token_anomaly_fraction(m, &state, config.epsilon))
        .collect::<Result<Vec<_>>>()?;
    let verdicts: Vec<_> = scores.iter().map(|&f| unsupervised_classify(f, config.delta)).collect();
    let labels = labels_all[split.test_offset..].to_vec();
    Ok(StudyOutcome {
        metrics: compute_metrics(&verdicts, &labels)?,
        test_offset: split.test_offset,
        scores,
        verdicts,
        labels,
    })
}

const CLASSIFIER_WEIGHT: &str = "classifier.weight";
const CLASSIFIER_BIAS: &str = "classifier.bias";

/// Encoder with a two-way output layer in place of the vocabulary head.
#[derive(Debug, Clone)]
pub struct ClassifierState {
    config: ModelConfig,
    params: ParameterSet<f32>,
    positions: Matrix<f32>,
}

impl ClassifierState {
    /// Copies the encoder of `state` and attaches a fresh `d×2` layer.
    pub fn from_pretrained(state: &ModelState, seed: u64) -> Result<Self> {
        let config = *state.config();
        let mut params = ParameterSet::new();
        for p in state.params().iter() {
            if !p.name.starts_with("head.") {
                params.insert(p.name.clone(), p.value.clone())?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = init_parameters(
            &[
                (CLASSIFIER_WEIGHT.to_string(), (config.d, 2)),
                (CLASSIFIER_BIAS.to_string(), (1, 2)),
            ],
            &mut rng,
        )?;
        for p in head.iter() {
            params.insert(p.name.clone(), p.value.clone())?;
        }
        Ok(ClassifierState {
            config,
            params,
            positions: state.positions().clone(),
        })
    }

    pub fn params(&self) -> &ParameterSet<f32> {
        &self.params
    }

    fn head_indices(params: &ParameterSet<f32>) -> (usize, usize) {
        (
            params.index_of(CLASSIFIER_WEIGHT).expect("classifier weight"),
            params.index_of(CLASSIFIER_BIAS).expect("classifier bias"),
        )
    }

    /// `[P(normal), P(anomaly)]` for the unmasked frame.
    pub fn predict_proba(&self, message: &TokenSequence) -> Result<[f32; 2]> {
        let layout = Layout::resolve(&self.params, &self.config)?;
        let enc = Encoder {
            params: &self.params,
            layout: &layout,
            positions: &self.positions,
            config: &self.config,
        };
        let (w, b) = Self::head_indices(&self.params);
        let mut tape = Tape::new();
        let cls = enc.cls(&mut tape, &message.framed_ids)?;
        let logits = enc.head_logits(&mut tape, cls, w, b)?;
        let p = softmax(tape.value(logits).as_slice());
        Ok([p[0], p[1]])
    }

    pub fn predict(&self, message: &TokenSequence) -> Result<AnomalyLabel> {
        let [normal, anomaly] = self.predict_proba(message)?;
        Ok(if anomaly > normal {
            AnomalyLabel::Anomaly
        } else {
            AnomalyLabel::Normal
        })
    }
}

fn class_index(label: AnomalyLabel) -> usize {
    usize::from(label.is_anomaly())
}

/// Fine-tunes every weight with cross-entropy on the binary labels.
pub fn fine_tune_supervised(
    state: &ModelState,
    train: &[(TokenSequence, AnomalyLabel)],
    epochs: usize,
    seed: u64,
) -> Result<ClassifierState> {
    let anomalies = train.iter().filter(|(_, l)| l.is_anomaly()).count();
    if anomalies == 0 || anomalies == train.len() {
        log::warn!("fine-tuning set contains a single class");
    }
    let mut clf = ClassifierState::from_pretrained(state, seed)?;
    let config = clf.config;
    let positions = clf.positions.clone();
    let layout = Layout::resolve(&clf.params, &config)?;
    let (w, b) = ClassifierState::head_indices(&clf.params);
    let mut optimizer = OptimizerState::new(&clf.params, Default::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let jobs: Vec<&(TokenSequence, AnomalyLabel)> = order.iter().map(|&i| &train[i]).collect();
        let mean = run_batches(&mut clf.params, &mut optimizer, &jobs, config.batch_size, |p, job| {
            let enc = Encoder {
                params: p,
                layout: &layout,
                positions: &positions,
                config: &config,
            };
            let mut tape = Tape::new();
            let cls = enc.cls(&mut tape, &job.0.framed_ids)?;
            let logits = enc.head_logits(&mut tape, cls, w, b)?;
            let loss = tape.cross_entropy(logits, class_index(job.1))?;
            let value = tape.value(loss).get(0, 0);
            Ok((value, tape.gradients(loss)?))
        })?;
        log::info!("fine-tune epoch {}/{epochs}: mean loss {mean:.4}", epoch + 1);
    }
    Ok(clf)
}

/// Self-supervised pretraining and label fine-tuning on the leading
/// portion, then classification of the trailing portion.
pub fn run_supervised_study(
    records: &[LogRecord],
    tokenizer: &Tokenizer,
    arch: &ModelConfig,
    config: &AnomalyConfig,
) -> Result<StudyOutcome> {
    config.validate()?;
    let labels_all = labels_of(records)?;
    let split = split_records(records, tokenizer, config.train_fraction)?;
    let state = pretrain(&split, arch, config)?;
    let labeled: Vec<(TokenSequence, AnomalyLabel)> = split
        .train
        .iter()
        .cloned()
        .zip(labels_all[..split.test_offset].iter().copied())
        .collect();
    let clf = fine_tune_supervised(&state, &labeled, config.epochs_finetune, config.seed)?;
    let probs = split
        .test
        .par_iter()
        .map(|m| clf.predict_proba(m))
        .collect::<Result<Vec<_>>>()?;
    let verdicts: Vec<_> = probs
        .iter()
        .map(|p| {
            if p[1] > p[0] {
                AnomalyLabel::Anomaly
            } else {
                AnomalyLabel::Normal
            }
        })
        .collect();
    let labels = labels_all[split.test_offset..].to_vec();
    Ok(StudyOutcome {
        metrics: compute_metrics(&verdicts, &labels)?,
        test_offset: split.test_offset,
        scores: probs.iter().map(|p| p[1] as f64).collect(),
        verdicts,
        labels,
    })
}

/// Writes `line_id,fraction,verdict,label` for the test portion.
pub fn write_verdicts_csv(path: impl AsRef<Path>, records: &[LogRecord], outcome: &StudyOutcome) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["line_id", "fraction", "verdict", "label"])?;
    for (i, score) in outcome.scores.iter().enumerate() {
        let record = &records[outcome.test_offset + i];
        w.write_record([
            record.line_id.to_string(),
            format!("{score:.6}"),
            outcome.verdicts[i].as_str().to_string(),
            outcome.labels[i].as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
