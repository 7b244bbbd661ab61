//! Feedback-driven refinement: harvest misclassifications, replay the
//! corrected songs with per-kind weights, continue training, and
//! re-evaluate on songs the model has never seen.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Label, LabeledSong, Phrase};
use crate::evaluation::{
    confusion_from_predictions, metrics_from_cm, predict_all, Classifier, ConfusionMatrix, EvalError, MetricsReport,
    TransformerClassifier,
};
use crate::store::append_json_line;
use crate::training::{continue_training, encode_examples, TrainError, TrainReport, TrainRunConfig};

pub const DEFAULT_FP_WEIGHT: f64 = 4.0;
pub const DEFAULT_FN_WEIGHT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("invalid feedback record for {song_id}: {reason}")]
    InvalidRecord { song_id: String, reason: String },
    #[error("weight {0} must be at least 1")]
    Weight(f64),
    #[error("feedback song {0} is not in the corpus")]
    UnknownSong(String),
    #[error("fresh evaluation split reuses {} previously seen song(s): {}", .0.len(), .0.join(", "))]
    Disjointness(Vec<String>),
    #[error("fresh evaluation split is empty")]
    EmptyEval,
    #[error("ledger line {line}: {reason}")]
    Ledger { line: usize, reason: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    FalsePositive,
    FalseNegative,
}

impl ErrorKind {
    /// `None` when the prediction was correct.
    pub fn classify(predicted: Label, expert: Label) -> Option<ErrorKind> {
        match (predicted.is_explicit(), expert.is_explicit()) {
            (true, false) => Some(ErrorKind::FalsePositive),
            (false, true) => Some(ErrorKind::FalseNegative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    AutoHarvest,
    Moderator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub song_id: String,
    pub predicted: Label,
    pub expert: Label,
    pub error_kind: ErrorKind,
    pub corrective_phrases: Vec<Phrase>,
    pub weight: f64,
    pub source: FeedbackSource,
}

impl FeedbackRecord {
    pub fn new(
        song_id: impl Into<String>,
        predicted: Label,
        expert: Label,
        corrective_phrases: Vec<Phrase>,
        weight: f64,
        source: FeedbackSource,
    ) -> Result<Self, FeedbackError> {
        let song_id = song_id.into();
        let error_kind = ErrorKind::classify(predicted, expert).ok_or_else(|| FeedbackError::InvalidRecord {
            song_id: song_id.clone(),
            reason: "predicted label equals expert label".into(),
        })?;
        let r = FeedbackRecord {
            song_id,
            predicted,
            expert,
            error_kind,
            corrective_phrases,
            weight,
            source,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        let bad = |reason: &str| FeedbackError::InvalidRecord {
            song_id: self.song_id.clone(),
            reason: reason.into(),
        };
        match ErrorKind::classify(self.predicted, self.expert) {
            None => return Err(bad("predicted label equals expert label")),
            Some(k) if k != self.error_kind => return Err(bad("error_kind disagrees with labels")),
            _ => {}
        }
        if !(self.weight >= 1.0 && self.weight.is_finite()) {
            return Err(bad("weight must be a finite value of at least 1"));
        }
        Ok(())
    }
}

/// One record per misclassified song in `split`.
pub fn collect_errors<C: Classifier + ?Sized>(
    model: &C,
    split: &[LabeledSong],
    threshold: f64,
) -> Result<Vec<FeedbackRecord>, FeedbackError> {
    let preds = predict_all(model, split)?;
    let mut out = Vec::new();
    for (song, pred) in split.iter().zip(&preds) {
        let predicted = pred.predicted(threshold);
        if predicted != pred.expert {
            out.push(FeedbackRecord::new(
                song.id(),
                predicted,
                pred.expert,
                song.annotation.phrases.clone(),
                1.0,
                FeedbackSource::AutoHarvest,
            )?);
        }
    }
    Ok(out)
}

/// Training material for refinement. Replayed songs always stay in the
/// training portion; validation is carved from `base` alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrectiveSet {
    pub base: Vec<LabeledSong>,
    pub replay: Vec<LabeledSong>,
}

impl CorrectiveSet {
    /// The full multiset of training items.
    pub fn items(&self) -> impl Iterator<Item = &LabeledSong> {
        self.base.iter().chain(&self.replay)
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.items().map(|s| s.id().to_string()).collect()
    }

    pub fn replay_ids(&self) -> BTreeSet<String> {
        self.replay.iter().map(|s| s.id().to_string()).collect()
    }
}

/// Duplication count of one record.
pub fn replay_count(record: &FeedbackRecord, fp_weight: f64, fn_weight: f64) -> usize {
    let k = match record.error_kind {
        ErrorKind::FalsePositive => fp_weight,
        ErrorKind::FalseNegative => fn_weight,
    };
    (k * record.weight).round() as usize
}

pub fn build_corrective_set(
    records: &[FeedbackRecord],
    base_train: &[LabeledSong],
    corpus: &Corpus,
    fp_weight: f64,
    fn_weight: f64,
) -> Result<CorrectiveSet, FeedbackError> {
    for w in [fp_weight, fn_weight] {
        if !(w >= 1.0 && w.is_finite()) {
            return Err(FeedbackError::Weight(w));
        }
    }
    let mut replay = Vec::new();
    for r in records {
        r.validate()?;
        let found = corpus.get(&r.song_id).ok_or_else(|| FeedbackError::UnknownSong(r.song_id.clone()))?;
        let mut item = found.clone();
        item.annotation.label = r.expert;
        for _ in 0..replay_count(r, fp_weight, fn_weight) {
            replay.push(item.clone());
        }
    }
    Ok(CorrectiveSet {
        base: base_train.to_vec(),
        replay,
    })
}

/// Ids that a fresh evaluation split must avoid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProtocolGuard {
    used: BTreeSet<String>,
}

impl ProtocolGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mark_used<I, S>(&mut self, ids: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.used.extend(ids.into_iter().map(Into::into));
    }

    pub fn used(&self) -> &BTreeSet<String> {
        &self.used
    }

    /// Reject any song of `split` already used, listing the offenders.
    pub fn check_fresh(&self, split: &[LabeledSong]) -> Result<(), FeedbackError> {
        let clash: BTreeSet<String> = split
            .iter()
            .map(|s| s.id().to_string())
            .filter(|id| self.used.contains(id))
            .collect();
        if clash.is_empty() {
            Ok(())
        } else {
            Err(FeedbackError::Disjointness(clash.into_iter().collect()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub model: TransformerClassifier,
    pub report: TrainReport,
    pub post_cm: ConfusionMatrix,
    pub post_metrics: MetricsReport,
}

/// Continue training `model` on `corrective`, then evaluate on
/// `fresh_eval`. The fresh split must share no song with `guard` or with the
/// corrective set; any overlap is a hard error raised before training.
pub fn refine(
    model: &TransformerClassifier,
    corrective: &CorrectiveSet,
    run: &TrainRunConfig,
    fresh_eval: &[LabeledSong],
    guard: &ProtocolGuard,
    threshold: f64,
) -> Result<RefineOutcome, FeedbackError> {
    if fresh_eval.is_empty() {
        return Err(FeedbackError::EmptyEval);
    }
    let mut all = guard.clone();
    all.mark_used(corrective.ids());
    all.check_fresh(fresh_eval)?;

    let max_len = model.config.max_seq_len;
    let base = encode_examples(&corrective.base, &model.vocab, max_len);
    let replay = encode_examples(&corrective.replay, &model.vocab, max_len);
    let (params, report) = continue_training(model.params.clone(), &base, &replay, &model.config, run)?;
    let refined = TransformerClassifier::new(model.config, params, model.vocab.clone());
    let preds = predict_all(&refined, fresh_eval)?;
    let post_cm = confusion_from_predictions(&preds, threshold);
    let post_metrics = metrics_from_cm(&post_cm)?;
    Ok(RefineOutcome {
        model: refined,
        report,
        post_cm,
        post_metrics,
    })
}

pub fn append_ledger(path: &Path, records: &[FeedbackRecord]) -> Result<(), FeedbackError> {
    for r in records {
        append_json_line(path, r)?;
    }
    Ok(())
}

/// Read and validate every ledger entry; a missing file is an empty ledger.
pub fn read_ledger(path: &Path) -> Result<Vec<FeedbackRecord>, FeedbackError> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: FeedbackRecord = serde_json::from_str(&line).map_err(|e| FeedbackError::Ledger {
            line: i + 1,
            reason: e.to_string(),
        })?;
        r.validate().map_err(|e| FeedbackError::Ledger {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}
