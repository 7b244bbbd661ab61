//! Data-directory workflows shared by the command line and the HTTP service:
//! split persistence, model loading, the train/refine stages and the
//! metrics file that records the latest pre/post feedback pair.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::corpus::{
    generate_synthetic_corpus_with, make_splits, Corpus, CorpusError, DatasetSplit, LabeledSong,
    SplitName, SplitSizes, SyntheticOptions,
};
use crate::evaluation::{
    evaluate, metrics_from_cm, ComparisonSection, ConfusionMatrix, EvalError, MetricsReport,
    TransformerClassifier, DEFAULT_THRESHOLD,
};
use crate::feedback::{
    append_ledger, build_corrective_set, collect_errors, read_ledger, refine, FeedbackError,
    ProtocolGuard, DEFAULT_FN_WEIGHT, DEFAULT_FP_WEIGHT,
};
use crate::model::{ModelConfig, ModelError, ParameterSet};
use crate::rating::{RatingError, ThresholdTable};
use crate::store::{write_atomic, DataDir};
use crate::tokenizer::{
    build_vocab, encode, TokenizerError, Vocabulary, DEFAULT_MAX_VOCAB, DEFAULT_MIN_FREQ,
};
use crate::training::{fine_tune, encode_examples, pretrain_lm, TrainError, TrainReport, TrainRunConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0} not found; run the earlier pipeline stage first")]
    Missing(PathBuf),
    #[error("split {0} is not present in the splits file")]
    NoSplit(&'static str),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] TokenizerError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("feedback: {0}")]
    Feedback(#[from] FeedbackError),
    #[error("rating: {0}")]
    Rating(#[from] RatingError),
    #[error("checkpoint vocabulary size {model} does not match vocab file size {vocab}")]
    VocabMismatch { model: usize, vocab: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Optional architecture overrides on top of the desk-scale defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub n_layers: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub dropout_rate: Option<f64>,
}

impl ModelOverrides {
    pub fn apply(&self, vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::desk_scale(vocab_size);
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.d_ff = self.d_ff.unwrap_or(c.d_ff);
        c.n_layers = self.n_layers.unwrap_or(c.n_layers);
        c.max_seq_len = self.max_seq_len.unwrap_or(c.max_seq_len);
        c.dropout_rate = self.dropout_rate.unwrap_or(c.dropout_rate);
        c
    }
}

/// Synthetic corpus and split sizes for the generation stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusPlan {
    pub n_explicit: usize,
    pub n_clean: usize,
    pub train: usize,
    pub eval_pre: usize,
    pub eval_post: usize,
    pub comparison: usize,
    pub marker_rate_explicit: f64,
    pub marker_rate_clean: f64,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        let opts = SyntheticOptions::new(110, 110, 0);
        CorpusPlan {
            n_explicit: 110,
            n_clean: 110,
            train: 100,
            eval_pre: 30,
            eval_post: 30,
            comparison: 50,
            marker_rate_explicit: opts.marker_rate_explicit,
            marker_rate_clean: opts.marker_rate_clean,
        }
    }
}

impl CorpusPlan {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes::from_totals(self.train, self.eval_pre, self.eval_post, self.comparison)
    }
}

/// Every tunable of the offline pipeline. Loaded from TOML by the command
/// line; all fields default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threshold: f64,
    pub max_vocab: usize,
    pub min_freq: usize,
    pub fp_weight: f64,
    pub fn_weight: f64,
    pub model: ModelOverrides,
    pub corpus: CorpusPlan,
    #[serde(default = "TrainRunConfig::pretrain")]
    pub pretrain: TrainRunConfig,
    #[serde(default = "TrainRunConfig::fine_tune")]
    pub train: TrainRunConfig,
    #[serde(default = "TrainRunConfig::refine")]
    pub refine: TrainRunConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            max_vocab: DEFAULT_MAX_VOCAB,
            min_freq: DEFAULT_MIN_FREQ,
            fp_weight: DEFAULT_FP_WEIGHT,
            fn_weight: DEFAULT_FN_WEIGHT,
            model: ModelOverrides::default(),
            corpus: CorpusPlan::default(),
            pretrain: TrainRunConfig::pretrain(),
            train: TrainRunConfig::fine_tune(),
            refine: TrainRunConfig::refine(),
        }
    }
}

impl PipelineConfig {
    /// Propagate one seed into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.refine.seed = seed;
        self
    }
}

/// One evaluated split, tagged with the snapshot that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub split: String,
    pub snapshot: String,
    pub cm: ConfusionMatrix,
    pub metrics: MetricsReport,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsFile {
    pub pre: Option<EvalRecord>,
    pub post: Option<EvalRecord>,
    pub comparison: Option<ComparisonSection>,
    pub last_run: Option<PathBuf>,
}

impl MetricsFile {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        match std::fs::read(path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(MetricsFile::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(self)?;
        write_atomic(path, json.as_bytes())?;
        Ok(())
    }
}

fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::Missing(path))
    }
}

/// Generate a planted-keyword corpus and its four protocol splits.
pub fn generate(data: &DataDir, plan: &CorpusPlan, seed: u64) -> Result<Vec<DatasetSplit>, PipelineError> {
    data.ensure()?;
    let mut opts = SyntheticOptions::new(plan.n_explicit, plan.n_clean, seed);
    opts.marker_rate_explicit = plan.marker_rate_explicit;
    opts.marker_rate_clean = plan.marker_rate_clean;
    let (songs, anns) = generate_synthetic_corpus_with(&opts);
    let corpus = Corpus::new(songs, anns)?;
    let splits = make_splits(&corpus, &plan.sizes(), seed)?;
    corpus.save(data.corpus())?;
    save_splits(data, &splits)?;
    Ok(splits)
}

pub fn save_splits(data: &DataDir, splits: &[DatasetSplit]) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(splits)?;
    write_atomic(&data.splits(), json.as_bytes())?;
    Ok(())
}

pub fn load_splits(data: &DataDir) -> Result<Vec<DatasetSplit>, PipelineError> {
    let bytes = std::fs::read(require(data.splits())?)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_corpus(data: &DataDir) -> Result<Corpus, PipelineError> {
    let outcome = crate::corpus::load_corpus(require(data.corpus())?, true)?;
    Ok(Corpus::from_outcome(outcome)?)
}

pub fn split_songs(
    corpus: &Corpus,
    splits: &[DatasetSplit],
    name: SplitName,
) -> Result<Vec<LabeledSong>, PipelineError> {
    let split = splits
        .iter()
        .find(|s| s.name == name)
        .ok_or(PipelineError::NoSplit(name.as_str()))?;
    Ok(corpus.select(&split.members)?)
}

/// Write the classifier checkpoint and its vocabulary; returns the hash.
pub fn save_model(data: &DataDir, model: &TransformerClassifier) -> Result<String, PipelineError> {
    data.ensure()?;
    model.vocab.save(data.vocab())?;
    Ok(checkpoint::save(data.model(), &model.config, &model.params)?)
}

pub fn load_model_from(ckpt: &Path, vocab: &Path) -> Result<(TransformerClassifier, String), PipelineError> {
    let (config, params, hash) = checkpoint::load(require(ckpt.to_path_buf())?)?;
    let vocab = Vocabulary::load(require(vocab.to_path_buf())?)?;
    if vocab.size() != config.vocab_size {
        return Err(PipelineError::VocabMismatch {
            model: config.vocab_size,
            vocab: vocab.size(),
        });
    }
    Ok((TransformerClassifier::new(config, params, vocab), hash))
}

pub fn load_model(data: &DataDir) -> Result<(TransformerClassifier, String), PipelineError> {
    load_model_from(&data.model(), &data.vocab())
}

/// The threshold table on disk, or the defaults when none was written.
pub fn load_thresholds(data: &DataDir) -> Result<ThresholdTable, PipelineError> {
    let path = data.thresholds();
    if path.exists() {
        Ok(ThresholdTable::load(&path)?)
    } else {
        Ok(ThresholdTable::default())
    }
}

/// Result of a stage that produced a new classifier.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub hash: String,
    pub report: TrainReport,
    pub run_dir: PathBuf,
}

/// Language-model pretraining on the training split's lyrics. Writes the
/// vocabulary and `pretrained.ckpt`.
pub fn pretrain_stage(data: &DataDir, cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let corpus = load_corpus(data)?;
    let splits = load_splits(data)?;
    let train = split_songs(&corpus, &splits, SplitName::Train)?;
    let vocab = build_vocab(train.iter().map(|s| &s.song), cfg.max_vocab, cfg.min_freq)?;
    let config = cfg.model.apply(vocab.size());
    let seqs: Vec<_> = train
        .iter()
        .map(|s| encode(&s.song.lyrics, &vocab, config.max_seq_len))
        .collect();
    let (params, mut report) = pretrain_lm(&seqs, &config, &cfg.pretrain)?;
    vocab.save(data.vocab())?;
    let hash = checkpoint::save(data.pretrained(), &config, &params)?;
    let run_dir = data.new_run_dir(cfg.pretrain.seed)?;
    report.save_run(&run_dir, &config, &params)?;
    Ok(StageOutcome { hash, report, run_dir })
}

/// Vocabulary and optional pretrained trunk for a fresh classifier.
fn training_start(
    data: &DataDir,
    cfg: &PipelineConfig,
    train: &[LabeledSong],
) -> Result<(Vocabulary, ModelConfig, Option<ParameterSet>), PipelineError> {
    if data.pretrained().exists() {
        let (model, _) = load_model_from(&data.pretrained(), &data.vocab())?;
        return Ok((model.vocab, model.config, Some(model.params)));
    }
    let vocab = build_vocab(train.iter().map(|s| &s.song), cfg.max_vocab, cfg.min_freq)?;
    let config = cfg.model.apply(vocab.size());
    Ok((vocab, config, None))
}

/// Fine-tune a classifier on the training split plus any replayed ledger
/// errors, starting from the pretrained trunk when one exists.
pub fn train_stage(data: &DataDir, cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let corpus = load_corpus(data)?;
    let splits = load_splits(data)?;
    let train = split_songs(&corpus, &splits, SplitName::Train)?;
    let ledger = read_ledger(&data.feedback_ledger())?;
    let corrective = build_corrective_set(&ledger, &train, &corpus, cfg.fp_weight, cfg.fn_weight)?;
    let (vocab, config, base) = training_start(data, cfg, &train)?;
    let songs: Vec<LabeledSong> = corrective.items().cloned().collect();
    let examples = encode_examples(&songs, &vocab, config.max_seq_len);
    let (params, mut report) = fine_tune(base.as_ref(), &examples, &config, &cfg.train)?;
    let model = TransformerClassifier::new(config, params, vocab);
    let hash = save_model(data, &model)?;
    let run_dir = data.new_run_dir(cfg.train.seed)?;
    report.save_run(&run_dir, &model.config, &model.params)?;
    record_run(data, &run_dir)?;
    Ok(StageOutcome { hash, report, run_dir })
}

fn record_run(data: &DataDir, run_dir: &Path) -> Result<(), PipelineError> {
    let mut m = MetricsFile::load(&data.metrics())?;
    m.last_run = Some(run_dir.to_path_buf());
    m.save(&data.metrics())
}

/// Evaluate the current model on one split.
pub fn eval_stage(
    data: &DataDir,
    split: SplitName,
    threshold: f64,
) -> Result<EvalRecord, PipelineError> {
    let (model, hash) = load_model(data)?;
    let corpus = load_corpus(data)?;
    let splits = load_splits(data)?;
    let songs = split_songs(&corpus, &splits, split)?;
    eval_record(&model, &hash, &songs, split, threshold)
}

pub fn eval_record(
    model: &TransformerClassifier,
    hash: &str,
    songs: &[LabeledSong],
    split: SplitName,
    threshold: f64,
) -> Result<EvalRecord, PipelineError> {
    let (cm, metrics) = evaluate(model, songs, threshold)?;
    Ok(EvalRecord {
        split: split.as_str().to_string(),
        snapshot: hash.to_string(),
        cm,
        metrics,
    })
}

#[derive(Debug, Clone)]
pub struct FeedbackOutcome {
    pub harvested: usize,
    pub pre: EvalRecord,
    pub post: EvalRecord,
    pub stage: StageOutcome,
}

/// Harvest the current model's errors on the pre-feedback split into the
/// ledger, then refine from the whole ledger.
pub fn feedback_stage(data: &DataDir, cfg: &PipelineConfig) -> Result<FeedbackOutcome, PipelineError> {
    let (model, _) = load_model(data)?;
    let corpus = load_corpus(data)?;
    let splits = load_splits(data)?;
    let eval_pre = split_songs(&corpus, &splits, SplitName::EvalPre)?;
    let records = collect_errors(&model, &eval_pre, cfg.threshold)?;
    append_ledger(&data.feedback_ledger(), &records)?;
    let mut out = refine_stage(data, cfg)?;
    out.harvested = records.len();
    Ok(out)
}

/// Continue training the current model on the training split plus the
/// weighted ledger replay, then evaluate on the untouched post-feedback
/// split. Writes the new checkpoint and the pre/post pair to `metrics.json`.
pub fn refine_stage(data: &DataDir, cfg: &PipelineConfig) -> Result<FeedbackOutcome, PipelineError> {
    let (model, hash) = load_model(data)?;
    let corpus = load_corpus(data)?;
    let splits = load_splits(data)?;
    let train = split_songs(&corpus, &splits, SplitName::Train)?;
    let eval_pre = split_songs(&corpus, &splits, SplitName::EvalPre)?;
    let eval_post = split_songs(&corpus, &splits, SplitName::EvalPost)?;
    let pre = eval_record(&model, &hash, &eval_pre, SplitName::EvalPre, cfg.threshold)?;

    let ledger = read_ledger(&data.feedback_ledger())?;
    let corrective = build_corrective_set(&ledger, &train, &corpus, cfg.fp_weight, cfg.fn_weight)?;
    let mut guard = ProtocolGuard::new();
    guard.mark_used(train.iter().map(|s| s.id().to_string()));
    guard.mark_used(eval_pre.iter().map(|s| s.id().to_string()));
    let mut outcome = refine(&model, &corrective, &cfg.refine, &eval_post, &guard, cfg.threshold)?;

    let new_hash = save_model(data, &outcome.model)?;
    let run_dir = data.new_run_dir(cfg.refine.seed)?;
    outcome
        .report
        .save_run(&run_dir, &outcome.model.config, &outcome.model.params)?;
    let post = EvalRecord {
        split: SplitName::EvalPost.as_str().to_string(),
        snapshot: new_hash.clone(),
        cm: outcome.post_cm,
        metrics: metrics_from_cm(&outcome.post_cm)?,
    };
    let mut m = MetricsFile::load(&data.metrics())?;
    m.pre = Some(pre.clone());
    m.post = Some(post.clone());
    m.last_run = Some(run_dir.clone());
    m.save(&data.metrics())?;
    Ok(FeedbackOutcome {
        harvested: 0,
        pre,
        post,
        stage: StageOutcome {
            hash: new_hash,
            report: outcome.report,
            run_dir,
        },
    })
}

