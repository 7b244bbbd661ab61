//! Losses, the AdamW optimizer, language-model pretraining and supervised
//! fine-tuning with validation-based early stopping.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::corpus::LabeledSong;
use crate::model::{
    backward_classify, backward_lm, forward_classify, forward_lm, ModelConfig, ModelError, Mode, ParamGroup,
    ParameterSet,
};
use crate::numerics::Matrix;
use crate::store::write_atomic;
use crate::tokenizer::{encode, TokenSequence, Vocabulary, PAD};

pub const PROB_CLAMP: f64 = 1e-12;
pub const PRETRAIN_LR: f64 = 1e-3;
pub const FINE_TUNE_LR: f64 = 1e-4;
pub const HEAD_ONLY_LR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("{label} has {available} training songs after the validation carve-out; need at least {needed}")]
    TooFewPerClass {
        label: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("training split is imbalanced ({explicit} explicit vs {non_explicit} non-explicit); set allow_imbalance to proceed")]
    Imbalanced { explicit: usize, non_explicit: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("gradient shapes do not match parameters")]
    GradientShape,
    #[error("invalid optimizer settings: {0}")]
    Hyperparameters(String),
    #[error("invalid run config: {0}")]
    RunConfig(String),
    #[error("length mismatch: {rows} distribution rows vs {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("training diverged at epoch {epoch}; last good parameters retained")]
    Diverged {
        epoch: usize,
        last_good: Box<(ParameterSet, TrainReport)>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary cross-entropy and its derivative with respect to the logit.
///
/// The probability is clamped to `[1e-12, 1 - 1e-12]` for the loss only; the
/// gradient is the exact `p - y`.
pub fn bce_loss(probability: f64, target: f64) -> (f64, f64) {
    let p = probability.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    (loss.max(0.0), probability - target)
}

/// Next-token targets for a sequence: position `i` predicts token `i + 1`,
/// the final position predicts PAD (ignored).
pub fn lm_targets(seq: &TokenSequence) -> Vec<u32> {
    let ids = seq.ids();
    let mut t: Vec<u32> = ids[1..].to_vec();
    t.push(PAD);
    t
}

/// Mean cross-entropy over non-PAD targets, and the gradient with respect to
/// the pre-softmax logits.
pub fn lm_loss(distributions: &Matrix, targets: &[u32]) -> Result<(f64, Matrix), TrainError> {
    if distributions.rows() != targets.len() {
        return Err(TrainError::LengthMismatch {
            rows: distributions.rows(),
            targets: targets.len(),
        });
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    let mut grad = Matrix::zeros(distributions.rows(), distributions.cols());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let t = t as usize;
        loss -= distributions[(i, t)].max(PROB_CLAMP).ln();
        for (g, &p) in grad.row_mut(i).iter_mut().zip(distributions.row(i)) {
            *g = p / n;
        }
        grad[(i, t)] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && [self.lr, self.eps, self.weight_decay].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(TrainError::Hyperparameters(format!("{self:?}")))
        }
    }
}

/// One AdamW update on flat slices at step `t` (already incremented, so
/// `t ≥ 1`):
///
/// ```text
/// m ← β1·m + (1−β1)·g
/// v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·( m/(1−β1ᵗ) / (sqrt(v/(1−β2ᵗ)) + eps) + λ·θ )
/// ```
pub fn adamw_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, h: &AdamW) {
    let t = t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * theta[i]);
    }
}

/// Which parameters an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateScope {
    All,
    HeadOnly,
}

impl UpdateScope {
    fn includes(self, group: ParamGroup) -> bool {
        self == UpdateScope::All || group == ParamGroup::Head
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub t: u64,
    pub hyper: AdamW,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, hyper: AdamW) -> Result<Self, TrainError> {
        hyper.validate()?;
        Ok(OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            hyper,
        })
    }
}

/// Apply one AdamW step. Gradients are checked first; a non-finite entry
/// aborts the step without touching parameters or state.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    scope: UpdateScope,
) -> Result<(), TrainError> {
    let grad_tensors = grads.named_tensors();
    let groups: Vec<ParamGroup> = params.named_tensors().iter().map(|(_, g, _)| *g).collect();
    if grad_tensors.len() != groups.len() {
        return Err(TrainError::GradientShape);
    }
    for (name, group, g) in &grad_tensors {
        if scope.includes(*group) && !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let t = state.t;
    let hyper = state.hyper;
    let thetas = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((theta, (_, _, g)), m), v), group) in thetas.into_iter().zip(&grad_tensors).zip(ms).zip(vs).zip(groups) {
        if !scope.includes(group) {
            continue;
        }
        if theta.shape() != g.shape() {
            return Err(TrainError::GradientShape);
        }
        adamw_update(theta.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, &hyper);
    }
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for m in grads.tensors_mut() {
            m.scale_assign(k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub validation_fraction: f64,
    pub patience: usize,
    pub seed: u64,
    pub freeze_trunk: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub allow_imbalance: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig::fine_tune()
    }
}

impl TrainRunConfig {
    pub fn fine_tune() -> Self {
        let adam = AdamW::default();
        TrainRunConfig {
            max_epochs: 40,
            batch_size: 8,
            lr: FINE_TUNE_LR,
            validation_fraction: 0.1,
            patience: 5,
            seed: 0,
            freeze_trunk: false,
            clip_norm: Some(1.0),
            allow_imbalance: false,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
        }
    }

    pub fn head_only() -> Self {
        TrainRunConfig {
            lr: HEAD_ONLY_LR,
            freeze_trunk: true,
            ..Self::fine_tune()
        }
    }

    pub fn pretrain() -> Self {
        TrainRunConfig {
            max_epochs: 10,
            lr: PRETRAIN_LR,
            ..Self::fine_tune()
        }
    }

    /// Continued training after feedback. Runs at the fine-tuning rate: with
    /// the base split already fit, a lower rate lets early stopping restore
    /// the unrefined weights before the replayed songs move.
    pub fn refine() -> Self {
        Self::fine_tune()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.patience < 1 {
            return Err(TrainError::RunConfig("patience must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::RunConfig("batch_size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(TrainError::RunConfig(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(TrainError::RunConfig(format!("clip_norm {c} must be positive")));
            }
        }
        self.adamw().validate()
    }

    fn scope(&self) -> UpdateScope {
        if self.freeze_trunk {
            UpdateScope::HeadOnly
        } else {
            UpdateScope::All
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Mean training loss of each optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Epoch with the lowest validation loss; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EpochStats> {
        self.best_epoch.and_then(|e| self.epochs.get(e))
    }

    /// Write `report.json` and `model.ckpt` into `dir`; records the
    /// checkpoint path in the report.
    pub fn save_run(
        &mut self,
        dir: &Path,
        config: &ModelConfig,
        params: &ParameterSet,
    ) -> Result<String, TrainError> {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join("model.ckpt");
        let hash = checkpoint::save(&ckpt, config, params)?;
        self.checkpoint = Some(ckpt);
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        write_atomic(&dir.join("report.json"), json.as_bytes())?;
        Ok(hash)
    }
}

/// A tokenized song with its binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub song_id: String,
    pub seq: TokenSequence,
    pub target: f64,
}

impl LabeledExample {
    pub fn is_explicit(&self) -> bool {
        self.target >= 0.5
    }
}

pub fn encode_examples(songs: &[LabeledSong], vocab: &Vocabulary, max_seq_len: usize) -> Vec<LabeledExample> {
    songs
        .iter()
        .map(|s| LabeledExample {
            song_id: s.id().to_string(),
            seq: encode(&s.song.lyrics, vocab, max_seq_len),
            target: s.label().target(),
        })
        .collect()
}

/// Stratified validation carve: from each class, `round(n·fraction)` items
/// (at least one) in seeded order.
fn carve_validation(
    items: &[LabeledExample],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for explicit in [true, false] {
        let mut class: Vec<&LabeledExample> = items.iter().filter(|e| e.is_explicit() == explicit).collect();
        class.shuffle(rng);
        let k = ((class.len() as f64 * fraction).round() as usize).max(1).min(class.len());
        val.extend(class[..k].iter().map(|e| (*e).clone()));
        train.extend(class[k..].iter().map(|e| (*e).clone()));
    }
    (train, val)
}

struct SampleResult {
    loss: f64,
    grads: ParameterSet,
}

fn sum_in_order(results: Vec<SampleResult>) -> (f64, ParameterSet) {
    let mut iter = results.into_iter();
    let first = iter.next().expect("non-empty batch");
    let mut loss = first.loss;
    let mut grads = first.grads;
    for r in iter {
        loss += r.loss;
        grads.add_scaled(&r.grads, 1.0);
    }
    (loss, grads)
}

/// Mean gradient over a batch. Samples run in parallel; results are reduced
/// in batch order so the sum is bit-reproducible.
fn batch_gradient<F>(batch_len: usize, per_sample: F) -> Result<(f64, ParameterSet), TrainError>
where
    F: Fn(usize) -> Result<SampleResult, TrainError> + Sync,
{
    let results: Vec<SampleResult> = (0..batch_len)
        .into_par_iter()
        .map(&per_sample)
        .collect::<Result<_, _>>()?;
    let (loss, mut grads) = sum_in_order(results);
    let n = batch_len as f64;
    for m in grads.tensors_mut() {
        m.scale_assign(1.0 / n);
    }
    Ok((loss / n, grads))
}

fn classification_sample(
    ex: &LabeledExample,
    params: &ParameterSet,
    config: &ModelConfig,
    dropout_seed: u64,
) -> Result<SampleResult, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let out = forward_classify(&ex.seq, params, config, &mut Mode::Train(&mut rng))?;
    let (loss, d_logit) = bce_loss(out.probability, ex.target);
    let grads = backward_classify(&out, params, d_logit)?;
    Ok(SampleResult { loss, grads })
}

/// Mean BCE and accuracy at threshold 0.5 in evaluation mode.
pub fn evaluate_loss(
    items: &[LabeledExample],
    params: &ParameterSet,
    config: &ModelConfig,
) -> Result<(f64, f64), TrainError> {
    let scored: Vec<(f64, bool)> = items
        .par_iter()
        .map(|ex| {
            let out = forward_classify(&ex.seq, params, config, &mut Mode::Eval)?;
            let correct = (out.probability >= 0.5) == ex.is_explicit();
            Ok((bce_loss(out.probability, ex.target).0, correct))
        })
        .collect::<Result<_, TrainError>>()?;
    let n = scored.len().max(1) as f64;
    let loss = scored.iter().map(|s| s.0).sum::<f64>() / n;
    let acc = scored.iter().filter(|s| s.1).count() as f64 / n;
    Ok((loss, acc))
}

fn class_counts(items: &[LabeledExample]) -> (usize, usize) {
    let e = items.iter().filter(|x| x.is_explicit()).count();
    (e, items.len() - e)
}

/// Supervised fine-tuning. `base` supplies pretrained weights (a fresh
/// classification head is appended); `None` trains from random init.
pub fn fine_tune(
    base: Option<&ParameterSet>,
    train: &[LabeledExample],
    config: &ModelConfig,
    run: &TrainRunConfig,
) -> Result<(ParameterSet, TrainReport), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let init = match base {
        Some(p) => {
            p.check_config(config)?;
            let mut p = p.clone();
            p.reset_head(&mut rng);
            p
        }
        None => ParameterSet::init(config, &mut rng)?,
    };
    continue_training(init, train, &[], config, run)
}

/// Train a classifier starting from `init` as-is. `replay` items always stay
/// in the training portion; the validation set is carved from `train` only.
pub fn continue_training(
    init: ParameterSet,
    train: &[LabeledExample],
    replay: &[LabeledExample],
    config: &ModelConfig,
    run: &TrainRunConfig,
) -> Result<(ParameterSet, TrainReport), TrainError> {
    run.validate()?;
    init.check_config(config)?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (e, c) = class_counts(train);
    if !run.allow_imbalance && e.abs_diff(c) > 1 {
        return Err(TrainError::Imbalanced {
            explicit: e,
            non_explicit: c,
        });
    }
    // Separate stream so the carve does not depend on whether init was drawn.
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x005e_ed0f_7a11);
    let (mut fit, val) = carve_validation(train, run.validation_fraction, &mut rng);
    let (fe, fc) = class_counts(&fit);
    for (label, available) in [("explicit", fe), ("non_explicit", fc)] {
        if available < 2 {
            return Err(TrainError::TooFewPerClass {
                label,
                needed: 2,
                available,
            });
        }
    }
    fit.extend(replay.iter().cloned());

    let mut params = init;
    let mut report = TrainReport::default();
    if run.max_epochs == 0 {
        return Ok((params, report));
    }
    let mut state = OptimizerState::new(&params, run.adamw())?;
    let mut best: Option<(f64, ParameterSet)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..fit.len()).collect();

    for epoch in 0..run.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(run.batch_size) {
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let (loss, mut grads) = batch_gradient(chunk.len(), |i| {
                classification_sample(&fit[chunk[i]], &params, config, seeds[i])
            })?;
            if let Some(c) = run.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adamw_step(&mut params, &grads, &mut state, run.scope())?;
            epoch_loss += loss * chunk.len() as f64;
            report.step_losses.push(loss);
        }
        let (val_loss, val_accuracy) = evaluate_loss(&val, &params, config)?;
        report.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / fit.len() as f64,
            val_loss,
            val_accuracy,
        });
        if !val_loss.is_finite() {
            return Err(diverged(epoch, best, report));
        }
        tracing::debug!(epoch, val_loss, val_accuracy, "epoch done");
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= run.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, report))
}

fn diverged(epoch: usize, best: Option<(f64, ParameterSet)>, mut report: TrainReport) -> TrainError {
    match best {
        Some((_, p)) => TrainError::Diverged {
            epoch,
            last_good: Box::new((p, report)),
        },
        None => {
            report.best_epoch = None;
            TrainError::NonFiniteGradient(format!("validation loss at epoch {epoch}"))
        }
    }
}

fn lm_sample(
    seq: &TokenSequence,
    params: &ParameterSet,
    config: &ModelConfig,
    mode_seed: Option<u64>,
) -> Result<SampleResult, TrainError> {
    let out = match mode_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            forward_lm(seq, params, config, &mut Mode::Train(&mut rng))?
        }
        None => forward_lm(seq, params, config, &mut Mode::Eval)?,
    };
    let (loss, d_logits) = lm_loss(&out.distributions, &lm_targets(seq))?;
    let grads = backward_lm(&out, params, &d_logits)?;
    Ok(SampleResult { loss, grads })
}

fn lm_eval(seqs: &[TokenSequence], params: &ParameterSet, config: &ModelConfig) -> Result<(f64, f64), TrainError> {
    let per: Vec<(f64, usize, usize)> = seqs
        .par_iter()
        .map(|seq| {
            let out = forward_lm(seq, params, config, &mut Mode::Eval)?;
            let targets = lm_targets(seq);
            let (loss, _) = lm_loss(&out.distributions, &targets)?;
            let mut hits = 0;
            let mut n = 0;
            for (i, &t) in targets.iter().enumerate() {
                if t == PAD {
                    continue;
                }
                n += 1;
                let row = out.distributions.row(i);
                let argmax = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                hits += usize::from(argmax == t as usize);
            }
            Ok((loss, hits, n))
        })
        .collect::<Result<_, TrainError>>()?;
    let k = per.len().max(1) as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / k;
    let hits: usize = per.iter().map(|p| p.1).sum();
    let n: usize = per.iter().map(|p| p.2).sum();
    Ok((loss, if n == 0 { 0.0 } else { hits as f64 / n as f64 }))
}

/// Language-model pretraining of the trunk on unlabeled token sequences.
/// `val_accuracy` in the report is next-token top-1 accuracy. With a single
/// sequence the validation set is the training set.
pub fn pretrain_lm(
    corpus: &[TokenSequence],
    config: &ModelConfig,
    run: &TrainRunConfig,
) -> Result<(ParameterSet, TrainReport), TrainError> {
    run.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut params = ParameterSet::init(config, &mut rng)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((corpus.len() as f64 * run.validation_fraction).round() as usize).min(corpus.len() - 1);
    let val: Vec<TokenSequence> = if n_val == 0 {
        corpus.to_vec()
    } else {
        order[..n_val].iter().map(|&i| corpus[i].clone()).collect()
    };
    let fit: Vec<TokenSequence> = order[n_val..].iter().map(|&i| corpus[i].clone()).collect();

    let mut report = TrainReport::default();
    if run.max_epochs == 0 {
        return Ok((params, report));
    }
    let mut state = OptimizerState::new(&params, run.adamw())?;
    let mut best: Option<(f64, ParameterSet)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 0..run.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(run.batch_size) {
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let (loss, mut grads) =
                batch_gradient(chunk.len(), |i| lm_sample(&fit[chunk[i]], &params, config, Some(seeds[i])))?;
            if let Some(c) = run.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adamw_step(&mut params, &grads, &mut state, UpdateScope::All)?;
            epoch_loss += loss * chunk.len() as f64;
            report.step_losses.push(loss);
        }
        let (val_loss, val_accuracy) = lm_eval(&val, &params, config)?;
        report.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / fit.len() as f64,
            val_loss,
            val_accuracy,
        });
        if !val_loss.is_finite() {
            return Err(diverged(epoch, best, report));
        }
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= run.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok((best.expect("at least one epoch ran").1, report))
}

/// Gradient of the LM loss for one sequence, dropout disabled.
pub fn lm_gradient(
    seq: &TokenSequence,
    params: &ParameterSet,
    config: &ModelConfig,
) -> Result<(f64, ParameterSet), TrainError> {
    let r = lm_sample(seq, params, config, None)?;
    Ok((r.loss, r.grads))
}

/// Gradient of the BCE loss for one example, dropout disabled.
pub fn classification_gradient(
    ex: &LabeledExample,
    params: &ParameterSet,
    config: &ModelConfig,
) -> Result<(f64, ParameterSet), TrainError> {
    let out = forward_classify(&ex.seq, params, config, &mut Mode::Eval)?;
    let (loss, d) = bce_loss(out.probability, ex.target);
    Ok((loss, backward_classify(&out, params, d)?))
}
