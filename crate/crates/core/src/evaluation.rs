//! Confusion matrices, the four headline metrics, paired model comparison
//! with an exact one-sided McNemar test, and report rendering.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, LabeledSong};
use crate::model::{forward_classify, ModelConfig, Mode, ParameterSet};
use crate::store::write_atomic;
use crate::tokenizer::{encode, Vocabulary};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.05;

pub type ScoreError = Box<dyn std::error::Error + Send + Sync>;

/// Anything that maps lyrics to an explicit-probability.
pub trait Classifier: Sync {
    fn probability(&self, lyrics: &str) -> Result<f64, ScoreError>;
}

impl<F> Classifier for F
where
    F: Fn(&str) -> Result<f64, ScoreError> + Sync,
{
    fn probability(&self, lyrics: &str) -> Result<f64, ScoreError> {
        self(lyrics)
    }
}

/// The transformer classifier bundled with its vocabulary.
#[derive(Debug, Clone)]
pub struct TransformerClassifier {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub vocab: Vocabulary,
}

impl TransformerClassifier {
    pub fn new(config: ModelConfig, params: ParameterSet, vocab: Vocabulary) -> Self {
        TransformerClassifier { config, params, vocab }
    }
}

impl Classifier for TransformerClassifier {
    fn probability(&self, lyrics: &str) -> Result<f64, ScoreError> {
        let seq = encode(lyrics, &self.vocab, self.config.max_seq_len);
        Ok(forward_classify(&seq, &self.params, &self.config, &mut Mode::Eval)?.probability)
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("scoring song {song_id} failed: {source}")]
    Score {
        song_id: String,
        #[source]
        source: ScoreError,
    },
    #[error("classifier returned {probability} for song {song_id}")]
    BadProbability { song_id: String, probability: f64 },
    #[error("splits differ in length or order")]
    Misaligned,
    #[error("predictions file: {0}")]
    Predictions(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn record(&mut self, expert: Label, predicted: Label) {
        match (expert.is_explicit(), predicted.is_explicit()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Four ratios; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics_from_cm(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    Ok(MetricsReport {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        precision: ratio(cm.tp, cm.tp + cm.fp),
        recall: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
    })
}

/// Render a metric, `n/a` when undefined.
pub fn format_metric(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(v) => format!("{v:.decimals$}"),
        None => "n/a".to_string(),
    }
}

/// A scored song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub song_id: String,
    pub expert: Label,
    pub probability: f64,
}

impl Prediction {
    pub fn predicted(&self, threshold: f64) -> Label {
        Label::from_explicit(self.probability >= threshold)
    }

    pub fn correct(&self, threshold: f64) -> bool {
        self.predicted(threshold) == self.expert
    }
}

fn check_threshold(threshold: f64) -> Result<(), EvalError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(EvalError::Threshold(threshold))
    }
}

/// Score every song (in parallel, results kept in split order).
pub fn predict_all<C: Classifier + ?Sized>(model: &C, split: &[LabeledSong]) -> Result<Vec<Prediction>, EvalError> {
    split
        .par_iter()
        .map(|s| {
            let p = model.probability(&s.song.lyrics).map_err(|source| EvalError::Score {
                song_id: s.id().to_string(),
                source,
            })?;
            if !(0.0..=1.0).contains(&p) {
                return Err(EvalError::BadProbability {
                    song_id: s.id().to_string(),
                    probability: p,
                });
            }
            Ok(Prediction {
                song_id: s.id().to_string(),
                expert: s.label(),
                probability: p,
            })
        })
        .collect()
}

/// Tally predictions; explicit iff `probability >= threshold`.
pub fn confusion_from_predictions(preds: &[Prediction], threshold: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for p in preds {
        cm.record(p.expert, p.predicted(threshold));
    }
    cm
}

pub fn evaluate<C: Classifier + ?Sized>(
    model: &C,
    split: &[LabeledSong],
    threshold: f64,
) -> Result<(ConfusionMatrix, MetricsReport), EvalError> {
    check_threshold(threshold)?;
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let preds = predict_all(model, split)?;
    let cm = confusion_from_predictions(&preds, threshold);
    Ok((cm, metrics_from_cm(&cm)?))
}

/// One song's outcome under both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub song_id: String,
    pub expert: Label,
    pub model_a: Label,
    pub model_b: Label,
}

impl PairedOutcome {
    pub fn a_correct(&self) -> bool {
        self.model_a == self.expert
    }

    pub fn b_correct(&self) -> bool {
        self.model_b == self.expert
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonStats {
    pub model_a_agreement: f64,
    pub model_b_agreement: f64,
    pub outcomes: Vec<PairedOutcome>,
    /// Songs model A got right and model B got wrong.
    pub b: u64,
    /// Songs model A got wrong and model B got right.
    pub c: u64,
    pub p_value: f64,
}

impl ComparisonStats {
    pub fn from_outcomes(outcomes: Vec<PairedOutcome>) -> Result<Self, EvalError> {
        if outcomes.is_empty() {
            return Err(EvalError::EmptySplit);
        }
        let n = outcomes.len() as f64;
        let a_right = outcomes.iter().filter(|o| o.a_correct()).count();
        let b_right = outcomes.iter().filter(|o| o.b_correct()).count();
        let b = outcomes.iter().filter(|o| o.a_correct() && !o.b_correct()).count() as u64;
        let c = outcomes.iter().filter(|o| !o.a_correct() && o.b_correct()).count() as u64;
        Ok(ComparisonStats {
            model_a_agreement: a_right as f64 / n,
            model_b_agreement: b_right as f64 / n,
            outcomes,
            b,
            c,
            p_value: mcnemar_one_sided(b, c),
        })
    }
}

/// Pair two prediction lists over the same songs in the same order.
pub fn compare_predictions(a: &[Prediction], b: &[Prediction], threshold: f64) -> Result<ComparisonStats, EvalError> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.song_id != y.song_id) {
        return Err(EvalError::Misaligned);
    }
    ComparisonStats::from_outcomes(
        a.iter()
            .zip(b)
            .map(|(x, y)| PairedOutcome {
                song_id: x.song_id.clone(),
                expert: x.expert,
                model_a: x.predicted(threshold),
                model_b: y.predicted(threshold),
            })
            .collect(),
    )
}

pub fn compare_models<A: Classifier + ?Sized, B: Classifier + ?Sized>(
    model_a: &A,
    model_b: &B,
    split: &[LabeledSong],
    threshold: f64,
) -> Result<ComparisonStats, EvalError> {
    check_threshold(threshold)?;
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    compare_predictions(&predict_all(model_a, split)?, &predict_all(model_b, split)?, threshold)
}

/// `P[Binomial(b + c, 1/2) ≥ b]`; 1 when there are no discordant pairs.
pub fn mcnemar_one_sided(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 || b == 0 {
        return 1.0;
    }
    if n <= 120 {
        // Exact integer arithmetic: binomial coefficients of n ≤ 120 fit in u128.
        let mut coeff: u128 = 1;
        let mut tail: u128 = 0;
        for k in 0..=n {
            if k >= b {
                tail += coeff;
            }
            coeff = coeff * (n - k) as u128 / (k + 1) as u128;
        }
        return tail as f64 / 2f64.powi(n as i32);
    }
    binomial_tail_log_space(b, n)
}

fn binomial_tail_log_space(b: u64, n: u64) -> f64 {
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_c = 0.0;
    let mut terms = Vec::new();
    for k in 0..=n {
        if k >= b {
            terms.push(ln_c + ln_half_n);
        }
        ln_c += ((n - k) as f64).ln() - ((k + 1) as f64).ln();
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()).exp().min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub p_value: f64,
    pub alpha: f64,
    pub reject_h0: bool,
    /// No discordant pairs; `p_value` is 1 by convention.
    pub no_discordant_pairs: bool,
}

/// One-sided test of "model A is no more accurate than model B" on the
/// discordant pairs.
pub fn hypothesis_test(stats: &ComparisonStats, alpha: f64) -> HypothesisResult {
    let p = mcnemar_one_sided(stats.b, stats.c);
    HypothesisResult {
        p_value: p,
        alpha,
        reject_h0: p < alpha,
        no_discordant_pairs: stats.b + stats.c == 0,
    }
}

/// Read `song_id,expert,probability` rows.
pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["song_id", "expert", "probability"] {
        return Err(EvalError::Predictions(format!(
            "expected header song_id,expert,probability, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<Prediction>().enumerate() {
        let p = row.map_err(|e| EvalError::Predictions(format!("row {}: {e}", i + 2)))?;
        if !(0.0..=1.0).contains(&p.probability) {
            return Err(EvalError::Predictions(format!(
                "row {}: probability {} outside [0, 1]",
                i + 2,
                p.probability
            )));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_predictions_csv(path: &Path, preds: &[Prediction]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in preds {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// A named confusion matrix, e.g. "before" and "after" feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub name: String,
    pub cm: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSection {
    pub model_a: String,
    pub model_b: String,
    pub stats: ComparisonStats,
    pub test: HypothesisResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportInput {
    pub sections: Vec<EvalSection>,
    pub comparison: Option<ComparisonSection>,
}

fn render_cm(out: &mut String, s: &EvalSection) {
    let cm = &s.cm;
    let _ = writeln!(out, "Confusion matrix: {}", s.name);
    let _ = writeln!(out, "{:<22}{:>20}{:>24}", "", "Predicted explicit", "Predicted non-explicit");
    let _ = writeln!(out, "{:<22}{:>20}{:>24}", "Actual explicit", format!("{} (TP)", cm.tp), format!("{} (FN)", cm.fn_));
    let _ = writeln!(out, "{:<22}{:>20}{:>24}", "Actual non-explicit", format!("{} (FP)", cm.fp), format!("{} (TN)", cm.tn));
    out.push('\n');
}

/// Render the text report. Output depends only on `input`.
pub fn render_report(input: &ReportInput) -> String {
    let mut out = String::new();
    for s in &input.sections {
        render_cm(&mut out, s);
    }
    if !input.sections.is_empty() {
        let metrics: Vec<Option<MetricsReport>> =
            input.sections.iter().map(|s| metrics_from_cm(&s.cm).ok()).collect();
        let _ = write!(out, "{:<14}", "Metric");
        for s in &input.sections {
            let _ = write!(out, "{:>12}", s.name);
        }
        out.push('\n');
        type Pick = fn(&MetricsReport) -> Option<f64>;
        let rows: [(&str, Pick); 4] = [
            ("Accuracy", |m| m.accuracy),
            ("Precision", |m| m.precision),
            ("Recall", |m| m.recall),
            ("Specificity", |m| m.specificity),
        ];
        for (name, pick) in rows {
            let _ = write!(out, "{name:<14}");
            for m in &metrics {
                let cell = m.as_ref().map_or("n/a".to_string(), |m| format_percent(pick(m)));
                let _ = write!(out, "{cell:>12}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    if let Some(c) = &input.comparison {
        let n = c.stats.outcomes.len();
        let _ = writeln!(out, "Comparison on {n} songs");
        let _ = writeln!(
            out,
            "{:<24}{:>10}",
            c.model_a,
            format!("{:.1}%", c.stats.model_a_agreement * 100.0)
        );
        let _ = writeln!(
            out,
            "{:<24}{:>10}",
            c.model_b,
            format!("{:.1}%", c.stats.model_b_agreement * 100.0)
        );
        let _ = writeln!(out, "Discordant pairs: b={} ({} right only), c={} ({} right only)", c.stats.b, c.model_a, c.stats.c, c.model_b);
        let _ = writeln!(
            out,
            "Exact one-sided McNemar: p={:.6}, alpha={}, {}{}",
            c.test.p_value,
            c.test.alpha,
            if c.test.reject_h0 { "reject H0" } else { "do not reject H0" },
            if c.test.no_discordant_pairs { " (no discordant pairs)" } else { "" }
        );
    }
    out
}

fn format_percent(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |v| format!("{:.1}%", v * 100.0))
}

pub fn metrics_csv(cm: &ConfusionMatrix) -> String {
    let m = metrics_from_cm(cm).ok();
    let cell = |f: fn(&MetricsReport) -> Option<f64>| m.as_ref().map_or("n/a".into(), |m| format_metric(f(m), 6));
    format!(
        "tp,fn,fp,tn,accuracy,precision,recall,specificity\n{},{},{},{},{},{},{},{}\n",
        cm.tp,
        cm.fn_,
        cm.fp,
        cm.tn,
        cell(|m| m.accuracy),
        cell(|m| m.precision),
        cell(|m| m.recall),
        cell(|m| m.specificity)
    )
}

pub fn comparison_csv(stats: &ComparisonStats) -> String {
    let mut out = String::from("song_id,expert,model_a,model_b\n");
    for o in &stats.outcomes {
        let _ = writeln!(out, "{},{},{},{}", o.song_id, o.expert, o.model_a, o.model_b);
    }
    out
}

/// Write `report.txt`, one `metrics-<name>.csv` per section and, when a
/// comparison is present, `comparison.csv`. Returns the written paths.
pub fn emit_report(input: &ReportInput, dir: &Path) -> Result<Vec<std::path::PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), EvalError> {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    put("report.txt".into(), render_report(input))?;
    for s in &input.sections {
        put(format!("metrics-{}.csv", s.name), metrics_csv(&s.cm))?;
    }
    if let Some(c) = &input.comparison {
        put("comparison.csv".into(), comparison_csv(&c.stats))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Annotation, Genre, Song};

    fn song(id: &str, explicit: bool) -> LabeledSong {
        LabeledSong {
            song: Song {
                id: id.into(),
                title: "t".into(),
                artist: "a".into(),
                genre: Genre::Reggaeton,
                lyrics: if explicit { "x explicit".into() } else { "x clean".into() },
            },
            annotation: Annotation {
                song_id: id.into(),
                label: Label::from_explicit(explicit),
                phrases: vec![],
            },
        }
    }

    fn split(n_each: usize) -> Vec<LabeledSong> {
        (0..n_each)
            .map(|i| song(&format!("e{i}"), true))
            .chain((0..n_each).map(|i| song(&format!("c{i}"), false)))
            .collect()
    }

    fn oracle(lyrics: &str) -> Result<f64, ScoreError> {
        Ok(if lyrics.contains("explicit") { 1.0 } else { 0.0 })
    }

    #[test]
    fn table_metrics() {
        let m = metrics_from_cm(&ConfusionMatrix::new(12, 3, 2, 13)).unwrap();
        assert_eq!(m.accuracy, Some(25.0 / 30.0));
        assert_eq!(m.precision, Some(12.0 / 14.0));
        assert_eq!(m.recall, Some(0.8));
        assert_eq!(m.specificity, Some(13.0 / 15.0));
        let m = metrics_from_cm(&ConfusionMatrix::new(11, 4, 0, 15)).unwrap();
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.specificity, Some(1.0));
        let m = metrics_from_cm(&ConfusionMatrix::new(0, 0, 0, 10)).unwrap();
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(format_metric(m.precision, 3), "n/a");
        assert!(metrics_from_cm(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let s = split(15);
        let (cm, m) = evaluate(&oracle, &s, 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(15, 0, 0, 15));
        assert_eq!(m.accuracy, Some(1.0));
        let half = |_: &str| -> Result<f64, ScoreError> { Ok(0.5) };
        let (cm, _) = evaluate(&half, &s, 0.5).unwrap();
        assert_eq!((cm.fp, cm.fn_), (15, 0));
        assert!(matches!(evaluate(&oracle, &[], 0.5), Err(EvalError::EmptySplit)));
        assert!(matches!(evaluate(&oracle, &s, 1.0), Err(EvalError::Threshold(_))));
    }

    #[test]
    fn comparison_examples() {
        let s = split(5);
        let same = compare_models(&oracle, &oracle, &s, 0.5).unwrap();
        assert_eq!((same.b, same.c), (0, 0));
        assert_eq!(same.model_a_agreement, same.model_b_agreement);
        let wrong = |l: &str| oracle(l).map(|p| 1.0 - p);
        let st = compare_models(&oracle, &wrong, &s, 0.5).unwrap();
        assert_eq!((st.b, st.c), (10, 0));
        assert!((st.p_value - 2f64.powi(-10)).abs() < 1e-15);
        assert!(hypothesis_test(&st, 0.05).reject_h0);
    }

    #[test]
    fn mcnemar_examples() {
        assert_eq!(mcnemar_one_sided(0, 0), 1.0);
        assert_eq!(mcnemar_one_sided(6, 2), 37.0 / 256.0);
        assert!((mcnemar_one_sided(10, 0) - 0.000977).abs() < 1e-6);
        for (b, c) in [(70u64, 50u64), (30, 31), (100, 20), (3, 9)] {
            let exact = mcnemar_one_sided(b, c);
            let logs = binomial_tail_log_space(b, b + c);
            assert!((exact - logs).abs() <= 1e-12 * exact.max(1e-300), "{b} {c}");
        }
        let big = mcnemar_one_sided(80, 41);
        assert!(big > 0.0 && big < 0.01);
        assert!(mcnemar_one_sided(61, 60) > 0.4);
    }

    #[test]
    fn report_is_deterministic_and_omits_empty_comparison() {
        let input = ReportInput {
            sections: vec![
                EvalSection {
                    name: "before".into(),
                    cm: ConfusionMatrix::new(12, 3, 2, 13),
                },
                EvalSection {
                    name: "after".into(),
                    cm: ConfusionMatrix::new(11, 4, 0, 15),
                },
            ],
            comparison: None,
        };
        let text = render_report(&input);
        assert!(text.contains("83.3%") && text.contains("85.7%") && text.contains("100.0%") && text.contains("73.3%"));
        assert!(!text.contains("Comparison"));
        let dir = tempfile::tempdir().unwrap();
        let a = emit_report(&input, &dir.path().join("a")).unwrap();
        let b = emit_report(&input, &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let csv = std::fs::read_to_string(dir.path().join("a/metrics-before.csv")).unwrap();
        assert!(csv.starts_with("tp,fn,fp,tn,accuracy,precision,recall,specificity\n12,3,2,13,"));
    }

    #[test]
    fn predictions_csv_round_trip() {
        let preds = vec![
            Prediction {
                song_id: "a".into(),
                expert: Label::Explicit,
                probability: 0.75,
            },
            Prediction {
                song_id: "b".into(),
                expert: Label::NonExplicit,
                probability: 0.25,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_predictions_csv(&p, &preds).unwrap();
        assert_eq!(read_predictions_csv(&p).unwrap(), preds);
        std::fs::write(&p, "id,label\n").unwrap();
        assert!(read_predictions_csv(&p).is_err());
    }
}
