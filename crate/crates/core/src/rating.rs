//! Five-tier age rating from per-dimension content scores.
//!
//! Each dimension has four ascending cutoffs `(t7, t12, t16, t18)`. A score
//! at or above a cutoff reaches that tier; the overall tier is the most
//! severe dimension's tier.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{Classifier, ScoreError};
use crate::store::write_atomic;

pub const THRESHOLD_SCHEMA: u32 = 1;
pub const DEFAULT_CUTOFFS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
pub const DEFAULT_BAND: f64 = 0.05;

#[derive(Debug, Error)]
pub enum RatingError {
    #[error("invalid threshold table: {0}")]
    Thresholds(String),
    #[error("score for {dimension} is {score}, outside [0, 1]")]
    Score { dimension: Dimension, score: f64 },
    #[error("a sexual-content model is required")]
    MissingSexualModel,
    #[error("scoring {dimension} failed: {source}")]
    Model {
        dimension: Dimension,
        #[source]
        source: ScoreError,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("threshold file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Sexual,
    Violence,
    Drugs,
    Profanity,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Dimension::Sexual, Dimension::Violence, Dimension::Drugs, Dimension::Profanity];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Sexual => "sexual",
            Dimension::Violence => "violence",
            Dimension::Drugs => "drugs",
            Dimension::Profanity => "profanity",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    AllAges,
    Plus7,
    Plus12,
    Plus16,
    Plus18,
}

impl Tier {
    pub const ALL: [Tier; 5] = [Tier::AllAges, Tier::Plus7, Tier::Plus12, Tier::Plus16, Tier::Plus18];

    pub fn label(self) -> &'static str {
        match self {
            Tier::AllAges => "All Ages",
            Tier::Plus7 => "7+",
            Tier::Plus12 => "12+",
            Tier::Plus16 => "16+",
            Tier::Plus18 => "18+",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Tier::AllAges => "No concerning content",
            Tier::Plus7 => "Mild language or themes",
            Tier::Plus12 => "Moderate profanity, suggestive themes",
            Tier::Plus16 => "Strong profanity, sexual references, drug references",
            Tier::Plus18 => "Graphic sexual content, extreme violence/drugs",
        }
    }

    fn from_index(i: usize) -> Tier {
        Tier::ALL[i]
    }

    /// Severity of a per-dimension tier; `None` for AllAges.
    pub fn severity(self) -> Option<Severity> {
        match self {
            Tier::AllAges => None,
            Tier::Plus7 => Some(Severity::Mild),
            Tier::Plus12 => Some(Severity::Moderate),
            Tier::Plus16 => Some(Severity::Strong),
            Tier::Plus18 => Some(Severity::Graphic),
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Mild,
    Moderate,
    Strong,
    Graphic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContentScoreVector {
    pub sexual: f64,
    pub violence: f64,
    pub drugs: f64,
    pub profanity: f64,
}

impl ContentScoreVector {
    pub fn new(sexual: f64, violence: f64, drugs: f64, profanity: f64) -> Result<Self, RatingError> {
        let v = ContentScoreVector {
            sexual,
            violence,
            drugs,
            profanity,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn get(&self, d: Dimension) -> f64 {
        match d {
            Dimension::Sexual => self.sexual,
            Dimension::Violence => self.violence,
            Dimension::Drugs => self.drugs,
            Dimension::Profanity => self.profanity,
        }
    }

    pub fn set(&mut self, d: Dimension, v: f64) {
        match d {
            Dimension::Sexual => self.sexual = v,
            Dimension::Violence => self.violence = v,
            Dimension::Drugs => self.drugs = v,
            Dimension::Profanity => self.profanity = v,
        }
    }

    pub fn validate(&self) -> Result<(), RatingError> {
        for d in Dimension::ALL {
            let s = self.get(d);
            if !(0.0..=1.0).contains(&s) {
                return Err(RatingError::Score { dimension: d, score: s });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Descriptor {
    pub dimension: Dimension,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTier {
    pub tier: Tier,
    pub descriptors: BTreeSet<Descriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub sexual: [f64; 4],
    pub violence: [f64; 4],
    pub drugs: [f64; 4],
    pub profanity: [f64; 4],
}

impl Cutoffs {
    pub fn get(&self, d: Dimension) -> &[f64; 4] {
        match d {
            Dimension::Sexual => &self.sexual,
            Dimension::Violence => &self.violence,
            Dimension::Drugs => &self.drugs,
            Dimension::Profanity => &self.profanity,
        }
    }
}

/// Per-dimension cutoffs and the boundary band used for human-review
/// flagging. Stored as TOML.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub schema: u32,
    pub boundary_band: f64,
    pub cutoffs: Cutoffs,
}

impl Default for ThresholdTable {
    fn default() -> Self {
        ThresholdTable {
            schema: THRESHOLD_SCHEMA,
            boundary_band: DEFAULT_BAND,
            cutoffs: Cutoffs {
                sexual: DEFAULT_CUTOFFS,
                violence: DEFAULT_CUTOFFS,
                drugs: DEFAULT_CUTOFFS,
                profanity: DEFAULT_CUTOFFS,
            },
        }
    }
}

impl ThresholdTable {
    pub fn validate(&self) -> Result<(), RatingError> {
        let bad = |m: String| Err(RatingError::Thresholds(m));
        if self.schema != THRESHOLD_SCHEMA {
            return bad(format!("unsupported schema {}", self.schema));
        }
        if !(self.boundary_band >= 0.0 && self.boundary_band.is_finite()) {
            return bad(format!("boundary_band {} must be non-negative", self.boundary_band));
        }
        for d in Dimension::ALL {
            let c = self.cutoffs.get(d);
            if c.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
                return bad(format!("{d} cutoffs must lie in (0, 1): {c:?}"));
            }
            for w in c.windows(2) {
                if w[1] <= w[0] {
                    return bad(format!("{d} cutoffs must be strictly increasing: {c:?}"));
                }
                if self.boundary_band >= w[1] - w[0] {
                    return bad(format!(
                        "boundary_band {} must be smaller than the {d} gap {}",
                        self.boundary_band,
                        w[1] - w[0]
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, RatingError> {
        let t: ThresholdTable = toml::from_str(text).map_err(|e| RatingError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("threshold table serializes")
    }

    pub fn load(path: &Path) -> Result<Self, RatingError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), RatingError> {
        self.validate()?;
        write_atomic(path, self.to_toml().as_bytes())?;
        Ok(())
    }

    /// Tier of a single dimension's score: the number of cutoffs it reaches.
    pub fn dimension_tier(&self, d: Dimension, score: f64) -> Tier {
        Tier::from_index(self.cutoffs.get(d).iter().filter(|&&t| score >= t).count())
    }
}

pub fn map_tier(scores: &ContentScoreVector, thresholds: &ThresholdTable) -> RatingTier {
    let mut tier = Tier::AllAges;
    let mut descriptors = BTreeSet::new();
    for d in Dimension::ALL {
        let t = thresholds.dimension_tier(d, scores.get(d));
        tier = tier.max(t);
        if let Some(severity) = t.severity() {
            descriptors.insert(Descriptor { dimension: d, severity });
        }
    }
    RatingTier { tier, descriptors }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearCutoff {
    pub dimension: Dimension,
    pub cutoff: f64,
    pub distance: f64,
}

/// Flag scores within `boundary_band` of any cutoff, listing each offending
/// (dimension, cutoff, distance).
pub fn flag_boundary(scores: &ContentScoreVector, thresholds: &ThresholdTable) -> (bool, Vec<NearCutoff>) {
    let mut near = Vec::new();
    for d in Dimension::ALL {
        let s = scores.get(d);
        for &cutoff in thresholds.cutoffs.get(d) {
            let distance = (s - cutoff).abs();
            if distance <= thresholds.boundary_band {
                near.push(NearCutoff {
                    dimension: d,
                    cutoff,
                    distance,
                });
            }
        }
    }
    (!near.is_empty(), near)
}

/// Per-dimension scorers. Only the sexual-content model is required.
#[derive(Default)]
pub struct DimensionSuite<'a> {
    pub sexual: Option<&'a dyn Classifier>,
    pub violence: Option<&'a dyn Classifier>,
    pub drugs: Option<&'a dyn Classifier>,
    pub profanity: Option<&'a dyn Classifier>,
}

impl<'a> DimensionSuite<'a> {
    pub fn sexual_only(model: &'a dyn Classifier) -> Self {
        DimensionSuite {
            sexual: Some(model),
            ..Default::default()
        }
    }

    fn get(&self, d: Dimension) -> Option<&'a dyn Classifier> {
        match d {
            Dimension::Sexual => self.sexual,
            Dimension::Violence => self.violence,
            Dimension::Drugs => self.drugs,
            Dimension::Profanity => self.profanity,
        }
    }
}

/// Score lyrics on every dimension. Absent models score 0 and produce a
/// warning naming the dimension.
pub fn score_dimensions(lyrics: &str, suite: &DimensionSuite<'_>) -> Result<(ContentScoreVector, Vec<String>), RatingError> {
    if suite.sexual.is_none() {
        return Err(RatingError::MissingSexualModel);
    }
    let mut scores = ContentScoreVector::default();
    let mut warnings = Vec::new();
    for d in Dimension::ALL {
        match suite.get(d) {
            Some(model) => {
                let p = model
                    .probability(lyrics)
                    .map_err(|source| RatingError::Model { dimension: d, source })?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(RatingError::Score { dimension: d, score: p });
                }
                scores.set(d, p);
            }
            None => {
                tracing::debug!(dimension = %d, "no model for dimension; scoring 0");
                warnings.push(format!("no {d} model; scored 0"));
            }
        }
    }
    Ok((scores, warnings))
}

/// Output record of the rating pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub song_id: String,
    pub scores: ContentScoreVector,
    pub tier: Tier,
    pub descriptors: BTreeSet<Descriptor>,
    pub flagged: bool,
    pub near_cutoffs: Vec<NearCutoff>,
}

pub fn rate(song_id: impl Into<String>, scores: &ContentScoreVector, thresholds: &ThresholdTable) -> RatingRecord {
    let RatingTier { tier, descriptors } = map_tier(scores, thresholds);
    let (flagged, near_cutoffs) = flag_boundary(scores, thresholds);
    RatingRecord {
        song_id: song_id.into(),
        scores: *scores,
        tier,
        descriptors,
        flagged,
        near_cutoffs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(s: f64, vi: f64, d: f64, p: f64) -> ContentScoreVector {
        ContentScoreVector::new(s, vi, d, p).unwrap()
    }

    #[test]
    fn anchors() {
        let t = ThresholdTable::default();
        let r = map_tier(&v(0.0, 0.0, 0.0, 0.0), &t);
        assert_eq!(r.tier, Tier::AllAges);
        assert!(r.descriptors.is_empty());
        let r = map_tier(&v(1.0, 0.0, 0.0, 0.0), &t);
        assert_eq!(r.tier, Tier::Plus18);
        assert!(r.descriptors.contains(&Descriptor {
            dimension: Dimension::Sexual,
            severity: Severity::Graphic
        }));
        let r = map_tier(&v(0.61, 0.0, 0.25, 0.0), &t);
        assert_eq!(r.tier, Tier::Plus16);
        let want: BTreeSet<_> = [
            Descriptor {
                dimension: Dimension::Sexual,
                severity: Severity::Strong,
            },
            Descriptor {
                dimension: Dimension::Drugs,
                severity: Severity::Mild,
            },
        ]
        .into();
        assert_eq!(r.descriptors, want);
    }

    #[test]
    fn cutoff_belongs_to_higher_tier() {
        let t = ThresholdTable::default();
        assert_eq!(t.dimension_tier(Dimension::Drugs, 0.4), Tier::Plus12);
        assert_eq!(t.dimension_tier(Dimension::Drugs, 0.39999), Tier::Plus7);
    }

    #[test]
    fn boundary_examples() {
        let t = ThresholdTable::default();
        assert!(!flag_boundary(&v(0.3, 0.5, 0.7, 0.1), &t).0);
        let (flagged, near) = flag_boundary(&v(0.79, 0.0, 0.0, 0.0), &t);
        assert!(flagged);
        assert_eq!(near.len(), 1);
        assert_eq!(near[0].cutoff, 0.8);
        assert!((near[0].distance - 0.01).abs() < 1e-12);
        let zero = ThresholdTable {
            boundary_band: 0.0,
            ..t
        };
        assert!(flag_boundary(&v(0.4, 0.0, 0.0, 0.0), &zero).0);
        assert!(!flag_boundary(&v(0.41, 0.0, 0.0, 0.0), &zero).0);
    }

    #[test]
    fn threshold_validation_and_toml() {
        let t = ThresholdTable::default();
        assert_eq!(ThresholdTable::from_toml(&t.to_toml()).unwrap(), t);
        let mut bad = t;
        bad.cutoffs.violence = [0.2, 0.2, 0.6, 0.8];
        assert!(bad.validate().is_err());
        let mut bad = t;
        bad.boundary_band = 0.2;
        assert!(bad.validate().is_err());
        let mut bad = t;
        bad.cutoffs.drugs = [0.0, 0.4, 0.6, 0.8];
        assert!(bad.validate().is_err());
        assert!(ThresholdTable::from_toml("schema = 2").is_err());
    }

    #[test]
    fn scoring_suite() {
        let zero = |_: &str| -> Result<f64, ScoreError> { Ok(0.0) };
        let suite = DimensionSuite {
            sexual: Some(&zero),
            violence: Some(&zero),
            drugs: Some(&zero),
            profanity: Some(&zero),
        };
        let (s, w) = score_dimensions("x", &suite).unwrap();
        assert_eq!(s, ContentScoreVector::default());
        assert!(w.is_empty());
        let high = |_: &str| -> Result<f64, ScoreError> { Ok(0.9) };
        let (s, w) = score_dimensions("x", &DimensionSuite::sexual_only(&high)).unwrap();
        assert_eq!(s, v(0.9, 0.0, 0.0, 0.0));
        assert_eq!(w.len(), 3);
        assert!(matches!(
            score_dimensions("x", &DimensionSuite::default()),
            Err(RatingError::MissingSexualModel)
        ));
    }

    fn unit() -> impl Strategy<Value = f64> {
        0.0f64..=1.0
    }

    proptest! {
        #[test]
        fn tier_is_monotone(s in unit(), vi in unit(), d in unit(), p in unit(), dim in 0usize..4, bump in unit()) {
            let t = ThresholdTable::default();
            let base = v(s, vi, d, p);
            let mut up = base;
            let dim = Dimension::ALL[dim];
            up.set(dim, (base.get(dim) + bump).min(1.0));
            prop_assert!(map_tier(&up, &t).tier >= map_tier(&base, &t).tier);
        }

        #[test]
        fn descriptors_sound(s in unit(), vi in unit(), d in unit(), p in unit()) {
            let t = ThresholdTable::default();
            let scores = v(s, vi, d, p);
            let r = map_tier(&scores, &t);
            for dim in Dimension::ALL {
                let has = r.descriptors.iter().any(|x| x.dimension == dim);
                prop_assert_eq!(has, t.dimension_tier(dim, scores.get(dim)) > Tier::AllAges);
            }
            let max = Dimension::ALL.iter().map(|&dim| t.dimension_tier(dim, scores.get(dim))).max().unwrap();
            prop_assert_eq!(r.tier, max);
        }

        #[test]
        fn boundary_symmetry(k in 0usize..4, off in 0.0f64..0.09, dim in 0usize..4) {
            prop_assume!((off - DEFAULT_BAND).abs() > 1e-9);
            let t = ThresholdTable::default();
            let dim = Dimension::ALL[dim];
            let c = DEFAULT_CUTOFFS[k];
            let mut lo = ContentScoreVector::default();
            let mut hi = lo;
            lo.set(dim, c - off);
            hi.set(dim, c + off);
            // Keep the other dimensions away from every cutoff.
            for other in Dimension::ALL.iter().filter(|&&o| o != dim) {
                lo.set(*other, 0.1);
                hi.set(*other, 0.1);
            }
            prop_assert_eq!(flag_boundary(&lo, &t).0, flag_boundary(&hi, &t).0);
        }
    }
}
