//! The moderator review queue: boundary-flagged and user-reported songs
//! awaiting a single human decision each.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use mcar::corpus::Label;
use mcar::rating::{ContentScoreVector, Dimension, NearCutoff, RatingTier, Tier};
use mcar::store::write_atomic;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReviewError {
    #[error("unknown review item {0}")]
    UnknownItem(u64),
    #[error("review item {0} is already decided")]
    NotPending(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    Boundary,
    UserReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Overridden,
}

/// What a moderator submits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionForm {
    pub corrected_label: Option<Label>,
    pub corrected_tier: Option<Tier>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub corrected_label: Option<Label>,
    pub corrected_tier: Option<Tier>,
    pub note: String,
    pub decided_at: DateTime<Utc>,
}

/// Everything needed to open a review.
#[derive(Debug, Clone, PartialEq)]
pub struct NewReview {
    pub song_id: String,
    pub scores: ContentScoreVector,
    pub provisional_tier: RatingTier,
    pub probability: f64,
    pub predicted: Label,
    pub near_cutoffs: Vec<NearCutoff>,
    pub reason: FlagReason,
    pub snapshot: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: u64,
    pub song_id: String,
    pub scores: ContentScoreVector,
    pub provisional_tier: RatingTier,
    pub probability: f64,
    pub predicted: Label,
    pub near_cutoffs: Vec<NearCutoff>,
    pub flagged_reason: FlagReason,
    pub snapshot: String,
    pub status: ReviewStatus,
    pub decision: Option<Decision>,
    pub created_at: DateTime<Utc>,
}

impl ReviewItem {
    /// Dimensions this item concerns: those near a cutoff, else the
    /// highest-scoring one.
    pub fn dimensions(&self) -> Vec<Dimension> {
        if !self.near_cutoffs.is_empty() {
            let mut ds: Vec<Dimension> = self.near_cutoffs.iter().map(|n| n.dimension).collect();
            ds.sort_unstable();
            ds.dedup();
            return ds;
        }
        let top = Dimension::ALL
            .into_iter()
            .max_by(|a, b| self.scores.get(*a).total_cmp(&self.scores.get(*b)))
            .expect("four dimensions");
        vec![top]
    }

    /// True when the moderator's label disagrees with the model.
    pub fn contradicts_model(&self, form: &DecisionForm) -> bool {
        form.corrected_label.is_some_and(|l| l != self.predicted)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueFilter {
    pub status: Option<ReviewStatus>,
    pub tier: Option<Tier>,
    pub dimension: Option<Dimension>,
    /// Return items with an id strictly greater than this.
    pub cursor: Option<u64>,
    pub limit: Option<usize>,
}

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

impl QueueFilter {
    fn matches(&self, item: &ReviewItem) -> bool {
        self.status.is_none_or(|s| s == item.status)
            && self.tier.is_none_or(|t| t == item.provisional_tier.tier)
            && self.dimension.is_none_or(|d| item.dimensions().contains(&d))
            && self.cursor.is_none_or(|c| item.id > c)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewStore {
    next_id: u64,
    items: BTreeMap<u64, ReviewItem>,
}

impl ReviewStore {
    /// Load from disk; a missing file is an empty store.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(std::io::Error::other),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ReviewStore::default()),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        write_atomic(path, &json)
    }

    pub fn get(&self, id: u64) -> Option<&ReviewItem> {
        self.items.get(&id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pending_count(&self) -> usize {
        self.items.values().filter(|i| i.status == ReviewStatus::Pending).count()
    }

    /// Open a review, or return the pending one already open for the same
    /// song and reason. The flag says whether a new item was created.
    pub fn enqueue(&mut self, new: NewReview, now: DateTime<Utc>) -> (ReviewItem, bool) {
        if let Some(existing) = self.items.values().find(|i| {
            i.status == ReviewStatus::Pending && i.song_id == new.song_id && i.flagged_reason == new.reason
        }) {
            return (existing.clone(), false);
        }
        self.next_id += 1;
        let item = ReviewItem {
            id: self.next_id,
            song_id: new.song_id,
            scores: new.scores,
            provisional_tier: new.provisional_tier,
            probability: new.probability,
            predicted: new.predicted,
            near_cutoffs: new.near_cutoffs,
            flagged_reason: new.reason,
            snapshot: new.snapshot,
            status: ReviewStatus::Pending,
            decision: None,
            created_at: now,
        };
        self.items.insert(item.id, item.clone());
        (item, true)
    }

    /// Check that `id` can still be decided.
    pub fn pending(&self, id: u64) -> Result<&ReviewItem, ReviewError> {
        let item = self.items.get(&id).ok_or(ReviewError::UnknownItem(id))?;
        if item.status != ReviewStatus::Pending {
            return Err(ReviewError::NotPending(id));
        }
        Ok(item)
    }

    /// Compare-and-set from pending to decided. A correction that differs
    /// from the provisional label or tier marks the item overridden.
    pub fn decide(&mut self, id: u64, form: DecisionForm, now: DateTime<Utc>) -> Result<ReviewItem, ReviewError> {
        self.pending(id)?;
        let item = self.items.get_mut(&id).expect("checked above");
        let overridden = item.contradicts_model(&form)
            || form.corrected_tier.is_some_and(|t| t != item.provisional_tier.tier);
        item.status = if overridden {
            ReviewStatus::Overridden
        } else {
            ReviewStatus::Approved
        };
        item.decision = Some(Decision {
            corrected_label: form.corrected_label,
            corrected_tier: form.corrected_tier,
            note: form.note,
            decided_at: now,
        });
        Ok(item.clone())
    }

    /// One page of matching items in id order, with the cursor for the next
    /// page when more remain.
    pub fn list(&self, filter: &QueueFilter) -> (Vec<ReviewItem>, Option<u64>) {
        let limit = filter.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
        let mut matching = self.items.values().filter(|i| filter.matches(i));
        let page: Vec<ReviewItem> = matching.by_ref().take(limit).cloned().collect();
        let next = if matching.next().is_some() {
            page.last().map(|i| i.id)
        } else {
            None
        };
        (page, next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcar::rating::{map_tier, ThresholdTable};

    fn new_review(song: &str, reason: FlagReason, sexual: f64) -> NewReview {
        let scores = ContentScoreVector::new(sexual, 0.0, 0.0, 0.0).unwrap();
        NewReview {
            song_id: song.into(),
            provisional_tier: map_tier(&scores, &ThresholdTable::default()),
            scores,
            probability: sexual,
            predicted: Label::from_explicit(sexual >= 0.5),
            near_cutoffs: Vec::new(),
            reason,
            snapshot: "h".into(),
        }
    }

    #[test]
    fn duplicate_pending_enqueue_is_idempotent() {
        let mut s = ReviewStore::default();
        let (a, created_a) = s.enqueue(new_review("s1", FlagReason::Boundary, 0.39), Utc::now());
        let (b, created_b) = s.enqueue(new_review("s1", FlagReason::Boundary, 0.39), Utc::now());
        assert!(created_a && !created_b);
        assert_eq!(a.id, b.id);
        assert_eq!(s.len(), 1);
        assert_eq!(s.pending_count(), 1);
    }

    #[test]
    fn decided_item_reflagged_by_user_creates_new_item() {
        let mut s = ReviewStore::default();
        let (a, _) = s.enqueue(new_review("s1", FlagReason::UserReport, 0.39), Utc::now());
        s.decide(a.id, DecisionForm::default(), Utc::now()).unwrap();
        let (b, created) = s.enqueue(new_review("s1", FlagReason::UserReport, 0.39), Utc::now());
        assert!(created);
        assert_ne!(a.id, b.id);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn approve_without_correction() {
        let mut s = ReviewStore::default();
        let (a, _) = s.enqueue(new_review("s1", FlagReason::Boundary, 0.39), Utc::now());
        let d = s.decide(a.id, DecisionForm::default(), Utc::now()).unwrap();
        assert_eq!(d.status, ReviewStatus::Approved);
        assert!(d.decision.is_some());
    }

    #[test]
    fn label_override_and_double_decision() {
        let mut s = ReviewStore::default();
        let (a, _) = s.enqueue(new_review("s1", FlagReason::Boundary, 0.39), Utc::now());
        let form = DecisionForm {
            corrected_label: Some(Label::Explicit),
            note: "first".into(),
            ..Default::default()
        };
        assert!(a.contradicts_model(&form));
        let d = s.decide(a.id, form, Utc::now()).unwrap();
        assert_eq!(d.status, ReviewStatus::Overridden);
        let again = DecisionForm {
            note: "second".into(),
            ..Default::default()
        };
        assert_eq!(s.decide(a.id, again, Utc::now()), Err(ReviewError::NotPending(a.id)));
        assert_eq!(s.get(a.id).unwrap().decision.as_ref().unwrap().note, "first");
        assert_eq!(s.decide(99, DecisionForm::default(), Utc::now()), Err(ReviewError::UnknownItem(99)));
    }

    #[test]
    fn decision_present_iff_not_pending() {
        let mut s = ReviewStore::default();
        for i in 0..6 {
            let (item, _) = s.enqueue(new_review(&format!("s{i}"), FlagReason::Boundary, 0.1 * i as f64), Utc::now());
            if i % 2 == 0 {
                s.decide(item.id, DecisionForm::default(), Utc::now()).unwrap();
            }
        }
        let (all, _) = s.list(&QueueFilter::default());
        for item in all {
            assert_eq!(item.decision.is_some(), item.status != ReviewStatus::Pending);
        }
    }

    #[test]
    fn filters_and_pagination() {
        let mut s = ReviewStore::default();
        for i in 0..5 {
            s.enqueue(new_review(&format!("s{i}"), FlagReason::Boundary, 0.9), Utc::now());
        }
        s.enqueue(new_review("low", FlagReason::Boundary, 0.0), Utc::now());
        s.decide(1, DecisionForm::default(), Utc::now()).unwrap();

        let pending = QueueFilter {
            status: Some(ReviewStatus::Pending),
            ..Default::default()
        };
        assert_eq!(s.list(&pending).0.len(), 5);
        let approved = QueueFilter {
            status: Some(ReviewStatus::Approved),
            ..Default::default()
        };
        assert_eq!(s.list(&approved).0.iter().map(|i| i.id).collect::<Vec<_>>(), vec![1]);
        let plus18 = QueueFilter {
            tier: Some(Tier::Plus18),
            ..Default::default()
        };
        assert_eq!(s.list(&plus18).0.len(), 5);

        let mut page = QueueFilter {
            limit: Some(2),
            ..Default::default()
        };
        let mut seen = Vec::new();
        loop {
            let (items, next) = s.list(&page);
            seen.extend(items.iter().map(|i| i.id));
            match next {
                Some(c) => page.cursor = Some(c),
                None => break,
            }
        }
        assert_eq!(seen, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn store_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reviews.json");
        let mut s = ReviewStore::default();
        s.enqueue(new_review("s1", FlagReason::Boundary, 0.41), Utc::now());
        s.save(&path).unwrap();
        let back = ReviewStore::load(&path).unwrap();
        assert_eq!(back, s);
        assert!(ReviewStore::load(&dir.path().join("missing.json")).unwrap().is_empty());
    }
}
