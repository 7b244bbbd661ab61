//! Immutable model snapshots behind a swappable pointer.

use std::sync::Arc;

use mcar::evaluation::{Classifier, TransformerClassifier};
use mcar::model::ModelConfig;
use parking_lot::RwLock;

/// Placeholder hash reported while no model has been loaded.
pub const NO_SNAPSHOT: &str = "none";

/// One loaded model. Readers clone the `Arc` once per request and score
/// against it to completion, so a swap never splits a response.
pub struct Snapshot {
    pub hash: String,
    pub classifier: Arc<dyn Classifier + Send + Sync>,
    pub config: Option<ModelConfig>,
    pub num_params: Option<usize>,
}

impl Snapshot {
    pub fn from_model(model: TransformerClassifier, hash: String) -> Self {
        Snapshot {
            hash,
            config: Some(model.config),
            num_params: Some(model.params.num_params()),
            classifier: Arc::new(model),
        }
    }

    /// A snapshot around any classifier, for tests and alternative backends.
    pub fn from_classifier(hash: impl Into<String>, classifier: Arc<dyn Classifier + Send + Sync>) -> Self {
        Snapshot {
            hash: hash.into(),
            classifier,
            config: None,
            num_params: None,
        }
    }
}

impl std::fmt::Debug for Snapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Snapshot")
            .field("hash", &self.hash)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

#[derive(Default)]
pub struct SnapshotCell {
    inner: RwLock<Option<Arc<Snapshot>>>,
}

impl SnapshotCell {
    pub fn new(initial: Option<Snapshot>) -> Self {
        SnapshotCell {
            inner: RwLock::new(initial.map(Arc::new)),
        }
    }

    pub fn current(&self) -> Option<Arc<Snapshot>> {
        self.inner.read().clone()
    }

    pub fn hash(&self) -> String {
        self.inner
            .read()
            .as_ref()
            .map_or_else(|| NO_SNAPSHOT.to_string(), |s| s.hash.clone())
    }

    /// Install `next`; returns the snapshot it replaced.
    pub fn swap(&self, next: Snapshot) -> Option<Arc<Snapshot>> {
        self.inner.write().replace(Arc::new(next))
    }
}
