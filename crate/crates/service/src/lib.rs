//! HTTP service over a data directory: classification and rating against an
//! atomically swappable model snapshot, the moderator review queue, and
//! serialized background retraining.

pub mod api;
pub mod jobs;
pub mod reviews;
pub mod snapshot;

pub use api::{router, serve, AppState, ServiceConfig, ServiceError, SNAPSHOT_HEADER};
pub use jobs::{JobKind, JobState, JobStatus, PipelineTrainer, TrainOutput, Trainer};
pub use snapshot::{Snapshot, SnapshotCell};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
mod guide {}
