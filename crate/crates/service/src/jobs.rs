//! Background training jobs, run one at a time by a dedicated worker thread.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use mcar::pipeline::{load_model, refine_stage, train_stage, PipelineConfig};
use mcar::store::DataDir;
use mcar::training::TrainReport;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::snapshot::{Snapshot, SnapshotCell};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Retrain,
    Refine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: u64,
    pub kind: JobKind,
    pub state: JobState,
    /// Present exactly when the job is done.
    pub report: Option<TrainReport>,
    pub run_dir: Option<PathBuf>,
    /// Snapshot installed by this job.
    pub snapshot: Option<String>,
    pub error: Option<String>,
    pub submitted_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

/// What a finished training run hands back to the service.
pub struct TrainOutput {
    pub snapshot: Snapshot,
    pub report: TrainReport,
    pub run_dir: Option<PathBuf>,
}

/// Produces a new snapshot for a job. Blocking; runs on the worker thread.
pub trait Trainer: Send + Sync {
    fn run(&self, kind: JobKind) -> Result<TrainOutput, String>;
}

/// The production trainer: the data-directory retrain and refine stages.
pub struct PipelineTrainer {
    pub data: DataDir,
    pub config: PipelineConfig,
}

impl Trainer for PipelineTrainer {
    fn run(&self, kind: JobKind) -> Result<TrainOutput, String> {
        let stage = match kind {
            JobKind::Retrain => train_stage(&self.data, &self.config),
            JobKind::Refine => refine_stage(&self.data, &self.config).map(|o| o.stage),
        }
        .map_err(|e| e.to_string())?;
        let (model, hash) = load_model(&self.data).map_err(|e| e.to_string())?;
        debug_assert_eq!(hash, stage.hash);
        Ok(TrainOutput {
            snapshot: Snapshot::from_model(model, hash),
            report: stage.report,
            run_dir: Some(stage.run_dir),
        })
    }
}

/// Job table plus the submission side of the worker queue.
pub struct Jobs {
    table: Mutex<BTreeMap<u64, JobStatus>>,
    next_id: Mutex<u64>,
    tx: Mutex<mpsc::Sender<u64>>,
}

impl Jobs {
    /// Start the worker thread. Finished jobs swap their snapshot into
    /// `cell` before they are marked done.
    pub fn start(trainer: Arc<dyn Trainer>, cell: Arc<SnapshotCell>) -> Arc<Jobs> {
        let (tx, rx) = mpsc::channel::<u64>();
        let jobs = Arc::new(Jobs {
            table: Mutex::new(BTreeMap::new()),
            next_id: Mutex::new(0),
            tx: Mutex::new(tx),
        });
        let worker = Arc::downgrade(&jobs);
        std::thread::Builder::new()
            .name("mcar-trainer".into())
            .spawn(move || {
                while let Ok(id) = rx.recv() {
                    let Some(jobs) = worker.upgrade() else { break };
                    jobs.execute(id, trainer.as_ref(), &cell);
                }
            })
            .expect("spawn trainer thread");
        jobs
    }

    fn execute(&self, id: u64, trainer: &dyn Trainer, cell: &SnapshotCell) {
        let kind = {
            let mut t = self.table.lock();
            let job = t.get_mut(&id).expect("submitted job");
            job.state = JobState::Running;
            job.kind
        };
        tracing::info!(job = id, ?kind, "training job started");
        let result = trainer.run(kind);
        let mut t = self.table.lock();
        let job = t.get_mut(&id).expect("submitted job");
        job.finished_at = Some(Utc::now());
        match result {
            Ok(out) => {
                job.snapshot = Some(out.snapshot.hash.clone());
                cell.swap(out.snapshot);
                job.report = Some(out.report);
                job.run_dir = out.run_dir;
                job.state = JobState::Done;
                tracing::info!(job = id, "training job done");
            }
            Err(e) => {
                tracing::warn!(job = id, error = %e, "training job failed");
                job.error = Some(e);
                job.state = JobState::Failed;
            }
        }
    }

    pub fn submit(&self, kind: JobKind) -> JobStatus {
        let id = {
            let mut n = self.next_id.lock();
            *n += 1;
            *n
        };
        let status = JobStatus {
            job_id: id,
            kind,
            state: JobState::Queued,
            report: None,
            run_dir: None,
            snapshot: None,
            error: None,
            submitted_at: Utc::now(),
            finished_at: None,
        };
        self.table.lock().insert(id, status.clone());
        if self.tx.lock().send(id).is_err() {
            let mut t = self.table.lock();
            let job = t.get_mut(&id).expect("just inserted");
            job.state = JobState::Failed;
            job.error = Some("training worker is not running".into());
            return job.clone();
        }
        status
    }

    pub fn get(&self, id: u64) -> Option<JobStatus> {
        self.table.lock().get(&id).cloned()
    }

    pub fn list(&self) -> Vec<JobStatus> {
        self.table.lock().values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcar::evaluation::ScoreError;
    use std::time::{Duration, Instant};

    struct Counting {
        runs: Mutex<Vec<JobKind>>,
        fail: bool,
    }

    impl Trainer for Counting {
        fn run(&self, kind: JobKind) -> Result<TrainOutput, String> {
            let mut runs = self.runs.lock();
            runs.push(kind);
            if self.fail {
                return Err("boom".into());
            }
            let n = runs.len();
            Ok(TrainOutput {
                snapshot: Snapshot::from_classifier(
                    format!("h{n}"),
                    Arc::new(|_: &str| -> Result<f64, ScoreError> { Ok(0.5) }),
                ),
                report: TrainReport::default(),
                run_dir: None,
            })
        }
    }

    fn wait_for(jobs: &Jobs, id: u64) -> JobStatus {
        let start = Instant::now();
        loop {
            let s = jobs.get(id).unwrap();
            if matches!(s.state, JobState::Done | JobState::Failed) {
                return s;
            }
            assert!(start.elapsed() < Duration::from_secs(10), "job {id} did not finish");
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    #[test]
    fn jobs_run_in_order_and_swap() {
        let trainer = Arc::new(Counting {
            runs: Mutex::new(Vec::new()),
            fail: false,
        });
        let cell = Arc::new(SnapshotCell::new(None));
        let jobs = Jobs::start(trainer.clone(), cell.clone());
        let a = jobs.submit(JobKind::Retrain);
        let b = jobs.submit(JobKind::Refine);
        assert_eq!(a.state, JobState::Queued);
        assert!(a.report.is_none());
        let a = wait_for(&jobs, a.job_id);
        let b = wait_for(&jobs, b.job_id);
        assert_eq!(a.snapshot.as_deref(), Some("h1"));
        assert_eq!(b.snapshot.as_deref(), Some("h2"));
        assert!(a.report.is_some() && b.report.is_some());
        assert_eq!(cell.hash(), "h2");
        assert_eq!(*trainer.runs.lock(), vec![JobKind::Retrain, JobKind::Refine]);
    }

    #[test]
    fn failed_job_keeps_snapshot_and_has_no_report() {
        let trainer = Arc::new(Counting {
            runs: Mutex::new(Vec::new()),
            fail: true,
        });
        let cell = Arc::new(SnapshotCell::new(None));
        let jobs = Jobs::start(trainer, cell.clone());
        let s = wait_for(&jobs, jobs.submit(JobKind::Retrain).job_id);
        assert_eq!(s.state, JobState::Failed);
        assert!(s.report.is_none());
        assert_eq!(s.error.as_deref(), Some("boom"));
        assert!(cell.current().is_none());
    }
}
