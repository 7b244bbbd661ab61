//! On-disk layout of a data directory shared by the CLI and the service.
//!
//! ```text
//! <data-dir>/
//!   corpus.jsonl        labeled songs
//!   splits.json         protocol splits
//!   vocab.txt           tokenizer vocabulary
//!   model.ckpt          current classifier checkpoint
//!   pretrained.ckpt     language-model trunk (optional)
//!   thresholds.toml     rating cutoffs (optional, defaults otherwise)
//!   feedback.jsonl      append-only feedback ledger
//!   audit.jsonl         remote classifier audit log
//!   reviews.json        moderator review queue
//!   metrics.json        latest pre/post metrics pair
//!   runs/<stamp>-s<seed>/report.json
//!   reports/            rendered evaluation reports
//! ```

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

/// Write `bytes` to a sibling temp file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(
        ".tmp{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Append one JSON line to `path`, creating it if needed. Existing content is
/// never rewritten.
pub fn append_json_line<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut line = serde_json::to_string(value).map_err(io::Error::other)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.flush()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ensure(&self) -> io::Result<()> {
        fs::create_dir_all(&self.root)
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained.ckpt")
    }

    pub fn thresholds(&self) -> PathBuf {
        self.root.join("thresholds.toml")
    }

    pub fn feedback_ledger(&self) -> PathBuf {
        self.root.join("feedback.jsonl")
    }

    pub fn audit_log(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }

    pub fn reviews(&self) -> PathBuf {
        self.root.join("reviews.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    /// A fresh run directory named by UTC timestamp and seed.
    pub fn new_run_dir(&self, seed: u64) -> io::Result<PathBuf> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let dir = self.runs().join(format!("{stamp}-s{seed}"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}
