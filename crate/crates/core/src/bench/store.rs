use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapt::AdaptationMode;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::seed::sha256_hex;
use crate::splits::PlanKind;

pub const STORE_SCHEMA_VERSION: u32 = 1;

/// One evaluation of one training session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    /// Shared by every evaluation of the same trained model.
    pub session_id: String,
    pub model: String,
    pub mode: AdaptationMode,
    pub dataset: String,
    pub plan_kind: PlanKind,
    pub fold_index: usize,
    pub fraction: Option<f64>,
    pub train_domain: Option<String>,
    pub test_domain: Option<String>,
    pub in_domain: Option<bool>,
    pub seed: u64,
    pub eval: EvalResult,
    pub best_epoch: usize,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
    pub config: Value,
    pub config_digest: String,
    /// SHA-256 over the record serialized with this field empty.
    #[serde(default)]
    pub digest: String,
}

/// Canonical digest of a JSON value (object keys are kept sorted).
pub fn config_digest(config: &Value) -> String {
    sha256_hex(serde_json::to_string(config).expect("value serializes").as_bytes())
}

impl RunRecord {
    pub fn compute_digest(&self) -> String {
        let mut bare = self.clone();
        bare.digest.clear();
        sha256_hex(serde_json::to_string(&bare).expect("record serializes").as_bytes())
    }

    pub fn seal(mut self) -> Self {
        self.config_digest = config_digest(&self.config);
        self.digest = self.compute_digest();
        self
    }

    pub fn verify(&self) -> std::result::Result<(), String> {
        if self.schema_version != STORE_SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.digest != self.compute_digest() {
            return Err("record digest mismatch".into());
        }
        if self.config_digest != config_digest(&self.config) {
            return Err("config digest mismatch".into());
        }
        Ok(())
    }
}

/// A line that failed to parse or verify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptLine {
    pub line: usize,
    pub reason: String,
}

/// Append-only JSONL store of run records.
///
/// Every record is written with a single `write_all` on a file opened in
/// append mode, so concurrent writers interleave whole lines. Readers skip
/// and report lines that are truncated or whose digest does not verify.
#[derive(Debug, Default)]
pub struct ResultsStore {
    path: Option<PathBuf>,
    records: Vec<RunRecord>,
    corrupt: Vec<CorruptLine>,
}

impl ResultsStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) a store file, loading any existing records.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut store = ResultsStore {
            path: Some(path.clone()),
            ..Default::default()
        };
        match std::fs::read_to_string(&path) {
            Ok(text) => store.ingest(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(&path, e)),
        }
        Ok(store)
    }

    fn ingest(&mut self, text: &str) {
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.split('\n').collect();
        let mut seen: BTreeSet<String> = self.records.iter().map(|r| r.run_id.clone()).collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let last = i + 1 == lines.len();
            if last && !complete {
                self.corrupt.push(CorruptLine {
                    line: i + 1,
                    reason: "truncated final line".into(),
                });
                continue;
            }
            match serde_json::from_str::<RunRecord>(line) {
                Ok(r) => match r.verify() {
                    Ok(()) if seen.insert(r.run_id.clone()) => self.records.push(r),
                    Ok(()) => self.corrupt.push(CorruptLine {
                        line: i + 1,
                        reason: format!("duplicate run_id `{}`", r.run_id),
                    }),
                    Err(reason) => self.corrupt.push(CorruptLine { line: i + 1, reason }),
                },
                Err(e) => self.corrupt.push(CorruptLine {
                    line: i + 1,
                    reason: e.to_string(),
                }),
            }
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn corrupt_lines(&self) -> &[CorruptLine] {
        &self.corrupt
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, run_id: &str) -> bool {
        self.records.iter().any(|r| r.run_id == run_id)
    }

    pub fn run_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.run_id.as_str()).collect()
    }

    /// Seals and appends a record; run ids must be new.
    pub fn append(&mut self, record: RunRecord) -> Result<&RunRecord> {
        if self.contains(&record.run_id) {
            return Err(Error::invalid("run_id", format!("`{}` already stored", record.run_id)));
        }
        let record = record.seal();
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(&line).map_err(|e| Error::io(path, e))?;
            f.sync_data().map_err(|e| Error::io(path, e))?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Re-reads the backing file, picking up records from other writers.
    pub fn reload(&mut self) -> Result<()> {
        if let Some(path) = self.path.clone() {
            *self = Self::open(path)?;
        }
        Ok(())
    }
}
