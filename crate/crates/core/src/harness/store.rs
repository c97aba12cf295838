//! Append-only results store.
//!
//! Two newline-delimited JSON files live in the store directory:
//! `runs.jsonl` (one [`RunRecord`] per line, keyed by config hash + seed,
//! last record wins) and `configs.jsonl` (one [`CellInfo`] per config hash,
//! recording the full config and its sweep coordinates so reports can join
//! records back to hyperparameters). Appends are flushed per record; a torn
//! final line left by a crash is ignored on reload.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Mean entropy / peak of the teacher's train-set soft labels at the run's
/// temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelSnapshot {
    pub tau: f64,
    pub mean_entropy: f64,
    pub mean_peak: f64,
}

/// One seeded run's result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub status: RunStatus,
    pub epochs: Vec<EpochStats>,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub wall_time_s: f64,
    pub soft_labels: Option<SoftLabelSnapshot>,
}

impl RunRecord {
    /// Equality of everything the training computation determines
    /// (wall time excluded).
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        self.config_hash == other.config_hash
            && self.seed == other.seed
            && self.status == other.status
            && self.epochs == other.epochs
            && self.final_train_acc == other.final_train_acc
            && self.final_test_acc == other.final_test_acc
            && self.soft_labels == other.soft_labels
    }
}

/// What a config hash stands for: the sweep coordinates plus the full
/// config JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub hash: String,
    /// `teacher`, `student`, or `hd`.
    pub kind: String,
    pub tau: Option<f64>,
    pub width_factor: Option<f64>,
    pub policy: Option<String>,
    pub bits: Option<u32>,
    pub config: serde_json::Value,
}

pub struct ResultsStore {
    dir: PathBuf,
    records: Vec<RunRecord>,
    index: HashMap<(String, u64), usize>,
    configs: HashMap<String, CellInfo>,
}

impl ResultsStore {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut store = ResultsStore {
            dir: dir.to_path_buf(),
            records: Vec::new(),
            index: HashMap::new(),
            configs: HashMap::new(),
        };
        for line in read_jsonl(&store.runs_path())? {
            let record: RunRecord = line?;
            store.index.insert((record.config_hash.clone(), record.seed), store.records.len());
            store.records.push(record);
        }
        for line in read_jsonl(&store.configs_path())? {
            let info: CellInfo = line?;
            store.configs.insert(info.hash.clone(), info);
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn runs_path(&self) -> PathBuf {
        self.dir.join("runs.jsonl")
    }

    fn configs_path(&self) -> PathBuf {
        self.dir.join("configs.jsonl")
    }

    pub fn contains(&self, hash: &str, seed: u64) -> bool {
        self.index.contains_key(&(hash.to_string(), seed))
    }

    pub fn get(&self, hash: &str, seed: u64) -> Option<&RunRecord> {
        self.index.get(&(hash.to_string(), seed)).map(|&i| &self.records[i])
    }

    /// All records in append order (including superseded reruns).
    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    /// Latest record per `(hash, seed)` key.
    pub fn latest(&self) -> Vec<&RunRecord> {
        let mut keys: Vec<_> = self.index.iter().collect();
        keys.sort_by(|a, b| a.0.cmp(b.0));
        keys.into_iter().map(|(_, &i)| &self.records[i]).collect()
    }

    pub fn config(&self, hash: &str) -> Option<&CellInfo> {
        self.configs.get(hash)
    }

    pub fn append(&mut self, record: RunRecord) -> Result<()> {
        append_line(&self.runs_path(), &record)?;
        self.index.insert((record.config_hash.clone(), record.seed), self.records.len());
        self.records.push(record);
        Ok(())
    }

    /// Record a config description once per hash.
    pub fn record_config(&mut self, info: CellInfo) -> Result<()> {
        if self.configs.contains_key(&info.hash) {
            return Ok(());
        }
        append_line(&self.configs_path(), &info)?;
        self.configs.insert(info.hash.clone(), info);
        Ok(())
    }
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value).expect("record serializes");
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<impl Iterator<Item = Result<T>>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let total = text.lines().count();
    let path = path.to_path_buf();
    let lines: Vec<(usize, String)> =
        text.lines().map(str::to_string).enumerate().collect();
    Ok(lines.into_iter().filter_map(move |(i, line)| {
        if line.trim().is_empty() {
            return None;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(v) => Some(Ok(v)),
            // A torn final line is the signature of an interrupted append.
            Err(_) if i + 1 == total => None,
            Err(e) => Some(Err(Error::format(
                format!("{}: line {}: {e}", path.display(), i + 1),
                None,
            ))),
        }
    }))
}
