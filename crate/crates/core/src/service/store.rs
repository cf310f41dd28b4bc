use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::datagen::{read_json, write_json};
use crate::error::{Error, Result};

/// Environment variable naming the store root.
pub const HOME_VAR: &str = "NOWCAST_XAI_HOME";
const DEFAULT_ROOT: &str = "nowcast-xai-store";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train,
    Calibrate,
    Explain,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::GenData,
        Stage::Train,
        Stage::Calibrate,
        Stage::Explain,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Explain => "explain",
            Stage::Report => "report",
        }
    }

    /// Stages that must complete before this one, in execution order.
    pub fn prerequisites(self) -> &'static [Stage] {
        let i = Stage::ALL.iter().position(|s| *s == self).expect("listed");
        &Stage::ALL[..i]
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: Stage,
    pub cause: String,
    /// The failure came from invalid configuration rather than execution.
    pub validation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub status: RunStatus,
    pub completed_stages: Vec<Stage>,
    pub error: Option<StageError>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
}

impl RunRecord {
    pub fn is_done(&self) -> bool {
        self.status == RunStatus::Done
    }

    pub fn has_stage(&self, s: Stage) -> bool {
        self.completed_stages.contains(&s)
    }
}

pub(crate) fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Directory of runs, one subdirectory per run id.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store> {
        let root = root.into();
        let runs = root.join("runs");
        fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
        Ok(Store { root })
    }

    /// Root from `explicit`, else `NOWCAST_XAI_HOME`, else `./nowcast-xai-store`.
    pub fn resolve_root(explicit: Option<&Path>) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(HOME_VAR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    fn record_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("record.json")
    }

    pub fn load(&self, run_id: &str) -> Result<RunRecord> {
        if run_id.is_empty() || !run_id.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(Error::NotFound(format!("run `{run_id}`")));
        }
        let p = self.record_path(run_id);
        if !p.exists() {
            return Err(Error::NotFound(format!("run `{run_id}`")));
        }
        read_json(&p)
    }

    pub fn save(&self, rec: &RunRecord) -> Result<()> {
        let p = self.record_path(&rec.run_id);
        let tmp = p.with_extension("json.tmp");
        write_json(&tmp, rec)?;
        fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))
    }

    /// All runs, ordered by id.
    pub fn list(&self) -> Result<Vec<RunRecord>> {
        let dir = self.root.join("runs");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("record.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        ids.iter().map(|id| self.load(id)).collect()
    }

    /// Existing record for the config's run id, or a new Pending one.
    pub fn create_or_load(&self, config: &RunConfig) -> Result<RunRecord> {
        let run_id = config.run_id();
        match self.load(&run_id) {
            Ok(r) => Ok(r),
            Err(Error::NotFound(_)) => {
                let dir = self.run_dir(&run_id);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let t = now();
                let rec = RunRecord {
                    run_id,
                    config: config.normalized(),
                    status: RunStatus::Pending,
                    completed_stages: Vec::new(),
                    error: None,
                    artifacts: BTreeMap::new(),
                    created_at: t,
                    updated_at: t,
                };
                self.save(&rec)?;
                Ok(rec)
            }
            Err(e) => Err(e),
        }
    }

    /// Exclusive write access to one run until the guard drops.
    pub fn lock(&self, run_id: &str) -> Result<RunLock> {
        let path = self.run_dir(run_id).join("write.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Conflict(format!(
                "run {run_id} is being written by another process; remove {} if no writer is active",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

/// Removes the run's lock file on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_is_idempotent_and_lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(store.list().unwrap().is_empty());
        let cfg = RunConfig::default();
        let a = store.create_or_load(&cfg).unwrap();
        let b = store.create_or_load(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.list().unwrap().len(), 1);
        let g = store.lock(&a.run_id).unwrap();
        assert!(matches!(store.lock(&a.run_id), Err(Error::Conflict(_))));
        drop(g);
        assert!(store.lock(&a.run_id).is_ok());
    }

    #[test]
    fn unknown_and_malformed_ids_are_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.load("deadbeef"), Err(Error::NotFound(_))));
        assert!(matches!(store.load("../etc"), Err(Error::NotFound(_))));
    }

    #[test]
    fn prerequisites_follow_stage_order() {
        assert!(Stage::GenData.prerequisites().is_empty());
        assert_eq!(Stage::Calibrate.prerequisites(), &[Stage::GenData, Stage::Train]);
    }
}
