//! Job records and their artifacts under `runs/{job_id}/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use loosekey_core::io::{motion_from_json, motion_to_json};
use loosekey_core::{Motion, Skeleton};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ReportDoc;

pub const JOB_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Generate,
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn can_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        )
    }

    pub fn is_active(self) -> bool {
        matches!(self, JobStatus::Queued | JobStatus::Running)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub version: u32,
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    /// Seconds since the Unix epoch.
    pub created_at: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    /// Where the result is served, once done.
    pub result: Option<String>,
    #[serde(default)]
    pub motions: Vec<String>,
    pub error: Option<serde_json::Value>,
    pub seed: u64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// In-memory index of jobs mirrored to disk.
pub struct JobStore {
    root: PathBuf,
    state: Mutex<State>,
}

struct State {
    jobs: BTreeMap<String, JobRecord>,
    next: u64,
}

fn job_number(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
}

impl JobStore {
    /// Opens `root` (the `runs` directory), picking up records left by
    /// earlier processes. Jobs that were still active are marked failed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut jobs = BTreeMap::new();
        let entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
        for entry in entries.flatten() {
            let path = entry.path().join("job.json");
            if !path.is_file() {
                continue;
            }
            let mut record: JobRecord = read_json(&path)?;
            if record.status.is_active() {
                record.status = JobStatus::Failed;
                record.finished_at = Some(now());
                record.error = Some(serde_json::json!({"error": "interrupted", "message": "server stopped before the job finished"}));
                write_json(&path, &record)?;
            }
            jobs.insert(record.id.clone(), record);
        }
        let next = jobs.keys().filter_map(|id| job_number(id)).max().map_or(1, |n| n + 1);
        Ok(JobStore {
            root,
            state: Mutex::new(State { jobs, next }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers a queued job unless `limit` jobs are already active.
    pub fn create(&self, kind: JobKind, seed: u64, limit: usize) -> Result<JobRecord> {
        let mut state = self.lock();
        let active = state.jobs.values().filter(|j| j.status.is_active()).count();
        if active >= limit {
            return Err(Error::Busy(format!("{active} jobs queued or running, limit {limit}")));
        }
        let id = format!("job-{:06}", state.next);
        state.next += 1;
        let record = JobRecord {
            version: JOB_VERSION,
            id: id.clone(),
            kind,
            status: JobStatus::Queued,
            created_at: now(),
            started_at: None,
            finished_at: None,
            result: None,
            motions: Vec::new(),
            error: None,
            seed,
        };
        let dir = self.dir(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("job.json"), &record)?;
        state.jobs.insert(id, record.clone());
        Ok(record)
    }

    fn update(&self, id: &str, next: JobStatus, edit: impl FnOnce(&mut JobRecord)) -> Result<JobRecord> {
        let mut state = self.lock();
        let record = state
            .jobs
            .get_mut(id)
            .ok_or_else(|| Error::NotFound(format!("job {id}")))?;
        if !record.status.can_become(next) {
            return Err(Error::Invalid(format!(
                "job {id}: cannot move from {:?} to {next:?}",
                record.status
            )));
        }
        record.status = next;
        edit(record);
        write_json(&self.dir(id).join("job.json"), record)?;
        Ok(record.clone())
    }

    pub fn start(&self, id: &str) -> Result<JobRecord> {
        self.update(id, JobStatus::Running, |r| r.started_at = Some(now()))
    }

    pub fn finish(&self, id: &str, result: String, motions: Vec<String>) -> Result<JobRecord> {
        self.update(id, JobStatus::Done, |r| {
            r.finished_at = Some(now());
            r.result = Some(result);
            r.motions = motions;
        })
    }

    pub fn fail(&self, id: &str, error: &Error) -> Result<JobRecord> {
        self.update(id, JobStatus::Failed, |r| {
            r.finished_at = Some(now());
            r.error = Some(error.to_json());
        })
    }

    pub fn get(&self, id: &str) -> Result<JobRecord> {
        self.lock()
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("job {id}")))
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.lock().jobs.values().cloned().collect()
    }

    pub fn active(&self) -> usize {
        self.lock().jobs.values().filter(|j| j.status.is_active()).count()
    }

    /// Stores motion `index` of a job and returns its id.
    pub fn save_motion(&self, job: &str, index: usize, motion: &Motion, skeleton: &Skeleton) -> Result<String> {
        let id = format!("{job}-m{index}");
        write_json(&self.dir(job).join(format!("motion_{index}.json")), &motion_to_json(motion, Some(skeleton)))?;
        Ok(id)
    }

    fn motion_path(&self, id: &str) -> Option<PathBuf> {
        let (job, index) = id.rsplit_once("-m")?;
        job_number(job)?;
        let index: usize = index.parse().ok()?;
        Some(self.dir(job).join(format!("motion_{index}.json")))
    }

    /// The motion document as stored.
    pub fn motion_json(&self, id: &str) -> Result<serde_json::Value> {
        let path = self
            .motion_path(id)
            .filter(|p| p.is_file())
            .ok_or_else(|| Error::NotFound(format!("motion {id}")))?;
        read_json(&path)
    }

    pub fn load_motion(&self, id: &str) -> Result<Motion> {
        Ok(motion_from_json(self.motion_json(id)?)?.motion)
    }

    pub fn save_report(&self, job: &str, report: &ReportDoc) -> Result<()> {
        write_json(&self.dir(job).join("report.json"), report)
    }

    pub fn load_report(&self, job: &str) -> Result<ReportDoc> {
        let record = self.get(job)?;
        if record.kind != JobKind::Eval || record.status != JobStatus::Done {
            return Err(Error::NotFound(format!(
                "metrics for job {job} (a {:?} job, {:?})",
                record.kind, record.status
            )));
        }
        read_json(&self.dir(job).join("report.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_transitions_are_one_way() {
        use JobStatus::*;
        assert!(Queued.can_become(Running));
        assert!(Running.can_become(Done));
        assert!(Running.can_become(Failed));
        for (a, b) in [(Queued, Done), (Done, Running), (Failed, Done), (Done, Done), (Running, Queued)] {
            assert!(!a.can_become(b), "{a:?} -> {b:?}");
        }
    }

    #[test]
    fn records_persist_and_ids_stay_unique() {
        let dir = tempfile::tempdir().unwrap();
        let store = JobStore::open(dir.path()).unwrap();
        let a = store.create(JobKind::Generate, 1, 8).unwrap();
        store.start(&a.id).unwrap();
        store.finish(&a.id, "/motions/x".into(), vec![]).unwrap();
        let b = store.create(JobKind::Eval, 2, 8).unwrap();
        assert!(store.finish(&b.id, String::new(), vec![]).is_err());
        drop(store);

        let reopened = JobStore::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&a.id).unwrap().status, JobStatus::Done);
        assert_eq!(reopened.get(&b.id).unwrap().status, JobStatus::Failed);
        let c = reopened.create(JobKind::Generate, 3, 8).unwrap();
        assert!(c.id != a.id && c.id != b.id);
        assert_eq!(reopened.list().len(), 3);
    }

    #[test]
    fn queue_limit_counts_active_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let store = JobStore::open(dir.path()).unwrap();
        let a = store.create(JobKind::Generate, 0, 1).unwrap();
        assert!(matches!(store.create(JobKind::Generate, 0, 1), Err(Error::Busy(_))));
        store.start(&a.id).unwrap();
        store.fail(&a.id, &Error::Invalid("x".into())).unwrap();
        store.create(JobKind::Generate, 0, 1).unwrap();
    }
}
