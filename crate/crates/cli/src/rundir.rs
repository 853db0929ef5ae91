//! Run directory layout, per-item status markers, the machine-readable
//! event log, and the advisory run lock.
//!
//! Layout under `<runs_root>/<run_id>/`:
//!
//! ```text
//! config.toml                     effective run configuration
//! seeds/seeds.json                accepted task seeds
//! specs/<task_id>.json            evaluator-approved task specs
//! specs/rejections.jsonl          seeds discarded by the evaluator
//! envs/<task_id>/                 environment bundles (build contexts)
//! suites/<task_id>.json           approved verification suites
//! trajectories/trajectories.jsonl collected trajectory store
//! trajectories/solve.jsonl        plain solver trajectories
//! exports/                        stats, SFT exports, audit reports
//! cassettes/                      gateway record/replay cassettes
//! status/<stage>/<item>.json      per-item completion markers
//! events.jsonl                    line-oriented progress log
//! .lock                           advisory lock (one command at a time)
//! ```
//!
//! Status markers make stages idempotent: a marked item is skipped on
//! rerun, so an interrupted stage resumes where it stopped.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Opens (creating if needed) the run directory skeleton.
    pub fn ensure(runs_root: &Path, run_id: &str) -> Result<Self, String> {
        let root = runs_root.join(run_id);
        for sub in ["seeds", "specs", "envs", "suites", "trajectories", "exports", "status"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir)
                .map_err(|err| format!("cannot create {}: {err}", dir.display()))?;
        }
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn seeds_path(&self) -> PathBuf {
        self.root.join("seeds/seeds.json")
    }

    pub fn specs_dir(&self) -> PathBuf {
        self.root.join("specs")
    }

    pub fn spec_path(&self, task_id: &str) -> PathBuf {
        self.specs_dir().join(format!("{task_id}.json"))
    }

    pub fn rejections_path(&self) -> PathBuf {
        self.specs_dir().join("rejections.jsonl")
    }

    pub fn bundle_root(&self, task_id: &str) -> PathBuf {
        self.root.join("envs").join(task_id)
    }

    pub fn suite_path(&self, task_id: &str) -> PathBuf {
        self.root.join("suites").join(format!("{task_id}.json"))
    }

    pub fn trajectories_path(&self) -> PathBuf {
        self.root.join("trajectories/trajectories.jsonl")
    }

    pub fn solve_store_path(&self) -> PathBuf {
        self.root.join("trajectories/solve.jsonl")
    }

    pub fn exports_dir(&self) -> PathBuf {
        self.root.join("exports")
    }

    pub fn cassettes_dir(&self) -> PathBuf {
        self.root.join("cassettes")
    }

    /// State root for the process runtime's images and sessions.
    pub fn process_state_dir(&self) -> PathBuf {
        self.root.join("sandbox-state")
    }

    pub fn inventory_path(&self) -> PathBuf {
        self.root.join("tool_inventory.json")
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    fn status_path(&self, stage: &str, item: &str) -> PathBuf {
        self.root.join("status").join(stage).join(format!("{item}.json"))
    }

    pub fn is_done(&self, stage: &str, item: &str) -> bool {
        self.status_path(stage, item).is_file()
    }

    /// Writes an item's completion marker atomically (write to a temp
    /// name, then rename), so an interrupted write never leaves a marker
    /// that claims completion.
    pub fn mark_done(
        &self,
        stage: &str,
        item: &str,
        payload: &impl Serialize,
    ) -> Result<(), String> {
        let path = self.status_path(stage, item);
        let parent = path.parent().expect("status paths have parents");
        std::fs::create_dir_all(parent)
            .map_err(|err| format!("cannot create {}: {err}", parent.display()))?;
        let text = serde_json::to_string_pretty(payload)
            .map_err(|err| format!("cannot serialize marker: {err}"))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|err| format!("cannot write {}: {err}", tmp.display()))?;
        std::fs::rename(&tmp, &path)
            .map_err(|err| format!("cannot finalize {}: {err}", path.display()))
    }

    pub fn read_marker<T: DeserializeOwned>(&self, stage: &str, item: &str) -> Option<T> {
        let text = std::fs::read_to_string(self.status_path(stage, item)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Items marked done for a stage, sorted.
    pub fn done_items(&self, stage: &str) -> Vec<String> {
        let dir = self.root.join("status").join(stage);
        let Ok(entries) = std::fs::read_dir(&dir) else { return Vec::new() };
        let mut items: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json").map(str::to_string)
            })
            .collect();
        items.sort();
        items
    }

    /// Task ids with a persisted spec, sorted.
    pub fn spec_ids(&self) -> Vec<String> {
        let Ok(entries) = std::fs::read_dir(self.specs_dir()) else { return Vec::new() };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                if name == "rejections.jsonl" {
                    return None;
                }
                name.strip_suffix(".json").map(str::to_string)
            })
            .collect();
        ids.sort();
        ids
    }

    /// Appends one event line: timestamp, stage, item, outcome, plus any
    /// extra fields. Single O_APPEND write, safe across stage workers.
    pub fn log_event(&self, stage: &str, item: &str, outcome: &str, extra: serde_json::Value) {
        let mut event = serde_json::json!({
            "ts": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            "stage": stage,
            "item": item,
            "outcome": outcome,
        });
        if let (Some(map), serde_json::Value::Object(extra)) = (event.as_object_mut(), extra) {
            for (key, value) in extra {
                map.insert(key, value);
            }
        }
        let mut line = event.to_string();
        line.push('\n');
        let result = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.events_path())
            .and_then(|mut file| file.write_all(line.as_bytes()));
        if let Err(err) = result {
            tracing::warn!("cannot append event log: {err}");
        }
    }

    /// Takes the exclusive advisory lock for this run directory. Stage
    /// commands must not run concurrently for one run_id; a held lock
    /// fails fast instead of interleaving.
    pub fn lock(&self) -> Result<RunLock, String> {
        let path = self.root.join(".lock");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(|err| format!("cannot open {}: {err}", path.display()))?;
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc != 0 {
            let err = std::io::Error::last_os_error();
            return if err.raw_os_error() == Some(libc::EWOULDBLOCK) {
                Err(format!(
                    "another command is already running for this run directory ({})",
                    self.root.display()
                ))
            } else {
                Err(format!("cannot lock {}: {err}", path.display()))
            };
        }
        Ok(RunLock { _file: file })
    }
}

/// Held advisory lock; released on drop with the file descriptor.
#[derive(Debug)]
pub struct RunLock {
    _file: File,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensure_creates_the_skeleton_idempotently() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::ensure(dir.path(), "r1").unwrap();
        assert!(run.root().join("seeds").is_dir());
        assert!(run.root().join("status").is_dir());
        let again = RunDir::ensure(dir.path(), "r1").unwrap();
        assert_eq!(again.root(), run.root());
    }

    #[test]
    fn markers_round_trip_and_gate_idempotency() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::ensure(dir.path(), "r1").unwrap();
        assert!(!run.is_done("build-envs", "task_a"));
        run.mark_done("build-envs", "task_a", &serde_json::json!({"status": "valid"})).unwrap();
        assert!(run.is_done("build-envs", "task_a"));
        let marker: serde_json::Value = run.read_marker("build-envs", "task_a").unwrap();
        assert_eq!(marker["status"], "valid");
        run.mark_done("build-envs", "task_b", &serde_json::json!({})).unwrap();
        assert_eq!(run.done_items("build-envs"), vec!["task_a", "task_b"]);
        assert_eq!(run.done_items("collect"), Vec::<String>::new());
    }

    #[test]
    fn events_append_as_parseable_lines() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::ensure(dir.path(), "r1").unwrap();
        run.log_event("seeds", "all", "completed", serde_json::json!({"count": 44}));
        run.log_event("propose", "task_a", "failed", serde_json::json!({"error": "x"}));
        let text = std::fs::read_to_string(run.events_path()).unwrap();
        let events: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0]["stage"], "seeds");
        assert_eq!(events[0]["count"], 44);
        assert_eq!(events[1]["outcome"], "failed");
        assert!(events[0]["ts"].as_str().unwrap().ends_with('Z'));
    }

    #[test]
    fn second_lock_attempt_fails_while_held() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::ensure(dir.path(), "r1").unwrap();
        let held = run.lock().unwrap();
        let err = run.lock().unwrap_err();
        assert!(err.contains("already running"), "{err}");
        drop(held);
        run.lock().unwrap();
    }

    #[test]
    fn spec_ids_skip_the_rejection_log() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::ensure(dir.path(), "r1").unwrap();
        std::fs::write(run.spec_path("task_b"), "{}").unwrap();
        std::fs::write(run.spec_path("task_a"), "{}").unwrap();
        std::fs::write(run.rejections_path(), "{}\n").unwrap();
        assert_eq!(run.spec_ids(), vec!["task_a", "task_b"]);
    }
}
