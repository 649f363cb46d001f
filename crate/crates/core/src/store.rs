//! Persistence boundary. Everything lives under one state directory as JSON files:
//!
//! ```text
//! tools/<name>.json            manifests
//! bindings/<name>.json         bindings
//! tests/<tool>.json            test cases (all statuses)
//! state/rounds.jsonl           evaluation round log
//! state/profiles/<tool>.json   materialized reliability profiles
//! state/checks/round-<id>.json per-case check results
//! state/submissions/<id>.json  community submissions
//! state/audit.jsonl            review decisions
//! state/traces/<id>.jsonl      execution traces (+ blobs/)
//! state/runs/<run_id>.json     agent runs
//! ```
//!
//! Multi-file updates go through a commit journal (`state/commit.json`): the full set of
//! writes is recorded first, then applied, then the journal is removed. A journal left
//! behind by a crash is replayed on open.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const JOURNAL: &str = "state/commit.json";
pub const AUDIT_LOG: &str = "state/audit.jsonl";

pub fn trace_path(trace_id: &str) -> String {
    format!("state/traces/{trace_id}.jsonl")
}

pub fn run_path(run_id: &str) -> String {
    format!("state/runs/{run_id}.json")
}

pub fn submission_path(id: &str) -> String {
    format!("state/submissions/{id}.json")
}

/// Ids embedded in paths: letters, digits, `-`, `_` and `.` only.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// File-like storage addressed by `/`-separated relative paths.
pub trait Storage: Send + Sync {
    fn read(&self, path: &str) -> io::Result<Option<Vec<u8>>>;
    /// Replaces the file in one step (readers never see a partial write).
    fn write(&self, path: &str, data: &[u8]) -> io::Result<()>;
    fn remove(&self, path: &str) -> io::Result<()>;
    /// File names directly inside `dir`, sorted. Missing directory is empty.
    fn list(&self, dir: &str) -> io::Result<Vec<String>>;
    /// Every file path under the root, sorted.
    fn list_all(&self) -> io::Result<Vec<String>>;
}

fn check_path(path: &str) -> io::Result<()> {
    let bad = path.is_empty()
        || path.starts_with('/')
        || path
            .split('/')
            .any(|seg| seg.is_empty() || seg == "." || seg == "..");
    if bad {
        Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("invalid storage path {path:?}"),
        ))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FsStorage {
    root: PathBuf,
}

impl FsStorage {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, path: &str) -> io::Result<PathBuf> {
        check_path(path)?;
        Ok(self.root.join(path))
    }
}

impl Storage for FsStorage {
    fn read(&self, path: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.resolve(path)?) {
            Ok(data) => Ok(Some(data)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn write(&self, path: &str, data: &[u8]) -> io::Result<()> {
        let target = self.resolve(path)?;
        let dir = target.parent().expect("resolved paths have a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            target
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("file")
        ));
        fs::write(&tmp, data)?;
        fs::rename(&tmp, &target)
    }

    fn remove(&self, path: &str) -> io::Result<()> {
        match fs::remove_file(self.resolve(path)?) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    fn list(&self, dir: &str) -> io::Result<Vec<String>> {
        let path = self.resolve(dir)?;
        let entries = match fs::read_dir(&path) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    if !name.starts_with('.') {
                        names.push(name.to_string());
                    }
                }
            }
        }
        names.sort();
        Ok(names)
    }

    fn list_all(&self) -> io::Result<Vec<String>> {
        fn walk(base: &Path, rel: &str, out: &mut Vec<String>) -> io::Result<()> {
            let entries = match fs::read_dir(base) {
                Ok(e) => e,
                Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
                Err(e) => return Err(e),
            };
            for entry in entries {
                let entry = entry?;
                let Some(name) = entry.file_name().to_str().map(str::to_string) else {
                    continue;
                };
                if name.starts_with('.') {
                    continue;
                }
                let child = if rel.is_empty() {
                    name.clone()
                } else {
                    format!("{rel}/{name}")
                };
                if entry.file_type()?.is_dir() {
                    walk(&entry.path(), &child, out)?;
                } else {
                    out.push(child);
                }
            }
            Ok(())
        }
        let mut out = Vec::new();
        walk(&self.root, "", &mut out)?;
        out.sort();
        Ok(out)
    }
}

#[derive(Debug, Default)]
pub struct MemStorage {
    files: Mutex<BTreeMap<String, Vec<u8>>>,
}

impl MemStorage {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Storage for MemStorage {
    fn read(&self, path: &str) -> io::Result<Option<Vec<u8>>> {
        check_path(path)?;
        Ok(self.files.lock().unwrap().get(path).cloned())
    }

    fn write(&self, path: &str, data: &[u8]) -> io::Result<()> {
        check_path(path)?;
        self.files
            .lock()
            .unwrap()
            .insert(path.to_string(), data.to_vec());
        Ok(())
    }

    fn remove(&self, path: &str) -> io::Result<()> {
        self.files.lock().unwrap().remove(path);
        Ok(())
    }

    fn list(&self, dir: &str) -> io::Result<Vec<String>> {
        let prefix = format!("{dir}/");
        Ok(self
            .files
            .lock()
            .unwrap()
            .keys()
            .filter_map(|k| k.strip_prefix(&prefix))
            .filter(|rest| !rest.contains('/'))
            .map(str::to_string)
            .collect())
    }

    fn list_all(&self) -> io::Result<Vec<String>> {
        Ok(self.files.lock().unwrap().keys().cloned().collect())
    }
}

/// Wraps a storage and fails every mutation once a budget of successful
/// mutations is spent. Reads keep working.
pub struct FaultyStorage<S> {
    inner: S,
    remaining: AtomicUsize,
}

impl<S: Storage> FaultyStorage<S> {
    pub fn new(inner: S, successful_writes: usize) -> Self {
        Self {
            inner,
            remaining: AtomicUsize::new(successful_writes),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn set_budget(&self, successful_writes: usize) {
        self.remaining.store(successful_writes, Ordering::SeqCst);
    }

    fn spend(&self) -> io::Result<()> {
        self.remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .map(|_| ())
            .map_err(|_| io::Error::other("injected storage fault"))
    }
}

impl<S: Storage> Storage for FaultyStorage<S> {
    fn read(&self, path: &str) -> io::Result<Option<Vec<u8>>> {
        self.inner.read(path)
    }

    fn write(&self, path: &str, data: &[u8]) -> io::Result<()> {
        self.spend()?;
        self.inner.write(path, data)
    }

    fn remove(&self, path: &str) -> io::Result<()> {
        self.spend()?;
        self.inner.remove(path)
    }

    fn list(&self, dir: &str) -> io::Result<Vec<String>> {
        self.inner.list(dir)
    }

    fn list_all(&self) -> io::Result<Vec<String>> {
        self.inner.list_all()
    }
}

impl<S: Storage + ?Sized> Storage for Arc<S> {
    fn read(&self, path: &str) -> io::Result<Option<Vec<u8>>> {
        (**self).read(path)
    }
    fn write(&self, path: &str, data: &[u8]) -> io::Result<()> {
        (**self).write(path, data)
    }
    fn remove(&self, path: &str) -> io::Result<()> {
        (**self).remove(path)
    }
    fn list(&self, dir: &str) -> io::Result<Vec<String>> {
        (**self).list(dir)
    }
    fn list_all(&self) -> io::Result<Vec<String>> {
        (**self).list_all()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt state file {path}: {message}")]
    Corrupt { path: String, message: String },
}

impl StoreError {
    pub fn corrupt(path: &str, message: impl ToString) -> Self {
        StoreError::Corrupt {
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct JournalEntry {
    path: String,
    /// None removes the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contents: Option<String>,
}

/// A set of file writes applied all-or-nothing via the journal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batch {
    entries: Vec<JournalEntry>,
}

impl Batch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, path: impl Into<String>, contents: impl Into<String>) -> &mut Self {
        self.entries.push(JournalEntry {
            path: path.into(),
            contents: Some(contents.into()),
        });
        self
    }

    pub fn remove(&mut self, path: impl Into<String>) -> &mut Self {
        self.entries.push(JournalEntry {
            path: path.into(),
            contents: None,
        });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Contents this batch will leave at `path`, if it touches it.
    pub fn pending(&self, path: &str) -> Option<Option<&str>> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.path == path)
            .map(|e| e.contents.as_deref())
    }
}

/// Typed access to the state directory. Mutations that must be atomic are
/// serialized by an internal lock.
pub struct Store {
    storage: Arc<dyn Storage>,
    write_lock: Mutex<()>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").finish_non_exhaustive()
    }
}

impl Store {
    /// Opens the store, replaying any commit journal left by an interrupted write.
    pub fn open(storage: Arc<dyn Storage>) -> Result<Self, StoreError> {
        let store = Self {
            storage,
            write_lock: Mutex::new(()),
        };
        store.recover()?;
        Ok(store)
    }

    pub fn storage(&self) -> &Arc<dyn Storage> {
        &self.storage
    }

    /// Holds the writer lock for a read-modify-commit sequence.
    pub fn lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.write_lock.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn recover(&self) -> Result<bool, StoreError> {
        let Some(raw) = self.storage.read(JOURNAL)? else {
            return Ok(false);
        };
        let entries: Vec<JournalEntry> = match serde_json::from_slice(&raw) {
            Ok(e) => e,
            // A torn journal means the commit never started applying.
            Err(_) => {
                self.storage.remove(JOURNAL)?;
                return Ok(false);
            }
        };
        self.apply(&entries)?;
        Ok(true)
    }

    fn apply(&self, entries: &[JournalEntry]) -> Result<(), StoreError> {
        for e in entries {
            match &e.contents {
                Some(c) => self.storage.write(&e.path, c.as_bytes())?,
                None => self.storage.remove(&e.path)?,
            }
        }
        self.storage.remove(JOURNAL)?;
        Ok(())
    }

    /// Applies the batch atomically. Callers should hold [`Store::lock`] if the
    /// batch was computed from state they read.
    pub fn commit(&self, batch: &Batch) -> Result<(), StoreError> {
        if batch.is_empty() {
            return Ok(());
        }
        if let [single] = batch.entries.as_slice() {
            return match &single.contents {
                Some(c) => Ok(self.storage.write(&single.path, c.as_bytes())?),
                None => Ok(self.storage.remove(&single.path)?),
            };
        }
        let journal = serde_json::to_vec(&batch.entries).expect("journal serializes");
        self.storage.write(JOURNAL, &journal)?;
        self.apply(&batch.entries)
    }

    pub fn read_string(&self, path: &str) -> Result<Option<String>, StoreError> {
        match self.storage.read(path)? {
            None => Ok(None),
            Some(bytes) => String::from_utf8(bytes)
                .map(Some)
                .map_err(|e| StoreError::corrupt(path, e)),
        }
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
    ) -> Result<Option<T>, StoreError> {
        match self.storage.read(path)? {
            None => Ok(None),
            Some(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| StoreError::corrupt(path, e)),
        }
    }

    pub fn read_jsonl<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
    ) -> Result<Vec<T>, StoreError> {
        let Some(text) = self.read_string(path)? else {
            return Ok(Vec::new());
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| StoreError::corrupt(path, format!("line {}: {e}", i + 1)))
            })
            .collect()
    }

    /// Contents of a JSONL file with one more record appended.
    pub fn appended<T: Serialize>(&self, path: &str, record: &T) -> Result<String, StoreError> {
        let mut text = self.read_string(path)?.unwrap_or_default();
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&serde_json::to_string(record).expect("record serializes"));
        text.push('\n');
        Ok(text)
    }

    pub fn list(&self, dir: &str) -> Result<Vec<String>, StoreError> {
        Ok(self.storage.list(dir)?)
    }

    pub fn exists(&self, path: &str) -> Result<bool, StoreError> {
        Ok(self.storage.read(path)?.is_some())
    }

    /// Digest over every file path and its contents.
    pub fn state_hash(&self) -> Result<String, StoreError> {
        let mut hasher = Sha256::new();
        for path in self.storage.list_all()? {
            let data = self.storage.read(&path)?.unwrap_or_default();
            hasher.update(path.as_bytes());
            hasher.update([0]);
            hasher.update((data.len() as u64).to_le_bytes());
            hasher.update(&data);
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Pretty JSON with a trailing newline, for hand-diffable state files.
pub fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch3() -> Batch {
        let mut b = Batch::new();
        b.write("state/a.json", "1")
            .write("state/b.json", "2")
            .write("state/c.json", "3");
        b
    }

    #[test]
    fn fs_write_read_list() {
        let dir = tempfile::tempdir().unwrap();
        let fs = FsStorage::new(dir.path());
        fs.write("tools/x.json", b"{}").unwrap();
        fs.write("tools/a.json", b"[]").unwrap();
        assert_eq!(fs.read("tools/x.json").unwrap().unwrap(), b"{}");
        assert_eq!(fs.read("tools/none.json").unwrap(), None);
        assert_eq!(fs.list("tools").unwrap(), ["a.json", "x.json"]);
        assert_eq!(fs.list("nope").unwrap(), Vec::<String>::new());
        assert_eq!(fs.list_all().unwrap(), ["tools/a.json", "tools/x.json"]);
        assert!(fs.write("../escape", b"").is_err());
    }

    #[test]
    fn batch_is_all_or_nothing_under_faults() {
        let batch = batch3();
        // journal write + 3 applies + journal removal = 5 mutations
        for budget in 0..6 {
            let faulty = Arc::new(FaultyStorage::new(MemStorage::new(), budget));
            let store = Store::open(faulty.clone()).unwrap();
            let before = store.state_hash().unwrap();
            let res = store.commit(&batch);
            assert_eq!(res.is_ok(), budget >= 5, "budget {budget}");
            faulty.set_budget(usize::MAX);
            let reopened = Store::open(faulty.clone()).unwrap();
            let files = faulty.inner().list_all().unwrap();
            if budget == 0 {
                assert_eq!(reopened.state_hash().unwrap(), before);
            } else {
                assert_eq!(
                    files,
                    ["state/a.json", "state/b.json", "state/c.json"],
                    "budget {budget}"
                );
            }
        }
    }

    #[test]
    fn jsonl_helpers() {
        let store = Store::open(Arc::new(MemStorage::new())).unwrap();
        let text = store
            .appended("state/log.jsonl", &serde_json::json!({"n": 1}))
            .unwrap();
        store
            .storage()
            .write("state/log.jsonl", text.as_bytes())
            .unwrap();
        let text = store
            .appended("state/log.jsonl", &serde_json::json!({"n": 2}))
            .unwrap();
        store
            .storage()
            .write("state/log.jsonl", text.as_bytes())
            .unwrap();
        let rows: Vec<serde_json::Value> = store.read_jsonl("state/log.jsonl").unwrap();
        assert_eq!(rows.len(), 2);
        store
            .storage()
            .write("state/log.jsonl", b"{}\nnot json\n")
            .unwrap();
        let err = store
            .read_jsonl::<serde_json::Value>("state/log.jsonl")
            .unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
