use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use cdmp_core::workspace::{load, save, Workspace, FILE_EXTENSION};

use crate::error::ApiError;

/// A workspace value and its revision; revisions start at 1 and grow by one
/// per committed mutation.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub workspace: Arc<Workspace>,
    pub revision: u64,
}

/// In-memory workspaces, optionally mirrored to `<data_dir>/<id>.cdmpws.json`.
#[derive(Debug, Default)]
pub struct Store {
    data_dir: Option<PathBuf>,
    entries: RwLock<BTreeMap<String, Snapshot>>,
    generated: AtomicU64,
}

/// Ids double as file names, so keep them to a safe alphabet.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl Store {
    pub fn in_memory() -> Self {
        Store::default()
    }

    /// Open `data_dir`, loading every workspace file found there.
    pub fn open(data_dir: PathBuf) -> Result<Self, String> {
        fs::create_dir_all(&data_dir).map_err(|e| format!("{}: {e}", data_dir.display()))?;
        let mut entries = BTreeMap::new();
        let dir = fs::read_dir(&data_dir).map_err(|e| format!("{}: {e}", data_dir.display()))?;
        let mut paths: Vec<PathBuf> = dir.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for path in paths {
            let is_ws = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(FILE_EXTENSION));
            if !is_ws {
                continue;
            }
            let ws = load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            entries.insert(ws.id.clone(), Snapshot { workspace: Arc::new(ws), revision: 1 });
        }
        Ok(Store { data_dir: Some(data_dir), entries: RwLock::new(entries), generated: AtomicU64::new(0) })
    }

    pub fn get(&self, id: &str) -> Result<Snapshot, ApiError> {
        let entries = self.entries.read().expect("store lock poisoned");
        entries.get(id).cloned().ok_or_else(|| ApiError::not_found("workspace", id))
    }

    /// Ids and revisions of every workspace, sorted by id.
    pub fn list(&self) -> Vec<(String, u64)> {
        let entries = self.entries.read().expect("store lock poisoned");
        entries.iter().map(|(id, s)| (id.clone(), s.revision)).collect()
    }

    fn persist(&self, ws: &Workspace) -> Result<(), ApiError> {
        if let Some(dir) = &self.data_dir {
            let path = dir.join(format!("{}{FILE_EXTENSION}", ws.id));
            save(ws, &path).map_err(ApiError::from)?;
        }
        Ok(())
    }

    /// Fresh id of the form `ws-<n>` not used yet.
    pub fn generate_id(&self) -> String {
        let entries = self.entries.read().expect("store lock poisoned");
        loop {
            let n = self.generated.fetch_add(1, Ordering::Relaxed) + 1;
            let id = format!("ws-{n}");
            if !entries.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn create(&self, ws: Workspace) -> Result<Snapshot, ApiError> {
        if !valid_id(&ws.id) {
            return Err(ApiError::bad_request(format!("workspace id `{}` must use [A-Za-z0-9._-]", ws.id)));
        }
        let mut entries = self.entries.write().expect("store lock poisoned");
        if entries.contains_key(&ws.id) {
            return Err(ApiError::conflict(format!("workspace `{}` already exists", ws.id)));
        }
        self.persist(&ws)?;
        let snap = Snapshot { workspace: Arc::new(ws), revision: 1 };
        entries.insert(snap.workspace.id.clone(), snap.clone());
        Ok(snap)
    }

    /// Check-and-set: apply `f` to the current value if its revision matches
    /// `expected` (when given). `f` returns the new value and extra output.
    pub fn commit<T>(
        &self,
        id: &str,
        expected: Option<u64>,
        f: impl FnOnce(&Workspace) -> Result<(Workspace, T), ApiError>,
    ) -> Result<(Snapshot, T), ApiError> {
        let mut entries = self.entries.write().expect("store lock poisoned");
        let current = entries.get(id).ok_or_else(|| ApiError::not_found("workspace", id))?;
        if let Some(rev) = expected {
            if rev != current.revision {
                return Err(ApiError::conflict(format!(
                    "revision {rev} is stale; workspace `{id}` is at revision {}",
                    current.revision
                ))
                .with_details(serde_json::json!({ "current_revision": current.revision })));
            }
        }
        let (next, out) = f(&current.workspace)?;
        if next.id != id {
            return Err(ApiError::bad_request(format!("workspace id `{}` does not match `{id}`", next.id)));
        }
        self.persist(&next)?;
        let snap = Snapshot { workspace: Arc::new(next), revision: current.revision + 1 };
        entries.insert(id.to_string(), snap.clone());
        Ok((snap, out))
    }
}
