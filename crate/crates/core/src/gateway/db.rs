//! In-memory coordinators database with an optional write-through snapshot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::lifecycle::{AppId, ApplicationRecord};

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct CoordinatorsDb {
    next_id: u64,
    records: BTreeMap<AppId, ApplicationRecord>,
    #[serde(skip)]
    snapshot: Option<PathBuf>,
    #[serde(skip)]
    dirty: bool,
}

impl CoordinatorsDb {
    pub fn with_snapshot(path: PathBuf) -> Self {
        CoordinatorsDb { snapshot: Some(path), ..Default::default() }
    }

    /// Reloads a snapshot written by [`persist`](Self::persist).
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let raw = std::fs::read(path)?;
        let mut db: CoordinatorsDb =
            serde_json::from_slice(&raw).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        db.snapshot = Some(path.to_path_buf());
        Ok(db)
    }

    /// Writes the snapshot if anything changed since the last write.
    pub fn persist(&mut self) -> std::io::Result<()> {
        let Some(path) = &self.snapshot else { return Ok(()) };
        if !self.dirty {
            return Ok(());
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self).map_err(std::io::Error::other)?)?;
        std::fs::rename(&tmp, path)?;
        self.dirty = false;
        Ok(())
    }

    pub fn allocate_id(&mut self) -> AppId {
        self.next_id += 1;
        self.dirty = true;
        AppId(self.next_id)
    }

    pub fn insert(&mut self, rec: ApplicationRecord) {
        self.dirty = true;
        self.records.insert(rec.app_id, rec);
    }

    pub fn get(&self, id: AppId) -> Option<&ApplicationRecord> {
        self.records.get(&id)
    }

    pub fn get_mut(&mut self, id: AppId) -> Option<&mut ApplicationRecord> {
        let r = self.records.get_mut(&id);
        if r.is_some() {
            self.dirty = true;
        }
        r
    }

    pub fn remove(&mut self, id: AppId) -> Option<ApplicationRecord> {
        self.dirty = true;
        self.records.remove(&id)
    }

    pub fn ids(&self) -> Vec<AppId> {
        self.records.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ApplicationRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
