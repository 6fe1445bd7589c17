//! Checkpoint Manager: local-first image storage with lazy replication to a
//! remote object store.
//!
//! Every set is written as one blob per process plus a JSON manifest under
//! `<app_id>/<generation>/`. Sets written by the coordinator itself (periodic
//! or application-initiated checkpoints) are not registered in the index
//! until somebody lists or selects the application's checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloudsim::{VirtualDuration, VirtualTime};
use crate::lifecycle::AppId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("storage full: {needed} bytes needed, {free} free")]
    StorageFull { needed: u64, free: u64 },
    #[error("remote store unavailable")]
    RemoteUnavailable,
    #[error("no checkpoint for application {0}")]
    NoCheckpoint(AppId),
    #[error("unknown checkpoint {generation} for application {app}")]
    UnknownCheckpoint { app: AppId, generation: u64 },
    #[error("unknown application {0}")]
    UnknownApp(AppId),
    #[error("checkpoint {generation} of application {app} is incomplete")]
    Incomplete { app: AppId, generation: u64 },
    #[error("object {0} not found")]
    NotFound(String),
    #[error("image {0} failed its integrity check")]
    Integrity(String),
    #[error("storage io: {0}")]
    Io(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageKind {
    LocalDir,
    ObjectStore,
}

/// Minimal key/value blob contract shared by both backends.
pub trait BlobStore: Send {
    fn kind(&self) -> StorageKind;
    fn put(&mut self, key: &str, data: &[u8]) -> Result<(), StoreError>;
    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError>;
    /// Returns whether the key existed.
    fn delete(&mut self, key: &str) -> Result<bool, StoreError>;
    /// Keys starting with `prefix`, sorted.
    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError>;
    fn bytes_used(&self) -> u64;
    /// Transfer rate in bytes per virtual second.
    fn bandwidth(&self) -> u64;
    fn is_available(&self) -> bool {
        true
    }
}

/// Real directory tree. Keys map to relative paths.
#[derive(Debug)]
pub struct LocalDirStore {
    root: PathBuf,
    bandwidth: u64,
    _tmp: Option<tempfile::TempDir>,
}

impl LocalDirStore {
    pub fn open(root: impl Into<PathBuf>, bandwidth: u64) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(LocalDirStore { root, bandwidth, _tmp: None })
    }

    /// A store in a fresh temporary directory, removed on drop.
    pub fn temporary(bandwidth: u64) -> Result<Self, StoreError> {
        let tmp = tempfile::tempdir()?;
        Ok(LocalDirStore { root: tmp.path().to_path_buf(), bandwidth, _tmp: Some(tmp) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> PathBuf {
        key.split('/').fold(self.root.clone(), |p, seg| p.join(seg))
    }

    fn walk(dir: &Path, rel: &str, out: &mut Vec<String>) -> Result<(), StoreError> {
        let rd = match fs::read_dir(dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        for entry in rd {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let key = if rel.is_empty() { name } else { format!("{rel}/{name}") };
            if entry.file_type()?.is_dir() {
                Self::walk(&entry.path(), &key, out)?;
            } else {
                out.push(key);
            }
        }
        Ok(())
    }
}

impl BlobStore for LocalDirStore {
    fn kind(&self) -> StorageKind {
        StorageKind::LocalDir
    }

    fn put(&mut self, key: &str, data: &[u8]) -> Result<(), StoreError> {
        let path = self.path(key);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        // write-then-rename keeps each key atomic
        let tmp = path.with_extension("partial");
        fs::write(&tmp, data)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        fs::read(self.path(key)).map_err(|e| match e.kind() {
            ErrorKind::NotFound => StoreError::NotFound(key.to_string()),
            _ => e.into(),
        })
    }

    fn delete(&mut self, key: &str) -> Result<bool, StoreError> {
        let path = self.path(key);
        match fs::remove_file(&path) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(false),
            Err(e) => return Err(e.into()),
        }
        // prune empty parents up to the root
        let mut dir = path.parent().map(Path::to_path_buf);
        while let Some(d) = dir {
            if d == self.root || fs::remove_dir(&d).is_err() {
                break;
            }
            dir = d.parent().map(Path::to_path_buf);
        }
        Ok(true)
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        Self::walk(&self.root, "", &mut out)?;
        out.retain(|k| k.starts_with(prefix) && !k.ends_with(".partial"));
        out.sort();
        Ok(out)
    }

    fn bytes_used(&self) -> u64 {
        self.list("")
            .unwrap_or_default()
            .iter()
            .filter_map(|k| fs::metadata(self.path(k)).ok())
            .map(|m| m.len())
            .sum()
    }

    fn bandwidth(&self) -> u64 {
        self.bandwidth
    }
}

/// Handle that switches an [`ObjectStore`] on and off after it has been boxed.
#[derive(Debug, Clone)]
pub struct OutageSwitch(Arc<AtomicBool>);

impl OutageSwitch {
    pub fn set_available(&self, up: bool) {
        self.0.store(up, Ordering::SeqCst);
    }

    pub fn is_available(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// In-process object store with a bandwidth model.
#[derive(Debug)]
pub struct ObjectStore {
    objects: BTreeMap<String, Vec<u8>>,
    bandwidth: u64,
    up: Arc<AtomicBool>,
}

impl ObjectStore {
    pub fn new(bandwidth: u64) -> Self {
        ObjectStore { objects: BTreeMap::new(), bandwidth, up: Arc::new(AtomicBool::new(true)) }
    }

    pub fn outage_switch(&self) -> OutageSwitch {
        OutageSwitch(self.up.clone())
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.up.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(StoreError::RemoteUnavailable)
        }
    }
}

impl BlobStore for ObjectStore {
    fn kind(&self) -> StorageKind {
        StorageKind::ObjectStore
    }

    fn put(&mut self, key: &str, data: &[u8]) -> Result<(), StoreError> {
        self.check()?;
        self.objects.insert(key.to_string(), data.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        self.check()?;
        self.objects.get(key).cloned().ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    fn delete(&mut self, key: &str) -> Result<bool, StoreError> {
        self.check()?;
        Ok(self.objects.remove(key).is_some())
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        self.check()?;
        Ok(self.objects.keys().filter(|k| k.starts_with(prefix)).cloned().collect())
    }

    fn bytes_used(&self) -> u64 {
        self.objects.values().map(|v| v.len() as u64).sum()
    }

    fn bandwidth(&self) -> u64 {
        self.bandwidth
    }

    fn is_available(&self) -> bool {
        self.up.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub vm_index: u32,
    pub key: String,
    pub size_bytes: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointSet {
    pub app_id: AppId,
    pub generation: u64,
    pub created_at: VirtualTime,
    /// Number of images the set needs before it can be restored.
    pub expected_images: usize,
    pub images: Vec<ImageRef>,
    pub replicated: bool,
}

impl CheckpointSet {
    pub fn size_bytes(&self) -> u64 {
        self.images.iter().map(|i| i.size_bytes).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.images.len() == self.expected_images
    }
}

pub fn blob_key(app: AppId, generation: u64, vm_index: u32) -> String {
    format!("{}/{}/{}", app.0, generation, vm_index)
}

fn manifest_key(app: AppId, generation: u64) -> String {
    format!("{}/{}/manifest.json", app.0, generation)
}

fn app_prefix(app: AppId) -> String {
    format!("{}/", app.0)
}

/// Virtual time to move `bytes` at `bandwidth` bytes per second, rounded up
/// to the next millisecond.
pub fn transfer_time(bytes: u64, bandwidth: u64) -> VirtualDuration {
    if bandwidth == 0 {
        return VirtualDuration::ZERO;
    }
    VirtualDuration::from_millis((bytes as u128 * 1000).div_ceil(bandwidth as u128) as u64)
}

pub struct CheckpointManager {
    local: Box<dyn BlobStore>,
    remote: Box<dyn BlobStore>,
    quota_bytes: Option<u64>,
    apps: BTreeMap<AppId, u64>,
    index: BTreeMap<AppId, BTreeMap<u64, CheckpointSet>>,
    remote_busy_until: VirtualTime,
    remote_bytes_moved: u64,
}

impl std::fmt::Debug for CheckpointManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CheckpointManager")
            .field("apps", &self.apps.len())
            .field("registered", &self.index.values().map(BTreeMap::len).sum::<usize>())
            .finish()
    }
}

impl CheckpointManager {
    pub fn new(local: Box<dyn BlobStore>, remote: Box<dyn BlobStore>) -> Self {
        CheckpointManager {
            local,
            remote,
            quota_bytes: None,
            apps: BTreeMap::new(),
            index: BTreeMap::new(),
            remote_busy_until: VirtualTime::ZERO,
            remote_bytes_moved: 0,
        }
    }

    /// Temporary local directory plus an in-memory remote store.
    pub fn in_temp_dir(local_bw: u64, remote_bw: u64) -> Result<(Self, OutageSwitch), StoreError> {
        let remote = ObjectStore::new(remote_bw);
        let sw = remote.outage_switch();
        Ok((Self::new(Box::new(LocalDirStore::temporary(local_bw)?), Box::new(remote)), sw))
    }

    pub fn with_quota(mut self, quota_bytes: Option<u64>) -> Self {
        self.quota_bytes = quota_bytes;
        self
    }

    pub fn local(&self) -> &dyn BlobStore {
        self.local.as_ref()
    }

    pub fn remote(&self) -> &dyn BlobStore {
        self.remote.as_ref()
    }

    /// Cumulative bytes copied to or from the remote store.
    pub fn remote_bytes_moved(&self) -> u64 {
        self.remote_bytes_moved
    }

    pub fn open_app(&mut self, app: AppId) {
        self.apps.entry(app).or_insert(0);
    }

    pub fn knows_app(&self, app: AppId) -> bool {
        self.apps.contains_key(&app)
    }

    /// Number of sets currently registered for `app`, without discovery.
    pub fn registered_count(&self, app: AppId) -> usize {
        self.index.get(&app).map_or(0, BTreeMap::len)
    }

    /// Reserves the next generation number for `app`.
    pub fn reserve_generation(&mut self, app: AppId) -> Result<u64, StoreError> {
        let next = self.apps.get_mut(&app).ok_or(StoreError::UnknownApp(app))?;
        *next += 1;
        Ok(*next)
    }

    fn write_manifest(&mut self, set: &CheckpointSet) -> Result<(), StoreError> {
        let doc = serde_json::to_vec_pretty(set).map_err(|e| StoreError::Io(e.to_string()))?;
        self.local.put(&manifest_key(set.app_id, set.generation), &doc)
    }

    fn read_manifest(&self, app: AppId, generation: u64) -> Result<CheckpointSet, StoreError> {
        let raw = self.local.get(&manifest_key(app, generation))?;
        serde_json::from_slice(&raw).map_err(|e| StoreError::Io(e.to_string()))
    }

    fn check_quota(&self, extra: u64) -> Result<(), StoreError> {
        if let Some(q) = self.quota_bytes {
            let used = self.local.bytes_used();
            let free = q.saturating_sub(used);
            if extra > free {
                return Err(StoreError::StorageFull { needed: extra, free });
            }
        }
        Ok(())
    }

    fn write_images(
        &mut self,
        set: &mut CheckpointSet,
        images: &[(u32, Vec<u8>)],
    ) -> Result<(), StoreError> {
        for (idx, data) in images {
            let key = blob_key(set.app_id, set.generation, *idx);
            self.local.put(&key, data)?;
            set.images.retain(|r| r.vm_index != *idx);
            set.images.push(ImageRef {
                vm_index: *idx,
                key,
                size_bytes: data.len() as u64,
                crc32: crc32fast::hash(data),
            });
        }
        set.images.sort_by_key(|r| r.vm_index);
        self.write_manifest(set)
    }

    /// Writes a coordinator-produced set to the local store. The set is not
    /// registered with the index until it is listed or selected.
    pub fn store_local(
        &mut self,
        app: AppId,
        generation: Option<u64>,
        blobs: &[Vec<u8>],
        now: VirtualTime,
    ) -> Result<CheckpointSet, StoreError> {
        if !self.knows_app(app) {
            return Err(StoreError::UnknownApp(app));
        }
        self.check_quota(blobs.iter().map(|b| b.len() as u64).sum())?;
        let generation = match generation {
            Some(g) => g,
            None => self.reserve_generation(app)?,
        };
        let mut set = CheckpointSet {
            app_id: app,
            generation,
            created_at: now,
            expected_images: blobs.len(),
            images: Vec::new(),
            replicated: false,
        };
        let images: Vec<(u32, Vec<u8>)> = blobs.iter().enumerate().map(|(i, b)| (i as u32, b.clone())).collect();
        self.write_images(&mut set, &images)?;
        Ok(set)
    }

    /// Registers externally supplied images. Repeated uploads with the same
    /// `generation` add images to one set until `expected` are present.
    pub fn upload(
        &mut self,
        app: AppId,
        generation: Option<u64>,
        expected: usize,
        images: &[(u32, Vec<u8>)],
        now: VirtualTime,
    ) -> Result<CheckpointSet, StoreError> {
        if !self.knows_app(app) {
            return Err(StoreError::UnknownApp(app));
        }
        self.check_quota(images.iter().map(|(_, b)| b.len() as u64).sum())?;
        self.discover(app)?;
        let mut set = match generation.and_then(|g| self.index.get(&app).and_then(|m| m.get(&g)).cloned()) {
            Some(s) => s,
            None => {
                let generation = match generation {
                    Some(g) => {
                        let next = self.apps.get_mut(&app).expect("known");
                        *next = (*next).max(g);
                        g
                    }
                    None => self.reserve_generation(app)?,
                };
                CheckpointSet {
                    app_id: app,
                    generation,
                    created_at: now,
                    expected_images: expected,
                    images: Vec::new(),
                    replicated: false,
                }
            }
        };
        set.expected_images = set.expected_images.max(expected);
        self.write_images(&mut set, images)?;
        self.index.entry(app).or_default().insert(set.generation, set.clone());
        Ok(set)
    }

    /// Registers every manifest on the local store that the index has not
    /// seen yet.
    pub fn discover(&mut self, app: AppId) -> Result<(), StoreError> {
        let keys = self.local.list(&app_prefix(app))?;
        for key in keys.iter().filter(|k| k.ends_with("/manifest.json")) {
            let Some(generation) = key.split('/').nth(1).and_then(|g| g.parse::<u64>().ok()) else {
                continue;
            };
            let known = self.index.get(&app).is_some_and(|m| m.contains_key(&generation));
            if !known {
                let set = self.read_manifest(app, generation)?;
                self.index.entry(app).or_default().insert(generation, set);
            }
        }
        Ok(())
    }

    /// Metadata sorted by generation. Registers lazily written sets.
    pub fn list(&mut self, app: AppId) -> Result<Vec<CheckpointSet>, StoreError> {
        if !self.knows_app(app) {
            return Err(StoreError::UnknownApp(app));
        }
        self.discover(app)?;
        Ok(self.index.get(&app).map(|m| m.values().cloned().collect()).unwrap_or_default())
    }

    /// The set with the given generation, or the highest complete one.
    pub fn select_image(&mut self, app: AppId, generation: Option<u64>) -> Result<CheckpointSet, StoreError> {
        let sets = self.list(app)?;
        match generation {
            Some(g) => {
                let set = sets
                    .into_iter()
                    .find(|s| s.generation == g)
                    .ok_or(StoreError::UnknownCheckpoint { app, generation: g })?;
                if !set.is_complete() {
                    return Err(StoreError::Incomplete { app, generation: g });
                }
                Ok(set)
            }
            None => sets.into_iter().rev().find(CheckpointSet::is_complete).ok_or(StoreError::NoCheckpoint(app)),
        }
    }

    /// Reads one image, local copy first, falling back to the remote copy.
    pub fn fetch_image(&mut self, image: &ImageRef) -> Result<Vec<u8>, StoreError> {
        if let Ok(data) = self.local.get(&image.key) {
            if crc32fast::hash(&data) == image.crc32 && data.len() as u64 == image.size_bytes {
                return Ok(data);
            }
        }
        let data = self.remote.get(&image.key)?;
        if crc32fast::hash(&data) != image.crc32 || data.len() as u64 != image.size_bytes {
            return Err(StoreError::Integrity(image.key.clone()));
        }
        self.remote_bytes_moved += data.len() as u64;
        Ok(data)
    }

    /// All images of a set in vm_index order.
    pub fn fetch_images(&mut self, set: &CheckpointSet) -> Result<Vec<Vec<u8>>, StoreError> {
        set.images.iter().map(|i| self.fetch_image(i)).collect()
    }

    /// Books the remote link for a set's transfer and returns when it ends.
    /// Transfers are served one at a time in request order. `None` means the
    /// set is already replicated.
    pub fn begin_replication(
        &mut self,
        app: AppId,
        generation: u64,
        now: VirtualTime,
    ) -> Result<Option<VirtualTime>, StoreError> {
        let set = self.read_manifest(app, generation)?;
        if set.replicated {
            return Ok(None);
        }
        let start = self.remote_busy_until.max(now);
        let done = start + transfer_time(set.size_bytes(), self.remote.bandwidth());
        self.remote_busy_until = done;
        Ok(Some(done))
    }

    /// Copies a set's blobs to the remote store. `Ok(false)` if the set
    /// disappeared meanwhile.
    pub fn complete_replication(&mut self, app: AppId, generation: u64) -> Result<bool, StoreError> {
        let mut set = match self.read_manifest(app, generation) {
            Ok(s) => s,
            Err(StoreError::NotFound(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        if set.replicated {
            return Ok(true);
        }
        if !self.remote.is_available() {
            return Err(StoreError::RemoteUnavailable);
        }
        for img in &set.images {
            let data = self.local.get(&img.key)?;
            self.remote.put(&img.key, &data)?;
            self.remote_bytes_moved += data.len() as u64;
        }
        set.replicated = true;
        self.write_manifest(&set)?;
        if let Some(entry) = self.index.get_mut(&app).and_then(|m| m.get_mut(&generation)) {
            entry.replicated = true;
        }
        Ok(true)
    }

    /// Removes one set from both stores and the index.
    pub fn delete_set(&mut self, app: AppId, generation: u64) -> Result<(), StoreError> {
        self.discover(app)?;
        let prefix = format!("{}/{}/", app.0, generation);
        let local = self.local.list(&prefix)?;
        let known = self.index.get_mut(&app).and_then(|m| m.remove(&generation)).is_some();
        if !known && local.is_empty() {
            return Err(StoreError::UnknownCheckpoint { app, generation });
        }
        for k in local {
            self.local.delete(&k)?;
        }
        if self.remote.is_available() {
            for k in self.remote.list(&prefix)? {
                self.remote.delete(&k)?;
            }
        }
        Ok(())
    }

    /// Removes every blob and manifest of `app` and forgets it. Returns the
    /// number of keys removed. The remote side must be reachable.
    pub fn delete_all(&mut self, app: AppId) -> Result<usize, StoreError> {
        let prefix = app_prefix(app);
        let mut removed = 0;
        if !self.remote.is_available() {
            return Err(StoreError::RemoteUnavailable);
        }
        for k in self.remote.list(&prefix)? {
            removed += self.remote.delete(&k)? as usize;
        }
        for k in self.local.list(&prefix)? {
            removed += self.local.delete(&k)? as usize;
        }
        self.index.remove(&app);
        self.apps.remove(&app);
        Ok(removed)
    }

    /// (local, remote) key counts under the application's prefix.
    pub fn key_counts(&self, app: AppId) -> (usize, usize) {
        let p = app_prefix(app);
        (
            self.local.list(&p).map(|v| v.len()).unwrap_or(0),
            self.remote.list(&p).map(|v| v.len()).unwrap_or(0),
        )
    }
}
