//! One orchestrator instance: configuration, the event loop over virtual
//! time, the background worker pool and the instrumentation the experiment
//! harness reads (network meter, trace log).
//!
//! All state is owned by [`Service`]; the HTTP front-end wraps it in a mutex.
//! Request handling lives in [`crate::gateway`], application orchestration
//! in [`crate::appmgr`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ckptstore::{CheckpointManager, LocalDirStore, ObjectStore, OutageSwitch, StoreError};
use crate::cloudsim::{
    load_profiles, BackendProfile, CloudEvent, CloudManager, CloudOutcome, FailureTarget, VirtualClock,
    VirtualDuration, VirtualTime, VmId, VmStatus, SNOOZE_SIM,
};
use crate::gateway::CoordinatorsDb;
use crate::lifecycle::{AppId, AppState, CheckpointMode};
use crate::monitor::{classify, heartbeat_round, BroadcastTree, Classification, HealthReport, HeartbeatParams, NodeView};
use crate::provision::{ConnectionBudget, ConnectionCache, SlotPool};
use crate::workerrt::{Coordinator, CoordinatorId, Phase};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

fn secs(s: f64, what: &str) -> Result<VirtualDuration, ConfigError> {
    VirtualDuration::try_from_secs_f64(s).ok_or_else(|| ConfigError::Invalid(format!("{what} must be >= 0")))
}

/// Keys of the `[service]` table. Durations are in virtual seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceKeys {
    pub name: String,
    pub default_backend: String,
    pub worker_pool_capacity: usize,
    pub ssh_max_concurrent: usize,
    pub ssh_command_latency_s: f64,
    pub ssh_setup_s: f64,
    pub ssh_reuse: bool,
    pub ssh_global_limit: bool,
    pub exec_bytes_per_s: u64,
    pub heartbeat_period_s: f64,
    pub link_latency_s: f64,
    pub hook_cost_s: f64,
    pub hook_timeout_s: f64,
    pub probe_timeout_s: f64,
    pub local_bytes_per_s: u64,
    pub remote_bytes_per_s: u64,
    pub local_quota_bytes: Option<u64>,
    pub storage_root: Option<PathBuf>,
    pub db_snapshot: Option<PathBuf>,
    pub error_grace_s: f64,
    pub vm_id_base: u64,
}

impl Default for ServiceKeys {
    fn default() -> Self {
        let ssh = ConnectionBudget::default();
        let hb = HeartbeatParams::default();
        ServiceKeys {
            name: "ckptd".into(),
            default_backend: SNOOZE_SIM.into(),
            worker_pool_capacity: 100,
            ssh_max_concurrent: ssh.max_concurrent,
            ssh_command_latency_s: ssh.per_command_latency.as_secs_f64(),
            ssh_setup_s: ssh.setup_cost.as_secs_f64(),
            ssh_reuse: ssh.reuse,
            ssh_global_limit: false,
            exec_bytes_per_s: 5000,
            heartbeat_period_s: hb.period.as_secs_f64(),
            link_latency_s: hb.link_latency.as_secs_f64(),
            hook_cost_s: 0.01,
            hook_timeout_s: hb.hook_timeout.as_secs_f64(),
            probe_timeout_s: hb.probe_timeout.as_secs_f64(),
            local_bytes_per_s: 200_000_000,
            remote_bytes_per_s: 10_000_000,
            local_quota_bytes: None,
            storage_root: None,
            db_snapshot: None,
            error_grace_s: 30.0,
            vm_id_base: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub name: String,
    pub backends: Vec<BackendProfile>,
    pub default_backend: String,
    pub worker_pool_capacity: usize,
    pub ssh: ConnectionBudget,
    pub ssh_global_limit: bool,
    /// c2: bytes per virtual second of one worker executing remote commands.
    pub exec_bytes_per_s: u64,
    pub heartbeat: HeartbeatParams,
    pub hook_cost: VirtualDuration,
    pub local_bytes_per_s: u64,
    pub remote_bytes_per_s: u64,
    pub local_quota_bytes: Option<u64>,
    pub storage_root: Option<PathBuf>,
    pub db_snapshot: Option<PathBuf>,
    /// How long an application stays observable in ERROR before it is
    /// terminated automatically.
    pub error_grace: VirtualDuration,
    pub vm_id_base: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self::from_keys(ServiceKeys::default(), BackendProfile::builtin()).expect("defaults are valid")
    }
}

impl ServiceConfig {
    pub fn from_keys(k: ServiceKeys, backends: Vec<BackendProfile>) -> Result<Self, ConfigError> {
        let ssh = ConnectionBudget {
            max_concurrent: k.ssh_max_concurrent,
            per_command_latency: secs(k.ssh_command_latency_s, "ssh_command_latency_s")?,
            setup_cost: secs(k.ssh_setup_s, "ssh_setup_s")?,
            reuse: k.ssh_reuse,
        };
        ssh.validate().map_err(ConfigError::Invalid)?;
        if k.worker_pool_capacity < 1 {
            return Err(ConfigError::Invalid("worker_pool_capacity must be >= 1".into()));
        }
        let period = secs(k.heartbeat_period_s, "heartbeat_period_s")?;
        if period.is_zero() {
            return Err(ConfigError::Invalid("heartbeat_period_s must be positive".into()));
        }
        let cfg = ServiceConfig {
            name: k.name,
            backends,
            default_backend: k.default_backend,
            worker_pool_capacity: k.worker_pool_capacity,
            ssh,
            ssh_global_limit: k.ssh_global_limit,
            exec_bytes_per_s: k.exec_bytes_per_s,
            heartbeat: HeartbeatParams {
                link_latency: secs(k.link_latency_s, "link_latency_s")?,
                hook_timeout: secs(k.hook_timeout_s, "hook_timeout_s")?,
                probe_timeout: secs(k.probe_timeout_s, "probe_timeout_s")?,
                probe_attempts: 2,
                period,
            },
            hook_cost: secs(k.hook_cost_s, "hook_cost_s")?,
            local_bytes_per_s: k.local_bytes_per_s,
            remote_bytes_per_s: k.remote_bytes_per_s,
            local_quota_bytes: k.local_quota_bytes,
            storage_root: k.storage_root,
            db_snapshot: k.db_snapshot,
            error_grace: secs(k.error_grace_s, "error_grace_s")?,
            vm_id_base: k.vm_id_base,
        };
        if !cfg.backends.iter().any(|b| b.name == cfg.default_backend) {
            return Err(ConfigError::Invalid(format!("default_backend {} is not configured", cfg.default_backend)));
        }
        Ok(cfg)
    }

    /// Parses a TOML document with an optional `[service]` table and
    /// `[backends.<name>]` tables. Backends named like a built-in profile
    /// replace it; others are added.
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Doc {
            #[serde(default)]
            service: ServiceKeys,
            #[serde(default)]
            #[allow(dead_code)]
            backends: toml::Table,
        }
        let doc: Doc = toml::from_str(src).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut backends = BackendProfile::builtin();
        for p in load_profiles(src).map_err(ConfigError::Invalid)? {
            backends.retain(|b| b.name != p.name);
            backends.push(p);
        }
        Self::from_keys(doc.service, backends)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn backend_mut(&mut self, name: &str) -> Option<&mut BackendProfile> {
        self.backends.iter_mut().find(|b| b.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

/// Scheduled work, ordered by the virtual clock.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Cloud(CloudEvent),
    TaskResume(TaskId),
    WorkloadRound { app: AppId, coord: CoordinatorId },
    PeriodicCheckpoint { app: AppId, coord: CoordinatorId },
    Heartbeat { app: AppId, coord: CoordinatorId },
    HeartbeatDone { app: AppId, coord: CoordinatorId, report: HealthReport },
    ReplicationStart { app: AppId, generation: u64, attempt: u32 },
    ReplicationDone { app: AppId, generation: u64, attempt: u32 },
    AutoTerminate { app: AppId },
    CleanupRetry { app: AppId, attempt: u32 },
}

impl From<CloudEvent> for Event {
    fn from(e: CloudEvent) -> Self {
        Event::Cloud(e)
    }
}

/// What a busy worker is doing right now; drives the network meter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    /// Waiting for VMs; polls the IaaS front-end (the m term).
    Polling,
    /// Running remote commands on VMs (the n term).
    Exec,
    /// Moving checkpoint images.
    Io,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryKind {
    VmFailure,
    AppFailure,
}

/// Recovery decided from a health report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPlan {
    pub kind: RecoveryKind,
    pub failed_vms: Vec<crate::cloudsim::VmDescriptor>,
    pub checkpoint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Submit,
    Checkpoint { generation: u64 },
    /// Restart from a checkpoint; `None` picks the latest.
    Restore { generation: Option<u64>, plan: Option<RecoveryPlan> },
    Terminate,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Submit => "submit",
            TaskKind::Checkpoint { .. } => "checkpoint",
            TaskKind::Restore { plan: None, .. } => "restart",
            TaskKind::Restore { plan: Some(_), .. } => "recover",
            TaskKind::Terminate => "terminate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Stage {
    Start,
    AwaitBoot { vms: Vec<VmId> },
    Provisioning { vms: Vec<VmId> },
    Relaunch { generation: u64 },
    CheckpointWrite,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: TaskId,
    pub app: AppId,
    pub kind: TaskKind,
    pub(crate) stage: Stage,
    pub activity: Activity,
    pub enqueued_at: VirtualTime,
    /// Restart path: the state was moved to CREATING for new VMs.
    pub(crate) passive: bool,
}

/// Bounded pool of background workers. Tasks of one application run one at
/// a time; termination jumps that queue.
#[derive(Debug, Default)]
pub struct WorkerPool {
    pub capacity: usize,
    pub(crate) tasks: BTreeMap<TaskId, Task>,
    pub(crate) queue: VecDeque<TaskId>,
    pub(crate) active: BTreeSet<TaskId>,
    next: u64,
    peak: usize,
}

impl WorkerPool {
    pub fn new(capacity: usize) -> Self {
        WorkerPool { capacity, ..Default::default() }
    }

    pub(crate) fn enqueue(&mut self, app: AppId, kind: TaskKind, now: VirtualTime) -> TaskId {
        self.next += 1;
        let id = TaskId(self.next);
        self.tasks.insert(
            id,
            Task { id, app, kind, stage: Stage::Start, activity: Activity::Idle, enqueued_at: now, passive: false },
        );
        self.queue.push_back(id);
        id
    }

    /// Next queued task allowed to start, removed from the queue.
    pub(crate) fn next_runnable(&mut self) -> Option<TaskId> {
        if self.active.len() >= self.capacity {
            return None;
        }
        let busy: BTreeSet<AppId> = self.active.iter().map(|t| self.tasks[t].app).collect();
        let pos = self.queue.iter().position(|t| {
            let task = &self.tasks[t];
            task.kind == TaskKind::Terminate || !busy.contains(&task.app)
        })?;
        let id = self.queue.remove(pos).expect("position valid");
        self.active.insert(id);
        self.peak = self.peak.max(self.active.len());
        Some(id)
    }

    pub(crate) fn finish(&mut self, id: TaskId) -> Option<Task> {
        self.active.remove(&id);
        self.queue.retain(|q| *q != id);
        self.tasks.remove(&id)
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    pub fn queued_len(&self) -> usize {
        self.queue.len()
    }

    pub fn peak_active(&self) -> usize {
        self.peak
    }

    pub fn task(&self, id: TaskId) -> Option<&Task> {
        self.tasks.get(&id)
    }

    /// (m, n): active workers polling the IaaS and executing remote commands.
    pub fn census(&self) -> (u64, u64) {
        let mut m = 0;
        let mut n = 0;
        for id in &self.active {
            match self.tasks[id].activity {
                Activity::Polling => m += 1,
                Activity::Exec => n += 1,
                _ => {}
            }
        }
        (m, n)
    }

    /// Queued plus running tasks of one application.
    pub fn task_count_of(&self, app: AppId) -> usize {
        self.tasks.values().filter(|t| t.app == app).count()
    }

    pub(crate) fn tasks_of(&self, app: AppId) -> Vec<TaskId> {
        self.tasks.values().filter(|t| t.app == app).map(|t| t.id).collect()
    }
}

/// Open network flows, one per busy worker, each with its own byte rate.
#[derive(Debug, Default, Clone)]
pub struct NetworkMeter {
    flows: BTreeMap<TaskId, u64>,
}

impl NetworkMeter {
    pub fn open(&mut self, task: TaskId, bytes_per_s: u64) {
        self.flows.insert(task, bytes_per_s);
    }

    pub fn close(&mut self, task: TaskId) {
        self.flows.remove(&task);
    }

    /// Current aggregate rate in bytes per virtual second.
    pub fn rate(&self) -> u64 {
        self.flows.values().sum()
    }

    pub fn flows(&self) -> usize {
        self.flows.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub app: Option<AppId>,
    pub kind: String,
    pub detail: Value,
}

/// Live execution state of one application's workload.
#[derive(Debug, Clone)]
pub(crate) struct AppRuntime {
    pub coord: Coordinator,
    pub last_progress: Vec<VirtualTime>,
    pub last_ckpt_iteration: u64,
    pub hb_round: u64,
    pub hb_in_flight: bool,
    pub recovering: bool,
}

pub struct Service {
    pub(crate) config: ServiceConfig,
    pub(crate) clock: VirtualClock<Event>,
    pub(crate) cloud: CloudManager,
    pub(crate) store: CheckpointManager,
    outage: OutageSwitch,
    pub(crate) db: CoordinatorsDb,
    pub(crate) runtimes: BTreeMap<AppId, AppRuntime>,
    pub(crate) pool: WorkerPool,
    pub(crate) meter: NetworkMeter,
    pub(crate) ssh_cache: ConnectionCache,
    pub(crate) ssh_slots: SlotPool,
    next_coord: u64,
    trace: Vec<TraceEntry>,
    /// Apps whose termination was already enqueued.
    pub(crate) terminating: BTreeSet<AppId>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("name", &self.config.name)
            .field("now", &self.clock.now())
            .field("apps", &self.db.len())
            .finish()
    }
}

impl Service {
    pub fn new(config: ServiceConfig) -> Result<Self, StoreError> {
        let remote = ObjectStore::new(config.remote_bytes_per_s);
        let outage = remote.outage_switch();
        let local = match &config.storage_root {
            Some(root) => LocalDirStore::open(root, config.local_bytes_per_s)?,
            None => LocalDirStore::temporary(config.local_bytes_per_s)?,
        };
        let store = CheckpointManager::new(Box::new(local), Box::new(remote)).with_quota(config.local_quota_bytes);
        let cloud = CloudManager::new(config.backends.iter().cloned()).with_vm_id_base(config.vm_id_base);
        let db = match &config.db_snapshot {
            Some(p) if p.exists() => CoordinatorsDb::load(p).map_err(|e| StoreError::Io(e.to_string()))?,
            Some(p) => CoordinatorsDb::with_snapshot(p.clone()),
            None => CoordinatorsDb::default(),
        };
        let mut svc = Service {
            pool: WorkerPool::new(config.worker_pool_capacity),
            ssh_slots: SlotPool::new(config.ssh.max_concurrent),
            config,
            clock: VirtualClock::new(),
            cloud,
            store,
            outage,
            db,
            runtimes: BTreeMap::new(),
            meter: NetworkMeter::default(),
            ssh_cache: ConnectionCache::default(),
            next_coord: 0,
            trace: Vec::new(),
            terminating: BTreeSet::new(),
        };
        let ids: Vec<AppId> = svc.db.ids();
        for id in ids {
            svc.store.open_app(id);
        }
        Ok(svc)
    }

    pub fn with_defaults() -> Self {
        Self::new(ServiceConfig::default()).expect("temporary storage")
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn now(&self) -> VirtualTime {
        self.clock.now()
    }

    pub fn cloud(&self) -> &CloudManager {
        &self.cloud
    }

    pub fn store(&self) -> &CheckpointManager {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut CheckpointManager {
        &mut self.store
    }

    pub fn db(&self) -> &CoordinatorsDb {
        &self.db
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn meter(&self) -> &NetworkMeter {
        &self.meter
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// The trace as JSON lines; byte-equal across identical runs.
    pub fn trace_json_lines(&self) -> String {
        self.trace.iter().map(|e| serde_json::to_string(e).expect("trace serializes") + "\n").collect()
    }

    pub fn coordinator(&self, app: AppId) -> Option<&Coordinator> {
        self.runtimes.get(&app).map(|r| &r.coord)
    }

    pub fn set_remote_available(&mut self, up: bool) {
        self.outage.set_available(up);
        self.log(None, "remote_store", json!({ "available": up }));
    }

    pub(crate) fn log(&mut self, app: Option<AppId>, kind: &str, detail: Value) {
        log::debug!("[{}] t={} app={:?} {kind} {detail}", self.config.name, self.clock.now(), app);
        self.trace.push(TraceEntry { t_ms: self.clock.now().as_millis(), app, kind: kind.to_string(), detail });
    }

    pub(crate) fn mint_coordinator(&mut self) -> CoordinatorId {
        self.next_coord += 1;
        CoordinatorId(self.next_coord)
    }

    // ---- driving the clock -------------------------------------------------

    /// Processes every event due at or before `until`, then sets the clock
    /// to `until`.
    pub fn run_until(&mut self, until: VirtualTime) {
        self.pump();
        while let Some((_, ev)) = self.clock.pop_due(until) {
            self.dispatch(ev);
            self.pump();
        }
        self.clock.set_now(until);
        self.persist();
    }

    pub fn run_for(&mut self, d: VirtualDuration) {
        let t = self.clock.now() + d;
        self.run_until(t);
    }

    /// Runs until `pred` holds or `limit` passes; checks after every event.
    pub fn run_until_pred(&mut self, limit: VirtualTime, mut pred: impl FnMut(&Service) -> bool) -> bool {
        self.pump();
        loop {
            if pred(self) {
                self.persist();
                return true;
            }
            match self.clock.pop_due(limit) {
                Some((_, ev)) => {
                    self.dispatch(ev);
                    self.pump();
                }
                None => {
                    self.clock.set_now(limit);
                    self.persist();
                    return pred(self);
                }
            }
        }
    }

    pub fn next_event_time(&self) -> Option<VirtualTime> {
        self.clock.peek_time()
    }

    pub(crate) fn persist(&mut self) {
        if let Err(e) = self.db.persist() {
            log::warn!("snapshot write failed: {e}");
        }
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Cloud(ce) => {
                let outcome = self.cloud.handle_event(&mut self.clock, ce);
                self.on_cloud(outcome);
            }
            Event::TaskResume(id) => self.resume_task(id),
            Event::WorkloadRound { app, coord } => self.on_workload_round(app, coord),
            Event::PeriodicCheckpoint { app, coord } => self.on_periodic_checkpoint(app, coord),
            Event::Heartbeat { app, coord } => self.on_heartbeat(app, coord),
            Event::HeartbeatDone { app, coord, report } => self.on_heartbeat_done(app, coord, report),
            Event::ReplicationStart { app, generation, attempt } => self.on_replication_start(app, generation, attempt),
            Event::ReplicationDone { app, generation, attempt } => self.on_replication_done(app, generation, attempt),
            Event::AutoTerminate { app } => self.on_auto_terminate(app),
            Event::CleanupRetry { app, attempt } => self.cleanup_images(app, attempt),
        }
    }

    /// Starts queued tasks while workers are free.
    pub(crate) fn pump(&mut self) {
        while let Some(id) = self.pool.next_runnable() {
            self.resume_task(id);
        }
    }

    pub(crate) fn set_activity(&mut self, id: TaskId, activity: Activity, backend: Option<&str>) {
        let rate = match activity {
            Activity::Polling => backend.and_then(|b| self.cloud.profile(b)).map(|p| p.api_poll_cost),
            Activity::Exec => Some(self.config.exec_bytes_per_s),
            _ => None,
        };
        match rate {
            Some(r) => self.meter.open(id, r),
            None => self.meter.close(id),
        }
        if let Some(t) = self.pool.tasks.get_mut(&id) {
            t.activity = activity;
        }
    }

    pub(crate) fn finish_task(&mut self, id: TaskId) {
        self.meter.close(id);
        self.pool.finish(id);
    }

    // ---- cloud events -------------------------------------------------------

    pub(crate) fn owner_of(&self, vm: VmId) -> Option<(AppId, usize)> {
        self.db.iter().find_map(|r| r.cluster.as_ref().and_then(|c| c.index_of(vm)).map(|i| (r.app_id, i)))
    }

    fn on_cloud(&mut self, outcome: CloudOutcome) {
        match outcome {
            CloudOutcome::Booted(vm) => {
                let waiting: Vec<TaskId> = self
                    .pool
                    .active
                    .iter()
                    .filter(|t| matches!(&self.pool.tasks[t].stage, Stage::AwaitBoot { vms } if vms.contains(&vm)))
                    .copied()
                    .collect();
                for t in waiting {
                    let Stage::AwaitBoot { vms } = &self.pool.tasks[&t].stage else { continue };
                    if self.cloud.all_up(vms) {
                        self.resume_task(t);
                    }
                }
            }
            CloudOutcome::Failed(vm) => self.on_vm_failed(vm),
            CloudOutcome::Notified(vm) => self.ingest_backend_notification(vm),
            CloudOutcome::Nothing => {}
        }
    }

    fn on_vm_failed(&mut self, vm: VmId) {
        self.ssh_cache.forget(vm);
        let owner = self.owner_of(vm);
        self.log(owner.map(|o| o.0), "vm_failed", json!({ "vm": vm, "index": owner.map(|o| o.1) }));
        if let Some((app, idx)) = owner {
            if let Some(rt) = self.runtimes.get_mut(&app) {
                let _ = rt.coord.set_reachable(idx, false);
            }
        }
    }

    /// Backend failure notice: handled like a report with one unreachable VM.
    pub fn ingest_backend_notification(&mut self, vm: VmId) {
        let Some((app, idx)) = self.owner_of(vm) else {
            self.log(None, "notification_ignored", json!({ "vm": vm, "reason": "unknown vm" }));
            return;
        };
        let round = self.runtimes.get(&app).map_or(0, |r| r.hb_round);
        let report = crate::monitor::notification_report(app, round, idx);
        self.consider_recovery(app, report, "notification");
    }

    /// Marks a VM unreachable at `at` (now if in the past).
    pub fn inject_vm_failure(&mut self, app: AppId, vm_index: usize, at: VirtualTime) -> Result<VmId, String> {
        let vm = self
            .db
            .get(app)
            .and_then(|r| r.cluster.as_ref())
            .and_then(|c| c.vm_ids.get(vm_index).copied())
            .ok_or_else(|| format!("application {app} has no vm {vm_index}"))?;
        let immediate = at <= self.clock.now();
        self.cloud.inject_failure(&mut self.clock, FailureTarget::Vm(vm), at).map_err(|e| e.to_string())?;
        if immediate {
            self.on_vm_failed(vm);
        }
        Ok(vm)
    }

    /// Sets what the health hook of one daemon reports.
    pub fn set_health(&mut self, app: AppId, vm_index: usize, healthy: bool) -> Result<(), String> {
        let rt = self.runtimes.get_mut(&app).ok_or_else(|| format!("application {app} has no running workload"))?;
        rt.coord.set_health(vm_index, healthy).map_err(|e| e.to_string())?;
        self.log(Some(app), "set_health", json!({ "index": vm_index, "healthy": healthy }));
        Ok(())
    }

    // ---- workload -----------------------------------------------------------

    fn current(&self, app: AppId, coord: CoordinatorId) -> bool {
        self.runtimes.get(&app).is_some_and(|r| r.coord.id() == coord)
    }

    /// Installs a freshly started or restarted coordinator and arms its timers.
    pub(crate) fn install_runtime(&mut self, app: AppId, coord: Coordinator) {
        let now = self.clock.now();
        let id = coord.id();
        let n = coord.len();
        let progress = coord.progress();
        self.runtimes.insert(
            app,
            AppRuntime {
                coord,
                last_progress: vec![now; n],
                last_ckpt_iteration: progress,
                hb_round: 0,
                hb_in_flight: false,
                recovering: false,
            },
        );
        let Some(rec) = self.db.get(app) else { return };
        let step = VirtualDuration::try_from_secs_f64(rec.asr.app_spec.step_s).unwrap_or(VirtualDuration::from_secs(1));
        let policy = rec.asr.checkpoint_policy.clone();
        self.clock.schedule_in(step, Event::WorkloadRound { app, coord: id });
        if let (CheckpointMode::Periodic, Some(p)) = (policy.mode, policy.period) {
            self.clock.schedule_in(p, Event::PeriodicCheckpoint { app, coord: id });
        }
        let period = self.config.heartbeat.period.as_millis();
        let next = (now.as_millis() / period + 1) * period;
        self.clock.schedule_at(VirtualTime(next), Event::Heartbeat { app, coord: id });
    }

    pub(crate) fn stop_runtime(&mut self, app: AppId) -> Option<CoordinatorId> {
        let rt = self.runtimes.remove(&app)?;
        let id = rt.coord.id();
        self.clock.cancel_where(|e| match e {
            Event::WorkloadRound { coord, .. }
            | Event::PeriodicCheckpoint { coord, .. }
            | Event::Heartbeat { coord, .. }
            | Event::HeartbeatDone { coord, .. } => *coord == id,
            _ => false,
        });
        Some(id)
    }

    fn on_workload_round(&mut self, app: AppId, coord: CoordinatorId) {
        if !self.current(app, coord) {
            return;
        }
        let now = self.clock.now();
        let rt = self.runtimes.get_mut(&app).expect("current");
        rt.coord.round();
        let r = rt.coord.rounds() - 1;
        for (i, d) in rt.coord.daemons().iter().enumerate() {
            if d.last_progress_round == r {
                rt.last_progress[i] = now;
            }
        }
        let finished = rt.coord.output();
        let progress = rt.coord.progress();
        let ckpt_due = progress > rt.last_ckpt_iteration;
        if let Some(out) = finished {
            let hex: String = out.iter().map(|b| format!("{b:02x}")).collect();
            if let Some(rec) = self.db.get_mut(app) {
                rec.output = Some(hex.clone());
            }
            self.log(Some(app), "completed", json!({ "coordinator": coord, "output": hex }));
            let _ = self.stop_timers_keep_runtime(app, coord);
            return;
        }
        let mode = self.db.get(app).map(|r| r.asr.checkpoint_policy.mode);
        if mode == Some(CheckpointMode::AppInitiated) && ckpt_due {
            self.runtimes.get_mut(&app).expect("current").last_ckpt_iteration = progress;
            self.coordinator_checkpoint(app, "app_initiated");
        }
        let step = self
            .db
            .get(app)
            .and_then(|r| VirtualDuration::try_from_secs_f64(r.asr.app_spec.step_s))
            .unwrap_or(VirtualDuration::from_secs(1));
        self.clock.schedule_in(step, Event::WorkloadRound { app, coord });
    }

    /// A finished workload keeps its coordinator for inspection but stops
    /// checkpointing and heartbeats.
    fn stop_timers_keep_runtime(&mut self, _app: AppId, coord: CoordinatorId) -> bool {
        self.clock.cancel_where(|e| match e {
            Event::PeriodicCheckpoint { coord: c, .. } | Event::Heartbeat { coord: c, .. } => *c == coord,
            _ => false,
        });
        true
    }

    fn on_periodic_checkpoint(&mut self, app: AppId, coord: CoordinatorId) {
        if !self.current(app, coord) {
            return;
        }
        if let Some(p) = self.db.get(app).and_then(|r| r.asr.checkpoint_policy.period) {
            self.clock.schedule_in(p, Event::PeriodicCheckpoint { app, coord });
        }
        if self.runtimes[&app].recovering || self.db.get(app).map(|r| r.state) != Some(AppState::Running) {
            return;
        }
        self.coordinator_checkpoint(app, "periodic");
    }

    /// Checkpoint taken by the coordinator on its own. The image lands in the
    /// local store without telling the index.
    pub(crate) fn coordinator_checkpoint(&mut self, app: AppId, mode: &str) -> Option<u64> {
        self.take_checkpoint(app, None, mode)
    }

    pub(crate) fn take_checkpoint(&mut self, app: AppId, generation: Option<u64>, mode: &str) -> Option<u64> {
        let now = self.clock.now();
        let rt = self.runtimes.get_mut(&app)?;
        let iteration = rt.coord.progress();
        let blobs = match rt.coord.checkpoint() {
            Ok(b) => b,
            Err(e) => {
                log::warn!("app {app}: checkpoint failed: {e}");
                self.log(Some(app), "checkpoint_failed", json!({ "mode": mode, "error": e.to_string() }));
                return None;
            }
        };
        match self.store.store_local(app, generation, &blobs, now) {
            Ok(set) => {
                self.log(
                    Some(app),
                    "checkpoint_stored",
                    json!({ "mode": mode, "generation": set.generation, "iteration": iteration, "size_bytes": set.size_bytes() }),
                );
                self.clock.schedule_at(now, Event::ReplicationStart { app, generation: set.generation, attempt: 0 });
                Some(set.generation)
            }
            Err(e) => {
                log::warn!("app {app}: checkpoint not stored: {e}");
                self.log(Some(app), "checkpoint_failed", json!({ "mode": mode, "error": e.to_string() }));
                None
            }
        }
    }

    // ---- replication ----------------------------------------------------------

    fn on_replication_start(&mut self, app: AppId, generation: u64, attempt: u32) {
        match self.store.begin_replication(app, generation, self.clock.now()) {
            Ok(Some(done)) => self.clock.schedule_at(done, Event::ReplicationDone { app, generation, attempt }),
            Ok(None) => {}
            Err(e) => log::debug!("replication of {app}/{generation} dropped: {e}"),
        }
    }

    fn on_replication_done(&mut self, app: AppId, generation: u64, attempt: u32) {
        match self.store.complete_replication(app, generation) {
            Ok(true) => self.log(Some(app), "replicated", json!({ "generation": generation })),
            Ok(false) => {}
            Err(StoreError::RemoteUnavailable) => {
                let delay = backoff(attempt);
                self.log(Some(app), "replication_retry", json!({ "generation": generation, "attempt": attempt + 1, "delay_ms": delay.as_millis() }));
                self.clock.schedule_in(delay, Event::ReplicationStart { app, generation, attempt: attempt + 1 });
            }
            Err(e) => log::warn!("replication of {app}/{generation} failed: {e}"),
        }
    }

    // ---- monitoring -----------------------------------------------------------

    pub(crate) fn node_views(&self, app: AppId) -> Option<Vec<NodeView>> {
        let rec = self.db.get(app)?;
        let cluster = rec.cluster.as_ref()?;
        let rt = self.runtimes.get(&app)?;
        Some(
            cluster
                .vm_ids
                .iter()
                .enumerate()
                .map(|(i, vm)| {
                    let d = rt.coord.daemon(i);
                    NodeView {
                        reachable: self.cloud.status(*vm) == Some(VmStatus::Up),
                        process_alive: d.is_some_and(|d| d.healthy),
                        last_progress: rt.last_progress.get(i).copied().unwrap_or(VirtualTime::ZERO),
                        finished: d.is_some_and(|d| d.state.phase == Phase::Done),
                        hook_cost: self.config.hook_cost,
                    }
                })
                .collect(),
        )
    }

    fn on_heartbeat(&mut self, app: AppId, coord: CoordinatorId) {
        if !self.current(app, coord) {
            return;
        }
        self.clock.schedule_in(self.config.heartbeat.period, Event::Heartbeat { app, coord });
        let now = self.clock.now();
        let rt = &self.runtimes[&app];
        if rt.hb_in_flight || rt.recovering {
            return;
        }
        let Some(views) = self.node_views(app) else { return };
        let hook = self.db.get(app).map(|r| r.asr.health_hook.clone()).unwrap_or_default();
        let Ok(tree) = BroadcastTree::build(views.len()) else { return };
        let rt = self.runtimes.get_mut(&app).expect("current");
        rt.hb_round += 1;
        rt.hb_in_flight = true;
        let report = heartbeat_round(app, rt.hb_round, &tree, &views, &hook, &self.config.heartbeat, now);
        self.clock.schedule_in(report.roundtrip_time, Event::HeartbeatDone { app, coord, report });
    }

    fn on_heartbeat_done(&mut self, app: AppId, coord: CoordinatorId, report: HealthReport) {
        if !self.current(app, coord) {
            return;
        }
        self.runtimes.get_mut(&app).expect("current").hb_in_flight = false;
        if !report.has_problem() {
            let n = self.runtimes[&app].coord.len();
            self.log(Some(app), "heartbeat", json!({ "round": report.round, "n": n, "roundtrip_ms": report.roundtrip_time.as_millis() }));
        } else {
            self.log(
                Some(app),
                "heartbeat_problem",
                json!({ "round": report.round, "unreachable": report.unreachable, "unhealthy": report.unhealthy, "roundtrip_ms": report.roundtrip_time.as_millis() }),
            );
            self.consider_recovery(app, report, "heartbeat");
        }
    }

    /// Turns a problem report into a recovery, at most one at a time per
    /// application.
    pub(crate) fn consider_recovery(&mut self, app: AppId, report: HealthReport, trigger: &str) {
        let running = self.db.get(app).map(|r| r.state) == Some(AppState::Running);
        let Some(rt) = self.runtimes.get(&app) else { return };
        if !running || rt.recovering || rt.coord.is_finished() {
            self.log(Some(app), "report_ignored", json!({ "trigger": trigger }));
            return;
        }
        if classify(&report) == Classification::Healthy {
            return;
        }
        self.recover(app, &report, trigger);
    }

    fn on_auto_terminate(&mut self, app: AppId) {
        if self.db.get(app).map(|r| r.state) == Some(AppState::Error) {
            self.request_termination(app, true);
        }
    }

    pub(crate) fn cleanup_images(&mut self, app: AppId, attempt: u32) {
        match self.store.delete_all(app) {
            Ok(n) => self.log(Some(app), "images_deleted", json!({ "keys": n, "attempt": attempt })),
            Err(e) => {
                let delay = backoff(attempt);
                self.log(Some(app), "images_delete_retry", json!({ "error": e.to_string(), "delay_ms": delay.as_millis() }));
                self.clock.schedule_in(delay, Event::CleanupRetry { app, attempt: attempt + 1 });
            }
        }
    }

    /// Every live VM claimed by this service, per backend, for audits.
    pub fn live_vms_by_backend(&self) -> BTreeMap<String, usize> {
        self.cloud
            .backend_ids()
            .map(|b| (b.to_string(), self.cloud.pool(b).map_or(0, |p| p.live)))
            .collect()
    }

    /// Σ cluster sizes over records that still hold a cluster.
    pub fn cluster_vm_total(&self) -> usize {
        self.db.iter().filter_map(|r| r.cluster.as_ref()).map(|c| c.len()).sum()
    }
}

/// Retry delay: 1 s doubling per attempt, capped at one minute.
pub fn backoff(attempt: u32) -> VirtualDuration {
    VirtualDuration::from_secs(1u64 << attempt.min(6)).min(VirtualDuration::from_secs(60))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_from_toml() {
        let cfg = ServiceConfig::from_toml(
            r#"
            [service]
            ssh_max_concurrent = 8
            worker_pool_capacity = 10

            [backends.snooze-sim]
            capacity = 4
            boot_latency_s = 1
            poll_bytes_per_s = 7
            failure_notifications = true

            [backends.extra]
            capacity = 2
            boot_latency_s = 3
            poll_bytes_per_s = 1
            failure_notifications = false
            "#,
        )
        .unwrap();
        assert_eq!(cfg.ssh.max_concurrent, 8);
        assert_eq!(cfg.worker_pool_capacity, 10);
        assert_eq!(cfg.backends.len(), 3);
        let s = cfg.backends.iter().find(|b| b.name == "snooze-sim").unwrap();
        assert_eq!((s.capacity, s.api_poll_cost), (4, 7));
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(ServiceConfig::from_toml("[service]\nssh_max_concurrent = 0").is_err());
        assert!(ServiceConfig::from_toml("[service]\nbogus = 1").is_err());
        assert!(ServiceConfig::from_toml("[service]\ndefault_backend = \"nowhere\"").is_err());
    }

    #[test]
    fn backoff_doubles_then_caps() {
        assert_eq!(backoff(0), VirtualDuration::from_secs(1));
        assert_eq!(backoff(3), VirtualDuration::from_secs(8));
        assert_eq!(backoff(20), VirtualDuration::from_secs(60));
    }

    #[test]
    fn pool_serializes_per_app() {
        let mut p = WorkerPool::new(10);
        let a = p.enqueue(AppId(1), TaskKind::Submit, VirtualTime::ZERO);
        let b = p.enqueue(AppId(1), TaskKind::Checkpoint { generation: 1 }, VirtualTime::ZERO);
        let c = p.enqueue(AppId(2), TaskKind::Submit, VirtualTime::ZERO);
        assert_eq!(p.next_runnable(), Some(a));
        assert_eq!(p.next_runnable(), Some(c));
        assert_eq!(p.next_runnable(), None);
        let t = p.enqueue(AppId(1), TaskKind::Terminate, VirtualTime::ZERO);
        assert_eq!(p.next_runnable(), Some(t));
        p.finish(a);
        p.finish(t);
        assert_eq!(p.next_runnable(), Some(b));
    }

    #[test]
    fn pool_respects_capacity() {
        let mut p = WorkerPool::new(2);
        for i in 0..5 {
            p.enqueue(AppId(i), TaskKind::Submit, VirtualTime::ZERO);
        }
        while p.next_runnable().is_some() {}
        assert_eq!(p.active_len(), 2);
        assert_eq!(p.queued_len(), 3);
        assert_eq!(p.peak_active(), 2);
    }
}
