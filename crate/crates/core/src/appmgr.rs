//! Application Manager: submission, checkpoint, restart, recovery,
//! termination, cloning and migration.
//!
//! Long-running operations are worker-pool tasks that advance through stages
//! on the virtual clock. Every stage re-checks the record, so a task whose
//! application was deleted meanwhile just stops.
//!
//! Clone and migration only use the REST contract ([`Endpoint`]), so the
//! target can be this service, a second in-process instance or a remote one.

use base64::Engine as _;
use serde_json::{json, Value};
use thiserror::Error;

use crate::ckptstore::{transfer_time, StoreError};
use crate::cloudsim::{VirtualDuration, VmId, VmStatus};
use crate::gateway::{ApiRequest, ApiResponse, Endpoint, EndpointError};
use crate::lifecycle::{validate_asr, AppEvent, AppId, AppState, ApplicationRecord, AsrDocument, InvalidAsr};
use crate::monitor::{classify, Classification, HealthReport};
use crate::provision::{default_script, exec_parallel, ExecOutcome, ProvisionScript, RemoteAction};
use crate::service::{Activity, Event, RecoveryKind, RecoveryPlan, Service, Stage, Task, TaskId, TaskKind};
use crate::workerrt::Coordinator;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppError {
    #[error("unknown application {0}")]
    NotFound(AppId),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    InvalidAsr(#[from] InvalidAsr),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl Service {
    // ---- entry points used by the gateway ---------------------------------

    pub fn submit(&mut self, doc: AsrDocument) -> Result<AppId, AppError> {
        let cloud = &self.cloud;
        let asr = validate_asr(doc, |b| cloud.has_backend(b), &self.config.default_backend)?;
        let id = self.db.allocate_id();
        let rec = ApplicationRecord::new(id, asr, self.clock.now());
        let n = rec.asr.vm_templates.len();
        let backend = rec.asr.backend_id.clone();
        self.db.insert(rec);
        self.store.open_app(id);
        self.log(Some(id), "submitted", json!({ "vms": n, "backend": backend }));
        self.pool.enqueue(id, TaskKind::Submit, self.clock.now());
        self.pump();
        Ok(id)
    }

    /// Queues a user checkpoint and returns the generation it will get.
    pub fn trigger_checkpoint(&mut self, app: AppId) -> Result<u64, AppError> {
        let rec = self.db.get(app).ok_or(AppError::NotFound(app))?;
        if rec.state != AppState::Running || !self.runtimes.contains_key(&app) {
            return Err(AppError::Conflict(format!("cannot checkpoint application {app} in state {:?}", rec.state)));
        }
        let generation = self.store.reserve_generation(app)?;
        self.pool.enqueue(app, TaskKind::Checkpoint { generation }, self.clock.now());
        self.pump();
        Ok(generation)
    }

    /// Queues a restart from `generation` (latest if `None`).
    pub fn restart(&mut self, app: AppId, generation: Option<u64>) -> Result<u64, AppError> {
        let rec = self.db.get(app).ok_or(AppError::NotFound(app))?;
        let allowed = match rec.state {
            AppState::Running => true,
            AppState::Creating => rec.cluster.is_none() && rec.asr.restore_only,
            _ => false,
        };
        if !allowed {
            return Err(AppError::Conflict(format!("cannot restart application {app} in state {:?}", rec.state)));
        }
        let set = self.store.select_image(app, generation)?;
        self.pool.enqueue(app, TaskKind::Restore { generation: Some(set.generation), plan: None }, self.clock.now());
        self.pump();
        Ok(set.generation)
    }

    /// Starts termination. `Err(NotFound)` once the record is gone.
    pub fn terminate(&mut self, app: AppId) -> Result<(), AppError> {
        if self.db.get(app).is_none() {
            return Err(AppError::NotFound(app));
        }
        self.request_termination(app, false);
        self.pump();
        Ok(())
    }

    pub(crate) fn request_termination(&mut self, app: AppId, automatic: bool) {
        if self.terminating.contains(&app) {
            return;
        }
        let Some(rec) = self.db.get_mut(app) else { return };
        let from = rec.state;
        let event = if automatic { None } else { Some(AppEvent::DeleteRequest) };
        match event {
            Some(e) => {
                let _ = rec.apply(e);
            }
            None => {
                rec.state = crate::lifecycle::auto_transition(from).unwrap_or(AppState::Terminating);
                rec.event_seq += 1;
            }
        }
        self.log(Some(app), "state", json!({ "from": from, "to": AppState::Terminating, "event": if automatic { "automatic" } else { "DeleteRequest" } }));
        self.terminating.insert(app);
        self.pool.enqueue(app, TaskKind::Terminate, self.clock.now());
    }

    /// Decides and queues recovery for a problem report.
    pub fn recover(&mut self, app: AppId, report: &HealthReport, trigger: &str) -> Option<RecoveryPlan> {
        let kind = match classify(report) {
            Classification::Healthy => return None,
            Classification::VmFailure => RecoveryKind::VmFailure,
            Classification::AppFailure => RecoveryKind::AppFailure,
        };
        let cluster = self.db.get(app)?.cluster.clone()?;
        let failed_vms = match kind {
            RecoveryKind::VmFailure => {
                let ids: Vec<VmId> = report.unreachable.iter().filter_map(|i| cluster.vm_ids.get(*i).copied()).collect();
                self.cloud.describe(&crate::cloudsim::VirtualCluster { vm_ids: ids, ..cluster.clone() })
            }
            RecoveryKind::AppFailure => Vec::new(),
        };
        let set = match self.store.select_image(app, None) {
            Ok(s) => s,
            Err(e) => {
                self.fail_app(app, format!("recovery impossible: {e}"));
                return None;
            }
        };
        let plan = RecoveryPlan { kind, failed_vms, checkpoint: set.generation };
        if let Some(rt) = self.runtimes.get_mut(&app) {
            rt.recovering = true;
        }
        self.log(
            Some(app),
            "recovery_started",
            json!({
                "kind": kind,
                "trigger": trigger,
                "unreachable": report.unreachable,
                "unhealthy": report.unhealthy,
                "checkpoint": set.generation,
            }),
        );
        self.pool.enqueue(
            app,
            TaskKind::Restore { generation: Some(set.generation), plan: Some(plan.clone()) },
            self.clock.now(),
        );
        Some(plan)
    }

    /// Records a fatal error; the application is terminated after the grace
    /// period.
    pub(crate) fn fail_app(&mut self, app: AppId, reason: String) {
        self.stop_runtime(app);
        let Some(rec) = self.db.get_mut(app) else { return };
        let from = rec.state;
        if rec.apply(AppEvent::FatalError).is_err() {
            return;
        }
        rec.error = Some(reason.clone());
        log::warn!("app {app}: {reason}");
        self.log(Some(app), "state", json!({ "from": from, "to": AppState::Error, "event": "FatalError", "error": reason }));
        let grace = self.config.error_grace;
        self.clock.schedule_in(grace, Event::AutoTerminate { app });
    }

    fn apply_event(&mut self, app: AppId, event: AppEvent) -> bool {
        let Some(rec) = self.db.get_mut(app) else { return false };
        let from = rec.state;
        match rec.apply(event) {
            Ok(to) => {
                self.log(Some(app), "state", json!({ "from": from, "to": to, "event": event }));
                true
            }
            Err(e) => {
                log::warn!("app {app}: {e}");
                false
            }
        }
    }

    // ---- task stages ----------------------------------------------------------

    fn set_stage(&mut self, id: TaskId, stage: Stage) {
        if let Some(t) = self.pool.tasks.get_mut(&id) {
            t.stage = stage;
        }
    }

    fn wait(&mut self, id: TaskId, d: VirtualDuration) {
        self.clock.schedule_in(d, Event::TaskResume(id));
    }

    fn abort_task(&mut self, task: &Task, why: &str) {
        self.log(Some(task.app), "task_aborted", json!({ "task": task.kind.name(), "reason": why }));
        self.finish_task(task.id);
    }

    pub(crate) fn resume_task(&mut self, id: TaskId) {
        let Some(task) = self.pool.tasks.get(&id).cloned() else { return };
        if !self.pool.active.contains(&id) {
            return;
        }
        if task.kind != TaskKind::Terminate {
            match self.db.get(task.app).map(|r| r.state) {
                None | Some(AppState::Terminating) => return self.abort_task(&task, "application terminating"),
                Some(AppState::Error) => return self.abort_task(&task, "application in error"),
                _ => {}
            }
        }
        match &task.kind {
            TaskKind::Submit => self.step_submit(task),
            TaskKind::Checkpoint { generation } => {
                let g = *generation;
                self.step_checkpoint(task, g)
            }
            TaskKind::Restore { .. } => self.step_restore(task),
            TaskKind::Terminate => self.step_terminate(task),
        }
    }

    fn backend_of(&self, app: AppId) -> Option<String> {
        self.db.get(app).map(|r| r.asr.backend_id.clone())
    }

    fn await_boot(&mut self, task: &Task, vms: Vec<VmId>) {
        let backend = self.backend_of(task.app);
        self.set_activity(task.id, Activity::Polling, backend.as_deref());
        let all_up = self.cloud.all_up(&vms);
        self.set_stage(task.id, Stage::AwaitBoot { vms });
        if all_up {
            self.clock.schedule_in(VirtualDuration::ZERO, Event::TaskResume(task.id));
        }
    }

    fn run_script(&mut self, vms: &[VmId], script: &ProvisionScript) -> ExecOutcome {
        let now = self.clock.now();
        let slots = if self.config.ssh_global_limit { Some(&mut self.ssh_slots) } else { None };
        exec_parallel(&mut self.cloud, vms, script, &self.config.ssh, &mut self.ssh_cache, slots, now)
    }

    fn provision(&mut self, task: &Task, vms: Vec<VmId>) {
        if !self.apply_event(task.app, AppEvent::VmsAllocated) {
            return self.abort_task(task, "illegal state for provisioning");
        }
        let rec = self.db.get(task.app).expect("checked");
        let policy = &rec.asr.checkpoint_policy;
        let mut user = vec![("ckpt_mode", format!("{:?}", policy.mode))];
        if let Some(p) = policy.period {
            user.push(("ckpt_period_s", format!("{}", p.as_secs_f64())));
        }
        user.push(("health_hook", serde_json::to_string(&rec.asr.health_hook).unwrap_or_default()));
        let script = default_script(&format!("/var/lib/ckpt/{}", task.app), &user);
        let out = self.run_script(&vms, &script);
        self.log(
            Some(task.app),
            "provisioning",
            json!({ "vms": vms.len(), "waves": out.waves, "elapsed_ms": out.elapsed.as_millis(), "failures": out.failures() }),
        );
        self.set_activity(task.id, Activity::Exec, None);
        self.set_stage(task.id, Stage::Provisioning { vms });
        self.wait(task.id, out.elapsed);
    }

    /// Ends provisioning; `false` if the application went to ERROR.
    fn provisioned(&mut self, task: &Task, vms: &[VmId]) -> bool {
        let dead: Vec<VmId> = vms.iter().filter(|v| self.cloud.status(**v) != Some(VmStatus::Up)).copied().collect();
        if !dead.is_empty() {
            self.fail_app(task.app, format!("provisioning failed: nodes unreachable {dead:?}"));
            self.finish_task(task.id);
            return false;
        }
        self.apply_event(task.app, AppEvent::ProvisionDone)
    }

    fn step_submit(&mut self, task: Task) {
        let app = task.app;
        match task.stage.clone() {
            Stage::Start => {
                let rec = self.db.get(app).expect("checked").clone();
                if rec.asr.restore_only {
                    self.log(Some(app), "awaiting_images", json!({}));
                    return self.finish_task(task.id);
                }
                match self.cloud.create_cluster(&mut self.clock, &rec.asr.backend_id, &rec.asr.vm_templates) {
                    Ok(cluster) => {
                        let vms = cluster.vm_ids.clone();
                        self.log(Some(app), "vms_claimed", json!({ "count": vms.len(), "vms": vms }));
                        self.db.get_mut(app).expect("checked").cluster = Some(cluster);
                        self.await_boot(&task, vms);
                    }
                    Err(e) => {
                        self.fail_app(app, e.to_string());
                        self.finish_task(task.id);
                    }
                }
            }
            Stage::AwaitBoot { vms } => self.provision(&task, vms),
            Stage::Provisioning { vms } => {
                if !self.provisioned(&task, &vms) {
                    return;
                }
                let spec = self.db.get(app).expect("checked").asr.app_spec.clone();
                let id = self.mint_coordinator();
                match Coordinator::start(id, &spec, vms.len()) {
                    Ok(coord) => {
                        self.apply_event(app, AppEvent::StartCommand);
                        self.db.get_mut(app).expect("checked").coordinator = Some(id);
                        self.install_runtime(app, coord);
                        self.log(Some(app), "started", json!({ "coordinator": id }));
                    }
                    Err(e) => self.fail_app(app, e.to_string()),
                }
                self.finish_task(task.id);
            }
            _ => self.abort_task(&task, "unexpected stage"),
        }
    }

    fn step_checkpoint(&mut self, task: Task, generation: u64) {
        let app = task.app;
        match task.stage {
            Stage::Start => {
                let running = self.db.get(app).map(|r| r.state) == Some(AppState::Running);
                let idle = self.runtimes.get(&app).is_some_and(|r| !r.recovering && !r.coord.is_finished());
                if !running || !idle {
                    return self.abort_task(&task, "application not checkpointable");
                }
                let Some(g) = self.take_checkpoint(app, Some(generation), "user") else {
                    return self.finish_task(task.id);
                };
                if let Err(e) = self.store.discover(app) {
                    log::warn!("app {app}: index refresh failed: {e}");
                }
                let set = self.store.select_image(app, Some(g)).ok();
                let biggest = set.as_ref().and_then(|s| s.images.iter().map(|i| i.size_bytes).max()).unwrap_or(0);
                let head = self.db.get(app).and_then(|r| r.cluster.as_ref()).and_then(|c| c.vm_ids.first().copied());
                let mut cost = self.config.ssh.per_command_latency;
                if !head.is_some_and(|v| self.config.ssh.reuse && self.ssh_cache.is_open(v)) {
                    cost += self.config.ssh.setup_cost;
                }
                cost += transfer_time(biggest, self.config.local_bytes_per_s);
                self.set_activity(task.id, Activity::Exec, None);
                self.set_stage(task.id, Stage::CheckpointWrite);
                self.wait(task.id, cost);
            }
            _ => self.finish_task(task.id),
        }
    }

    fn step_restore(&mut self, task: Task) {
        let app = task.app;
        let TaskKind::Restore { generation, plan } = task.kind.clone() else { unreachable!() };
        match task.stage.clone() {
            Stage::Start => {
                let set = match self.store.select_image(app, generation) {
                    Ok(s) => s,
                    Err(e) => {
                        self.fail_app(app, format!("restart impossible: {e}"));
                        return self.finish_task(task.id);
                    }
                };
                let rec = self.db.get(app).expect("checked").clone();
                let Some(cluster) = rec.cluster.clone() else {
                    // restore target without VMs: build the whole cluster
                    match self.cloud.create_cluster(&mut self.clock, &rec.asr.backend_id, &rec.asr.vm_templates) {
                        Ok(c) => {
                            let vms = c.vm_ids.clone();
                            self.log(Some(app), "vms_claimed", json!({ "count": vms.len(), "vms": vms }));
                            self.db.get_mut(app).expect("checked").cluster = Some(c);
                            self.pool.tasks.get_mut(&task.id).expect("active").passive = true;
                            self.pool.tasks.get_mut(&task.id).expect("active").kind =
                                TaskKind::Restore { generation: Some(set.generation), plan };
                            self.await_boot(&task, vms);
                        }
                        Err(e) => {
                            self.fail_app(app, e.to_string());
                            self.finish_task(task.id);
                        }
                    }
                    return;
                };
                let failed: Vec<usize> = cluster
                    .vm_ids
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| self.cloud.status(**v) != Some(VmStatus::Up))
                    .map(|(i, _)| i)
                    .collect();
                let in_place = failed.is_empty() || plan.as_ref().is_some_and(|p| p.kind == RecoveryKind::AppFailure);
                if rec.state != AppState::Running {
                    return self.abort_task(&task, "application not running");
                }
                let old = self.stop_runtime(app);
                self.log(Some(app), "processes_killed", json!({ "coordinator": old }));
                if in_place {
                    return self.download(&task, set.generation);
                }
                // passive recovery: replace the lost VMs
                self.apply_event(app, AppEvent::RecoveryBegun);
                let backend = cluster.backend_id.clone();
                let templates: Vec<_> = failed
                    .iter()
                    .map(|i| self.cloud.vm(cluster.vm_ids[*i]).map(|v| v.template.clone()).unwrap_or_default())
                    .collect();
                for i in &failed {
                    self.cloud.release_vm(cluster.vm_ids[*i]);
                    self.ssh_cache.forget(cluster.vm_ids[*i]);
                }
                match self.cloud.claim_vms(&mut self.clock, &backend, &templates) {
                    Ok(new) => {
                        let rec = self.db.get_mut(app).expect("checked");
                        let c = rec.cluster.as_mut().expect("has cluster");
                        let mut replaced = Vec::new();
                        for (i, vm) in failed.iter().zip(&new) {
                            replaced.push(json!({ "index": i, "old": c.vm_ids[*i], "new": vm }));
                            c.vm_ids[*i] = *vm;
                        }
                        self.log(Some(app), "vms_replaced", json!({ "count": new.len(), "replaced": replaced }));
                        if let Some(t) = self.pool.tasks.get_mut(&task.id) {
                            t.passive = true;
                            t.kind = TaskKind::Restore { generation: Some(set.generation), plan };
                        }
                        self.await_boot(&task, new);
                    }
                    Err(e) => {
                        self.fail_app(app, e.to_string());
                        self.finish_task(task.id);
                    }
                }
            }
            Stage::AwaitBoot { vms } => self.provision(&task, vms),
            Stage::Provisioning { vms } => {
                if !self.provisioned(&task, &vms) {
                    return;
                }
                self.download(&task, generation.expect("pinned at start"));
            }
            Stage::Relaunch { generation } => self.relaunch(&task, generation),
            Stage::CheckpointWrite => self.abort_task(&task, "unexpected stage"),
        }
    }

    /// Images move to every VM, then the restart command runs on all of them.
    fn download(&mut self, task: &Task, generation: u64) {
        let app = task.app;
        let size = self.store.select_image(app, Some(generation)).map(|s| s.size_bytes()).unwrap_or(0);
        let vms = self.db.get(app).and_then(|r| r.cluster.clone()).map(|c| c.vm_ids).unwrap_or_default();
        let script = ProvisionScript {
            internal_actions: vec![RemoteAction::set("restart_workload", "restored_generation", generation.to_string())],
            user_actions: Vec::new(),
        };
        let out = self.run_script(&vms, &script);
        let d = transfer_time(size, self.config.remote_bytes_per_s) + out.elapsed;
        self.set_activity(task.id, Activity::Io, None);
        self.set_stage(task.id, Stage::Relaunch { generation });
        self.wait(task.id, d);
    }

    fn relaunch(&mut self, task: &Task, generation: u64) {
        let app = task.app;
        let rec = self.db.get(app).expect("checked").clone();
        let n = rec.cluster.as_ref().map_or(0, |c| c.len());
        let blobs = self
            .store
            .select_image(app, Some(generation))
            .and_then(|set| self.store.fetch_images(&set));
        let blobs = match blobs {
            Ok(b) => b,
            Err(e) => {
                self.fail_app(app, format!("image fetch failed: {e}"));
                return self.finish_task(task.id);
            }
        };
        let id = self.mint_coordinator();
        let coord = match Coordinator::restart(id, &rec.asr.app_spec, &blobs, n) {
            Ok(c) => c,
            Err(e) => {
                self.fail_app(app, e.to_string());
                return self.finish_task(task.id);
            }
        };
        let event = if task.passive || rec.state != AppState::Running {
            AppEvent::StartCommand
        } else {
            AppEvent::RecoveryDone
        };
        if !self.apply_event(app, event) {
            return self.abort_task(task, "illegal state for restart");
        }
        let kind = match &task.kind {
            TaskKind::Restore { plan: Some(p), .. } => json!(p.kind),
            _ => json!("restart"),
        };
        let rec = self.db.get_mut(app).expect("checked");
        rec.coordinator = Some(id);
        rec.output = None;
        let iteration = coord.progress();
        self.install_runtime(app, coord);
        self.log(Some(app), "restarted", json!({ "coordinator": id, "generation": generation, "iteration": iteration, "kind": kind }));
        self.finish_task(task.id);
    }

    fn step_terminate(&mut self, task: Task) {
        let app = task.app;
        // other work on this application is moot now
        for other in self.pool.tasks_of(app) {
            if other != task.id {
                self.meter.close(other);
                self.pool.finish(other);
            }
        }
        self.stop_runtime(app);
        // (1) coordinator DB entry
        let rec = self.db.remove(app);
        self.log(Some(app), "db_entry_deleted", json!({}));
        // (2) checkpoint images
        self.cleanup_images(app, 0);
        // (3) VMs back to the idle pool
        if let Some(cluster) = rec.and_then(|r| r.cluster) {
            for vm in &cluster.vm_ids {
                self.ssh_cache.forget(*vm);
            }
            let released = self.cloud.destroy_cluster(&cluster);
            self.log(Some(app), "vms_released", json!({ "count": released }));
        }
        self.terminating.remove(&app);
        self.finish_task(task.id);
    }

    /// Adds uploaded images to a checkpoint set of `app`.
    pub fn upload_images(
        &mut self,
        app: AppId,
        generation: Option<u64>,
        expected: usize,
        images: Vec<(u32, Vec<u8>)>,
    ) -> Result<crate::ckptstore::CheckpointSet, AppError> {
        let rec = self.db.get(app).ok_or(AppError::NotFound(app))?;
        if rec.state == AppState::Terminating {
            return Err(AppError::Conflict(format!("application {app} is terminating")));
        }
        let set = self.store.upload(app, generation, expected, &images, self.clock.now())?;
        self.log(Some(app), "images_uploaded", json!({ "generation": set.generation, "count": images.len(), "complete": set.is_complete() }));
        if set.is_complete() {
            self.clock.schedule_at(self.clock.now(), Event::ReplicationStart { app, generation: set.generation, attempt: 0 });
        }
        Ok(set)
    }
}

// ---- clone and migration over the API --------------------------------------

#[derive(Debug, Error)]
pub enum CloneError {
    #[error("source application has no checkpoint")]
    NoCheckpoint,
    #[error("source: {0}")]
    Source(String),
    #[error("upload failed: {0}")]
    UploadFailed(String),
    #[error("target: {0}")]
    Target(String),
    #[error("clone {new_id} is running but the source could not be terminated: {reason}")]
    TerminateFailed { new_id: AppId, reason: String },
    #[error(transparent)]
    Transport(#[from] EndpointError),
}

/// Everything needed to recreate an application elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedCheckpoint {
    pub asr: Value,
    pub generation: u64,
    pub images: Vec<(u32, Vec<u8>)>,
}

fn expect_ok(resp: ApiResponse, what: &str, wrap: fn(String) -> CloneError) -> Result<Value, CloneError> {
    if (200..300).contains(&resp.status) {
        Ok(resp.body)
    } else {
        Err(wrap(format!("{what}: {} {}", resp.status, resp.body.get("error").and_then(Value::as_str).unwrap_or(""))))
    }
}

/// Reads the latest complete checkpoint (or `generation`) of an application.
pub fn export_checkpoint(
    src: &mut dyn Endpoint,
    app: AppId,
    generation: Option<u64>,
) -> Result<ExportedCheckpoint, CloneError> {
    let rec = expect_ok(src.call(ApiRequest::get(format!("/coordinators/{app}")))?, "show", CloneError::Source)?;
    let list = expect_ok(src.call(ApiRequest::get(format!("/coordinators/{app}/checkpoints")))?, "list", CloneError::Source)?;
    let gen = match generation {
        Some(g) => g,
        None => list["checkpoints"]
            .as_array()
            .into_iter()
            .flatten()
            .filter(|c| c["complete"].as_bool() == Some(true))
            .filter_map(|c| c["id"].as_u64())
            .max()
            .ok_or(CloneError::NoCheckpoint)?,
    };
    let ck = expect_ok(src.call(ApiRequest::get(format!("/coordinators/{app}/checkpoints/{gen}")))?, "fetch", CloneError::Source)?;
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut images = Vec::new();
    for img in ck["images"].as_array().into_iter().flatten() {
        let idx = img["vm_index"].as_u64().ok_or_else(|| CloneError::Source("image without vm_index".into()))? as u32;
        let data = img["data"]
            .as_str()
            .and_then(|s| b64.decode(s).ok())
            .ok_or_else(|| CloneError::Source("image without data".into()))?;
        images.push((idx, data));
    }
    let asr = json!({
        "vm_templates": rec["vm_templates"],
        "checkpoint_policy": rec["checkpoint_policy"],
        "app_spec": rec["app_spec"],
        "health_hook": rec["health_hook"],
    });
    Ok(ExportedCheckpoint { asr, generation: gen, images })
}

/// Creates a restore-only application on `dst`, uploads the images one per
/// request and restarts it from them. Returns the new id.
pub fn import_checkpoint(dst: &mut dyn Endpoint, exported: &ExportedCheckpoint) -> Result<AppId, CloneError> {
    let mut asr = exported.asr.clone();
    asr["restore_only"] = json!(true);
    let created = expect_ok(dst.call(ApiRequest::post("/coordinators", Some(asr)))?, "create", CloneError::Target)?;
    let new_id = AppId(created["id"].as_u64().ok_or_else(|| CloneError::Target("create returned no id".into()))?);
    let result = (|| {
        let b64 = base64::engine::general_purpose::STANDARD;
        let count = exported.images.len();
        let mut ckpt: Option<u64> = None;
        for (idx, data) in &exported.images {
            let mut body = json!({ "images": [{ "vm_index": idx, "data": b64.encode(data) }], "count": count });
            if let Some(c) = ckpt {
                body["checkpoint"] = json!(c);
            }
            let resp = dst.call(ApiRequest::post(format!("/coordinators/{new_id}/checkpoints"), Some(body)))?;
            let body = expect_ok(resp, "upload", CloneError::UploadFailed)?;
            ckpt = body["id"].as_u64();
        }
        let ckpt = ckpt.ok_or_else(|| CloneError::UploadFailed("no images".into()))?;
        expect_ok(
            dst.call(ApiRequest::post(format!("/coordinators/{new_id}/checkpoints/{ckpt}"), None))?,
            "restart",
            CloneError::Target,
        )?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(new_id),
        Err(e) => {
            // best effort: do not leave a half-built clone behind
            let _ = dst.call(ApiRequest::delete(format!("/coordinators/{new_id}")));
            Err(e)
        }
    }
}

/// Clones `app` from `src` to `dst`; `None` clones within `src`.
pub fn clone_app(src: &mut dyn Endpoint, app: AppId, dst: Option<&mut dyn Endpoint>) -> Result<AppId, CloneError> {
    let exported = export_checkpoint(src, app, None)?;
    match dst {
        Some(d) => import_checkpoint(d, &exported),
        None => import_checkpoint(src, &exported),
    }
}

/// Clone, then terminate the source.
pub fn migrate_app(src: &mut dyn Endpoint, app: AppId, dst: &mut dyn Endpoint) -> Result<AppId, CloneError> {
    let new_id = clone_app(src, app, Some(dst))?;
    match src.call(ApiRequest::delete(format!("/coordinators/{app}"))) {
        Ok(r) if r.status == 202 || r.status == 204 => Ok(new_id),
        Ok(r) => Err(CloneError::TerminateFailed { new_id, reason: format!("status {}", r.status) }),
        Err(e) => Err(CloneError::TerminateFailed { new_id, reason: e.to_string() }),
    }
}
