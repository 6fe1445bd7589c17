//! Cloud Manager abstraction over simulated IaaS backends.
//!
//! A backend owns a fixed pool of VM slots. Claimed VMs boot after the
//! profile's latency (plus seeded jitter) with at most `max_concurrent_boots`
//! builds in flight; the rest wait in the front-end queue. Failures can be
//! injected per VM; backends that advertise failure notifications push a
//! [`CloudEvent::FailureNotice`] at the same instant, the others stay silent
//! and must be caught by heartbeats.

pub mod clock;

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clock::{VirtualClock, VirtualDuration, VirtualTime};

/// Built-in profile name: fast allocation, pushes failure notifications.
pub const SNOOZE_SIM: &str = "snooze-sim";
/// Built-in profile name: slower, jittery allocation, no notifications.
pub const OPENSTACK_SIM: &str = "openstack-sim";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VmId(pub u64);

impl std::fmt::Display for VmId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "vm-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VmTemplate {
    pub vcpus: u32,
    pub memory_mb: u64,
    pub image_name: String,
}

impl VmTemplate {
    pub fn new(vcpus: u32, memory_mb: u64, image_name: impl Into<String>) -> Self {
        Self { vcpus, memory_mb, image_name: image_name.into() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.vcpus < 1 {
            return Err("vcpus must be >= 1".into());
        }
        if self.memory_mb < 1 {
            return Err("memory_mb must be >= 1".into());
        }
        Ok(())
    }
}

impl Default for VmTemplate {
    fn default() -> Self {
        VmTemplate::new(1, 2048, "ubuntu-base")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VmStatus {
    Booting,
    Up,
    Unreachable,
    Released,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmDescriptor {
    pub vm_id: VmId,
    pub backend_id: String,
    pub address: String,
    pub status: VmStatus,
}

/// The VMs hosting one application, in process-index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualCluster {
    pub backend_id: String,
    pub vm_ids: Vec<VmId>,
    pub created_at: VirtualTime,
}

impl VirtualCluster {
    pub fn len(&self) -> usize {
        self.vm_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vm_ids.is_empty()
    }

    pub fn index_of(&self, vm: VmId) -> Option<usize> {
        self.vm_ids.iter().position(|v| *v == vm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub capacity: usize,
    pub vm_boot_latency: VirtualDuration,
    /// Upper bound of the uniform extra boot delay drawn per VM.
    pub boot_jitter: VirtualDuration,
    /// How many VMs the front-end builds at once; 0 means unlimited.
    pub max_concurrent_boots: usize,
    /// Bytes per virtual second consumed by one worker polling the front-end.
    pub api_poll_cost: u64,
    pub has_failure_notifications: bool,
    pub seed: u64,
}

impl BackendProfile {
    pub fn snooze_sim() -> Self {
        BackendProfile {
            name: SNOOZE_SIM.into(),
            capacity: 512,
            vm_boot_latency: VirtualDuration::from_secs(2),
            boot_jitter: VirtualDuration::ZERO,
            max_concurrent_boots: 1,
            api_poll_cost: 1000,
            has_failure_notifications: true,
            seed: 1,
        }
    }

    pub fn openstack_sim() -> Self {
        BackendProfile {
            name: OPENSTACK_SIM.into(),
            capacity: 512,
            vm_boot_latency: VirtualDuration::from_secs(6),
            boot_jitter: VirtualDuration::from_secs(4),
            max_concurrent_boots: 1,
            api_poll_cost: 1000,
            has_failure_notifications: false,
            seed: 2,
        }
    }

    pub fn builtin() -> Vec<BackendProfile> {
        vec![Self::snooze_sim(), Self::openstack_sim()]
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty() {
            return Err("backend name must not be empty".into());
        }
        Ok(())
    }
}

/// Keys accepted for one `[backends.<name>]` table in a config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileKeys {
    pub capacity: usize,
    pub boot_latency_s: f64,
    #[serde(default)]
    pub boot_jitter_s: f64,
    #[serde(default)]
    pub max_concurrent_boots: usize,
    pub poll_bytes_per_s: u64,
    pub failure_notifications: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ProfileKeys {
    pub fn into_profile(self, name: &str) -> Result<BackendProfile, String> {
        let latency = VirtualDuration::try_from_secs_f64(self.boot_latency_s)
            .ok_or_else(|| format!("{name}: boot_latency_s must be >= 0"))?;
        let jitter = VirtualDuration::try_from_secs_f64(self.boot_jitter_s)
            .ok_or_else(|| format!("{name}: boot_jitter_s must be >= 0"))?;
        Ok(BackendProfile {
            name: name.to_string(),
            capacity: self.capacity,
            vm_boot_latency: latency,
            boot_jitter: jitter,
            max_concurrent_boots: self.max_concurrent_boots,
            api_poll_cost: self.poll_bytes_per_s,
            has_failure_notifications: self.failure_notifications,
            seed: self.seed,
        })
    }
}

/// Parses a document whose top level holds `[backends.<name>]` tables.
pub fn load_profiles(toml_src: &str) -> Result<Vec<BackendProfile>, String> {
    #[derive(Deserialize)]
    struct Doc {
        #[serde(default)]
        backends: BTreeMap<String, ProfileKeys>,
    }
    let doc: Doc = toml::from_str(toml_src).map_err(|e| e.to_string())?;
    doc.backends
        .into_iter()
        .map(|(name, keys)| keys.into_profile(&name))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloudEvent {
    VmBooted(VmId),
    /// A failure injected for a later instant.
    VmFails(VmId),
    /// Pushed by backends with failure notifications.
    FailureNotice { backend_id: String, vm_id: VmId },
}

/// What the cloud layer observed when handling a [`CloudEvent`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloudOutcome {
    Booted(VmId),
    Failed(VmId),
    Notified(VmId),
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureTarget {
    Vm(VmId),
    /// Fail `count` UP VMs on the backend, chosen with the backend's RNG.
    Backend { backend_id: String, count: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CloudError {
    #[error("unknown backend {0}")]
    UnknownBackend(String),
    #[error("cluster unavailable on {backend}: requested {requested}, free {free}")]
    ClusterUnavailable { backend: String, requested: usize, free: usize },
    #[error("unknown vm {0}")]
    UnknownVm(VmId),
}

/// One simulated VM: its descriptor plus a tiny key-value "filesystem" and
/// the log of remote actions executed on it.
#[derive(Debug, Clone)]
pub struct SimVm {
    pub descriptor: VmDescriptor,
    pub template: VmTemplate,
    pub fs: BTreeMap<String, String>,
    pub action_log: Vec<String>,
    pub booted_at: Option<VirtualTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub capacity: usize,
    pub idle: usize,
    pub live: usize,
    pub claimed_total: u64,
    pub released_total: u64,
}

struct Backend {
    profile: BackendProfile,
    claimed_total: u64,
    released_total: u64,
    booting: usize,
    boot_queue: VecDeque<VmId>,
    rng: ChaCha8Rng,
}

impl Backend {
    fn live(&self) -> usize {
        (self.claimed_total - self.released_total) as usize
    }

    fn idle(&self) -> usize {
        self.profile.capacity.saturating_sub(self.live())
    }

    fn boot_slot_free(&self) -> bool {
        self.profile.max_concurrent_boots == 0 || self.booting < self.profile.max_concurrent_boots
    }

    fn draw_boot_time(&mut self) -> VirtualDuration {
        let jitter = self.profile.boot_jitter.as_millis();
        let extra = if jitter == 0 { 0 } else { self.rng.gen_range(0..=jitter) };
        self.profile.vm_boot_latency + VirtualDuration(extra)
    }
}

/// Front-end to every configured backend.
pub struct CloudManager {
    backends: BTreeMap<String, Backend>,
    vms: BTreeMap<VmId, SimVm>,
    next_vm: u64,
}

impl CloudManager {
    pub fn new(profiles: impl IntoIterator<Item = BackendProfile>) -> Self {
        let mut cm = CloudManager { backends: BTreeMap::new(), vms: BTreeMap::new(), next_vm: 1 };
        for p in profiles {
            cm.add_backend(p);
        }
        cm
    }

    /// Offsets VM ids so two services in one harness never share ids.
    pub fn with_vm_id_base(mut self, base: u64) -> Self {
        self.next_vm = base.max(1);
        self
    }

    pub fn add_backend(&mut self, profile: BackendProfile) {
        let rng = ChaCha8Rng::seed_from_u64(profile.seed);
        self.backends.insert(
            profile.name.clone(),
            Backend { profile, claimed_total: 0, released_total: 0, booting: 0, boot_queue: VecDeque::new(), rng },
        );
    }

    pub fn has_backend(&self, id: &str) -> bool {
        self.backends.contains_key(id)
    }

    pub fn backend_ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(|s| s.as_str())
    }

    pub fn profile(&self, id: &str) -> Option<&BackendProfile> {
        self.backends.get(id).map(|b| &b.profile)
    }

    pub fn pool(&self, id: &str) -> Option<PoolStats> {
        self.backends.get(id).map(|b| PoolStats {
            capacity: b.profile.capacity,
            idle: b.idle(),
            live: b.live(),
            claimed_total: b.claimed_total,
            released_total: b.released_total,
        })
    }

    pub fn vm(&self, id: VmId) -> Option<&SimVm> {
        self.vms.get(&id)
    }

    pub fn vm_mut(&mut self, id: VmId) -> Option<&mut SimVm> {
        self.vms.get_mut(&id)
    }

    pub fn status(&self, id: VmId) -> Option<VmStatus> {
        self.vms.get(&id).map(|v| v.descriptor.status)
    }

    pub fn describe(&self, cluster: &VirtualCluster) -> Vec<VmDescriptor> {
        cluster.vm_ids.iter().filter_map(|id| self.vms.get(id).map(|v| v.descriptor.clone())).collect()
    }

    pub fn all_up(&self, vm_ids: &[VmId]) -> bool {
        vm_ids.iter().all(|id| self.status(*id) == Some(VmStatus::Up))
    }

    pub fn any_booting(&self, vm_ids: &[VmId]) -> bool {
        vm_ids.iter().any(|id| self.status(*id) == Some(VmStatus::Booting))
    }

    /// Claims one VM per template and starts (or queues) their boots.
    pub fn create_cluster<E: From<CloudEvent>>(
        &mut self,
        clock: &mut VirtualClock<E>,
        backend_id: &str,
        templates: &[VmTemplate],
    ) -> Result<VirtualCluster, CloudError> {
        let vm_ids = self.claim_vms(clock, backend_id, templates)?;
        Ok(VirtualCluster { backend_id: backend_id.to_string(), vm_ids, created_at: clock.now() })
    }

    /// Claims VMs without wrapping them in a cluster (replacement path).
    pub fn claim_vms<E: From<CloudEvent>>(
        &mut self,
        clock: &mut VirtualClock<E>,
        backend_id: &str,
        templates: &[VmTemplate],
    ) -> Result<Vec<VmId>, CloudError> {
        let backend = self
            .backends
            .get_mut(backend_id)
            .ok_or_else(|| CloudError::UnknownBackend(backend_id.to_string()))?;
        if backend.idle() < templates.len() {
            return Err(CloudError::ClusterUnavailable {
                backend: backend_id.to_string(),
                requested: templates.len(),
                free: backend.idle(),
            });
        }
        let mut ids = Vec::with_capacity(templates.len());
        for t in templates {
            let id = VmId(self.next_vm);
            self.next_vm += 1;
            backend.claimed_total += 1;
            let vm = SimVm {
                descriptor: VmDescriptor {
                    vm_id: id,
                    backend_id: backend_id.to_string(),
                    address: format!("{backend_id}://{id}"),
                    status: VmStatus::Booting,
                },
                template: t.clone(),
                fs: BTreeMap::new(),
                action_log: Vec::new(),
                booted_at: None,
            };
            self.vms.insert(id, vm);
            if backend.boot_slot_free() {
                backend.booting += 1;
                let d = backend.draw_boot_time();
                clock.schedule_in(d, CloudEvent::VmBooted(id).into());
            } else {
                backend.boot_queue.push_back(id);
            }
            ids.push(id);
        }
        Ok(ids)
    }

    /// Releases every VM of the cluster. Safe to call more than once.
    pub fn destroy_cluster(&mut self, cluster: &VirtualCluster) -> usize {
        cluster.vm_ids.iter().filter(|id| self.release_vm(**id)).count()
    }

    /// Returns `true` if the VM was live and is now released.
    pub fn release_vm(&mut self, id: VmId) -> bool {
        let Some(vm) = self.vms.get_mut(&id) else { return false };
        if vm.descriptor.status == VmStatus::Released {
            return false;
        }
        let was_queued = vm.descriptor.status == VmStatus::Booting;
        vm.descriptor.status = VmStatus::Released;
        let backend = self.backends.get_mut(&vm.descriptor.backend_id).expect("vm backend exists");
        backend.released_total += 1;
        if was_queued {
            // A queued build is simply dropped; an in-flight one frees its slot
            // when its boot event fires.
            backend.boot_queue.retain(|q| *q != id);
        }
        true
    }

    /// Marks VMs unreachable at `at` (immediately if `at <= now`).
    pub fn inject_failure<E: From<CloudEvent>>(
        &mut self,
        clock: &mut VirtualClock<E>,
        target: FailureTarget,
        at: VirtualTime,
    ) -> Result<Vec<VmId>, CloudError> {
        let victims = match target {
            FailureTarget::Vm(id) => {
                match self.status(id) {
                    Some(VmStatus::Up) => {}
                    // A VM still booting may be targeted for a later instant.
                    Some(VmStatus::Booting) if at > clock.now() => {}
                    _ => return Err(CloudError::UnknownVm(id)),
                }
                vec![id]
            }
            FailureTarget::Backend { backend_id, count } => {
                let up: Vec<VmId> = self
                    .vms
                    .values()
                    .filter(|v| v.descriptor.backend_id == backend_id && v.descriptor.status == VmStatus::Up)
                    .map(|v| v.descriptor.vm_id)
                    .collect();
                let backend = self
                    .backends
                    .get_mut(&backend_id)
                    .ok_or_else(|| CloudError::UnknownBackend(backend_id.clone()))?;
                let mut pool = up;
                let mut chosen = Vec::new();
                while chosen.len() < count && !pool.is_empty() {
                    let i = backend.rng.gen_range(0..pool.len());
                    chosen.push(pool.swap_remove(i));
                }
                chosen.sort();
                chosen
            }
        };
        for id in &victims {
            if at <= clock.now() {
                self.fail_now(clock, *id);
            } else {
                clock.schedule_at(at, CloudEvent::VmFails(*id).into());
            }
        }
        Ok(victims)
    }

    fn fail_now<E: From<CloudEvent>>(&mut self, clock: &mut VirtualClock<E>, id: VmId) -> bool {
        let Some(vm) = self.vms.get_mut(&id) else { return false };
        if vm.descriptor.status != VmStatus::Up {
            return false;
        }
        vm.descriptor.status = VmStatus::Unreachable;
        let backend_id = vm.descriptor.backend_id.clone();
        if self.backends[&backend_id].profile.has_failure_notifications {
            clock.schedule_at(clock.now(), CloudEvent::FailureNotice { backend_id, vm_id: id }.into());
        }
        true
    }

    pub fn handle_event<E: From<CloudEvent>>(&mut self, clock: &mut VirtualClock<E>, ev: CloudEvent) -> CloudOutcome {
        match ev {
            CloudEvent::VmBooted(id) => {
                let Some(vm) = self.vms.get_mut(&id) else { return CloudOutcome::Nothing };
                let backend_id = vm.descriptor.backend_id.clone();
                let booted = if vm.descriptor.status == VmStatus::Booting {
                    vm.descriptor.status = VmStatus::Up;
                    vm.booted_at = Some(clock.now());
                    true
                } else {
                    false
                };
                let backend = self.backends.get_mut(&backend_id).expect("vm backend exists");
                backend.booting -= 1;
                while backend.boot_slot_free() {
                    let Some(next) = backend.boot_queue.pop_front() else { break };
                    backend.booting += 1;
                    let d = backend.draw_boot_time();
                    clock.schedule_in(d, CloudEvent::VmBooted(next).into());
                }
                if booted {
                    CloudOutcome::Booted(id)
                } else {
                    CloudOutcome::Nothing
                }
            }
            CloudEvent::VmFails(id) => {
                if self.fail_now(clock, id) {
                    CloudOutcome::Failed(id)
                } else {
                    CloudOutcome::Nothing
                }
            }
            CloudEvent::FailureNotice { vm_id, .. } => CloudOutcome::Notified(vm_id),
        }
    }

    pub fn vm_ids_on(&self, backend_id: &str) -> Vec<VmId> {
        self.vms.values().filter(|v| v.descriptor.backend_id == backend_id).map(|v| v.descriptor.vm_id).collect()
    }

    /// Count of VMs per status on one backend.
    pub fn status_counts(&self, backend_id: &str) -> HashMap<VmStatus, usize> {
        let mut m = HashMap::new();
        for v in self.vms.values().filter(|v| v.descriptor.backend_id == backend_id) {
            *m.entry(v.descriptor.status).or_insert(0) += 1;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(capacity: usize, boot_s: u64) -> BackendProfile {
        BackendProfile {
            name: "test".into(),
            capacity,
            vm_boot_latency: VirtualDuration::from_secs(boot_s),
            boot_jitter: VirtualDuration::ZERO,
            max_concurrent_boots: 0,
            api_poll_cost: 1000,
            has_failure_notifications: false,
            seed: 0,
        }
    }

    fn drain(cm: &mut CloudManager, clock: &mut VirtualClock<CloudEvent>, until: VirtualTime) -> Vec<(VirtualTime, CloudOutcome)> {
        let mut out = Vec::new();
        while let Some((t, ev)) = clock.pop_due(until) {
            out.push((t, cm.handle_event(clock, ev)));
        }
        clock.advance(until);
        out
    }

    #[test]
    fn cluster_up_after_boot_latency() {
        let mut cm = CloudManager::new([profile(128, 30)]);
        let mut clock = VirtualClock::new();
        clock.advance(VirtualTime::from_secs(7));
        let cluster = cm.create_cluster(&mut clock, "test", &vec![VmTemplate::default(); 8]).unwrap();
        assert!(cm.any_booting(&cluster.vm_ids));
        let outcomes = drain(&mut cm, &mut clock, VirtualTime::from_secs(1000));
        // oracle: the cluster is UP when the last per-VM boot completes
        let last = outcomes.iter().map(|(t, _)| *t).max().unwrap();
        assert_eq!(last, VirtualTime::from_secs(37));
        assert!(cm.all_up(&cluster.vm_ids));
    }

    #[test]
    fn empty_pool_is_unavailable() {
        let mut cm = CloudManager::new([profile(0, 30)]);
        let mut clock: VirtualClock<CloudEvent> = VirtualClock::new();
        let err = cm.create_cluster(&mut clock, "test", &[VmTemplate::default()]).unwrap_err();
        assert!(matches!(err, CloudError::ClusterUnavailable { requested: 1, free: 0, .. }));
    }

    #[test]
    fn full_capacity_then_one_more_fails() {
        let mut cm = CloudManager::new([profile(128, 30)]);
        let mut clock: VirtualClock<CloudEvent> = VirtualClock::new();
        cm.create_cluster(&mut clock, "test", &vec![VmTemplate::default(); 128]).unwrap();
        assert!(cm.create_cluster(&mut clock, "test", &[VmTemplate::default()]).is_err());
        assert_eq!(cm.pool("test").unwrap().idle, 0);
    }

    #[test]
    fn destroy_restores_pool_and_is_idempotent() {
        let mut cm = CloudManager::new([profile(10, 1)]);
        let mut clock = VirtualClock::new();
        let c = cm.create_cluster(&mut clock, "test", &vec![VmTemplate::default(); 4]).unwrap();
        drain(&mut cm, &mut clock, VirtualTime::from_secs(5));
        assert_eq!(cm.pool("test").unwrap().idle, 6);
        assert_eq!(cm.destroy_cluster(&c), 4);
        assert_eq!(cm.pool("test").unwrap().idle, 10);
        assert_eq!(cm.destroy_cluster(&c), 0);
        assert_eq!(cm.pool("test").unwrap().idle, 10);
    }

    #[test]
    fn destroy_releases_unreachable_vm() {
        let mut cm = CloudManager::new([profile(10, 1)]);
        let mut clock = VirtualClock::new();
        let c = cm.create_cluster(&mut clock, "test", &vec![VmTemplate::default(); 3]).unwrap();
        drain(&mut cm, &mut clock, VirtualTime::from_secs(5));
        cm.inject_failure(&mut clock, FailureTarget::Vm(c.vm_ids[1]), VirtualTime::from_secs(5)).unwrap();
        assert_eq!(cm.status(c.vm_ids[1]), Some(VmStatus::Unreachable));
        cm.destroy_cluster(&c);
        assert_eq!(cm.status(c.vm_ids[1]), Some(VmStatus::Released));
        let pool = cm.pool("test").unwrap();
        assert_eq!(pool.idle, 10);
        assert_eq!(pool.claimed_total - pool.released_total, 0);
    }

    #[test]
    fn notifying_backend_pushes_notice() {
        let mut p = profile(4, 1);
        p.has_failure_notifications = true;
        let mut cm = CloudManager::new([p]);
        let mut clock = VirtualClock::new();
        let c = cm.create_cluster(&mut clock, "test", &[VmTemplate::default()]).unwrap();
        drain(&mut cm, &mut clock, VirtualTime::from_secs(2));
        cm.inject_failure(&mut clock, FailureTarget::Vm(c.vm_ids[0]), VirtualTime::from_secs(10)).unwrap();
        let out = drain(&mut cm, &mut clock, VirtualTime::from_secs(10));
        assert_eq!(
            out,
            vec![
                (VirtualTime::from_secs(10), CloudOutcome::Failed(c.vm_ids[0])),
                (VirtualTime::from_secs(10), CloudOutcome::Notified(c.vm_ids[0])),
            ]
        );
    }

    #[test]
    fn silent_backend_pushes_nothing() {
        let mut cm = CloudManager::new([profile(4, 1)]);
        let mut clock = VirtualClock::new();
        let c = cm.create_cluster(&mut clock, "test", &[VmTemplate::default()]).unwrap();
        drain(&mut cm, &mut clock, VirtualTime::from_secs(2));
        cm.inject_failure(&mut clock, FailureTarget::Vm(c.vm_ids[0]), VirtualTime::from_secs(2)).unwrap();
        assert!(drain(&mut cm, &mut clock, VirtualTime::from_secs(100)).is_empty());
        assert_eq!(cm.status(c.vm_ids[0]), Some(VmStatus::Unreachable));
    }

    #[test]
    fn inject_on_released_vm_is_unknown() {
        let mut cm = CloudManager::new([profile(4, 1)]);
        let mut clock = VirtualClock::new();
        let c = cm.create_cluster(&mut clock, "test", &[VmTemplate::default()]).unwrap();
        drain(&mut cm, &mut clock, VirtualTime::from_secs(2));
        cm.destroy_cluster(&c);
        assert_eq!(
            cm.inject_failure(&mut clock, FailureTarget::Vm(c.vm_ids[0]), VirtualTime::from_secs(2)),
            Err(CloudError::UnknownVm(c.vm_ids[0]))
        );
    }

    #[test]
    fn limited_front_end_boots_sequentially() {
        let mut p = profile(10, 2);
        p.max_concurrent_boots = 1;
        let mut cm = CloudManager::new([p]);
        let mut clock = VirtualClock::new();
        cm.create_cluster(&mut clock, "test", &vec![VmTemplate::default(); 3]).unwrap();
        let times: Vec<_> = drain(&mut cm, &mut clock, VirtualTime::from_secs(100)).into_iter().map(|(t, _)| t.as_millis()).collect();
        assert_eq!(times, vec![2000, 4000, 6000]);
    }

    #[test]
    fn releasing_queued_vm_skips_its_boot() {
        let mut p = profile(10, 2);
        p.max_concurrent_boots = 1;
        let mut cm = CloudManager::new([p]);
        let mut clock = VirtualClock::new();
        let c = cm.create_cluster(&mut clock, "test", &vec![VmTemplate::default(); 3]).unwrap();
        cm.release_vm(c.vm_ids[1]);
        let out = drain(&mut cm, &mut clock, VirtualTime::from_secs(100));
        assert_eq!(out, vec![
            (VirtualTime::from_secs(2), CloudOutcome::Booted(c.vm_ids[0])),
            (VirtualTime::from_secs(4), CloudOutcome::Booted(c.vm_ids[2])),
        ]);
    }

    #[test]
    fn seeded_jitter_is_deterministic() {
        let run = || {
            let mut cm = CloudManager::new([BackendProfile::openstack_sim()]);
            let mut clock = VirtualClock::new();
            cm.create_cluster(&mut clock, OPENSTACK_SIM, &vec![VmTemplate::default(); 16]).unwrap();
            drain(&mut cm, &mut clock, VirtualTime::from_secs(10_000))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn profiles_from_toml() {
        let src = r#"
            [backends.edge]
            capacity = 12
            boot_latency_s = 4.5
            poll_bytes_per_s = 300
            failure_notifications = true
        "#;
        let p = load_profiles(src).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].name, "edge");
        assert_eq!(p[0].vm_boot_latency, VirtualDuration(4500));
        assert!(p[0].has_failure_notifications);
        assert!(load_profiles("[backends.x]\ncapacity = 1\nboot_latency_s = -2\npoll_bytes_per_s = 1\nfailure_notifications = false").is_err());
    }
}
