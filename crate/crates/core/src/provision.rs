//! Provision Manager: remote command execution on cluster VMs with bounded
//! parallelism and connection reuse.
//!
//! Commands are placed on `max_concurrent` connection slots, earliest free
//! slot first, in VM-index order. With uniform costs this is exactly
//! `ceil(n / max_concurrent)` waves. A command on a VM without an open
//! session also pays `setup_cost`; with `reuse` enabled the session stays
//! open for later calls.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloudsim::{CloudManager, VirtualDuration, VirtualTime, VmId, VmStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteAction {
    pub name: String,
    pub key: String,
    pub value: String,
}

impl RemoteAction {
    pub fn set(name: &str, key: &str, value: impl Into<String>) -> Self {
        RemoteAction { name: name.into(), key: key.into(), value: value.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProvisionScript {
    pub internal_actions: Vec<RemoteAction>,
    pub user_actions: Vec<RemoteAction>,
}

impl ProvisionScript {
    /// Actions in execution order: internal first, then user.
    pub fn ordered(&self) -> impl Iterator<Item = (&'static str, &RemoteAction)> {
        self.internal_actions
            .iter()
            .map(|a| ("internal", a))
            .chain(self.user_actions.iter().map(|a| ("user", a)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionBudget {
    pub max_concurrent: usize,
    pub per_command_latency: VirtualDuration,
    pub setup_cost: VirtualDuration,
    pub reuse: bool,
}

impl Default for ConnectionBudget {
    fn default() -> Self {
        ConnectionBudget {
            max_concurrent: 16,
            per_command_latency: VirtualDuration::from_millis(1500),
            setup_cost: VirtualDuration::from_millis(500),
            reuse: true,
        }
    }
}

impl ConnectionBudget {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrent < 1 {
            return Err("ssh_max_concurrent must be >= 1".into());
        }
        Ok(())
    }

    /// Duration of one wave on fresh connections.
    pub fn fresh_wave(&self) -> VirtualDuration {
        self.setup_cost + self.per_command_latency
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("node {0} unreachable")]
    NodeUnreachable(VmId),
}

/// Open sessions, keyed by VM.
#[derive(Debug, Clone, Default)]
pub struct ConnectionCache {
    open: BTreeSet<VmId>,
}

impl ConnectionCache {
    pub fn is_open(&self, vm: VmId) -> bool {
        self.open.contains(&vm)
    }

    pub fn forget(&mut self, vm: VmId) {
        self.open.remove(&vm);
    }

    pub fn len(&self) -> usize {
        self.open.len()
    }

    pub fn is_empty(&self) -> bool {
        self.open.is_empty()
    }
}

/// Connection slots. Per-application execution uses a fresh set per call; a
/// service-wide set shared across calls models a global limit.
#[derive(Debug, Clone)]
pub struct SlotPool {
    free_at: Vec<VirtualTime>,
}

impl SlotPool {
    pub fn new(slots: usize) -> Self {
        SlotPool { free_at: vec![VirtualTime::ZERO; slots.max(1)] }
    }

    fn take_earliest(&mut self, now: VirtualTime) -> &mut VirtualTime {
        let i = (0..self.free_at.len()).min_by_key(|&i| (self.free_at[i].max(now), i)).expect("non-empty");
        let slot = &mut self.free_at[i];
        *slot = (*slot).max(now);
        slot
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    /// One entry per target VM, in the order given.
    pub results: Vec<Result<(), ExecError>>,
    pub elapsed: VirtualDuration,
    pub waves: usize,
}

impl ExecOutcome {
    pub fn failures(&self) -> Vec<VmId> {
        self.results
            .iter()
            .filter_map(|r| match r {
                Err(ExecError::NodeUnreachable(v)) => Some(*v),
                Ok(()) => None,
            })
            .collect()
    }
}

/// Runs `script` on every VM. Effects land on the simulated VMs immediately;
/// `elapsed` says how long the batch occupies the caller.
pub fn exec_parallel(
    cloud: &mut CloudManager,
    vms: &[VmId],
    script: &ProvisionScript,
    budget: &ConnectionBudget,
    cache: &mut ConnectionCache,
    slots: Option<&mut SlotPool>,
    now: VirtualTime,
) -> ExecOutcome {
    let mut local = SlotPool { free_at: vec![now; budget.max_concurrent.max(1)] };
    let pool = slots.unwrap_or(&mut local);
    let mut end = now;
    let mut results = Vec::with_capacity(vms.len());
    for &vm in vms {
        let mut cost = budget.per_command_latency;
        if !(budget.reuse && cache.is_open(vm)) {
            cost += budget.setup_cost;
        }
        let slot = pool.take_earliest(now);
        *slot += cost;
        end = end.max(*slot);

        let up = cloud.status(vm) == Some(VmStatus::Up);
        if !up {
            cache.forget(vm);
            results.push(Err(ExecError::NodeUnreachable(vm)));
            continue;
        }
        if budget.reuse {
            cache.open.insert(vm);
        }
        let sim = cloud.vm_mut(vm).expect("status checked");
        for (kind, action) in script.ordered() {
            sim.fs.insert(action.key.clone(), action.value.clone());
            sim.action_log.push(format!("{kind}:{}", action.name));
        }
        results.push(Ok(()));
    }
    ExecOutcome {
        results,
        elapsed: end - now,
        waves: vms.len().div_ceil(budget.max_concurrent.max(1)),
    }
}

/// The standard preparation script for one application.
pub fn default_script(app_dir: &str, user: &[(&str, String)]) -> ProvisionScript {
    ProvisionScript {
        internal_actions: vec![
            RemoteAction::set("create_checkpoint_dir", "ckpt_dir", app_dir),
            RemoteAction::set("install_monitor_daemon", "monitor_daemon", "installed"),
        ],
        user_actions: user.iter().map(|(k, v)| RemoteAction::set(&format!("set_{k}"), k, v.clone())).collect(),
    }
}
