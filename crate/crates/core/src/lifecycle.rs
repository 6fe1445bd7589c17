//! Application lifecycle: states, events, the submission request and the
//! transition function every other module drives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloudsim::{VirtualCluster, VirtualDuration, VirtualTime, VmTemplate};
use crate::monitor::HookSpec;
use crate::workerrt::{CoordinatorId, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AppId(pub u64);

impl std::fmt::Display for AppId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AppState {
    Creating,
    Provision,
    Ready,
    Running,
    Terminating,
    Error,
}

impl AppState {
    pub const ALL: [AppState; 6] = [
        AppState::Creating,
        AppState::Provision,
        AppState::Ready,
        AppState::Running,
        AppState::Terminating,
        AppState::Error,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AppEvent {
    VmsAllocated,
    ProvisionDone,
    StartCommand,
    DeleteRequest,
    FatalError,
    /// Passive recovery: replacement VMs are being claimed.
    RecoveryBegun,
    /// In-place restart completed.
    RecoveryDone,
}

impl AppEvent {
    pub const ALL: [AppEvent; 7] = [
        AppEvent::VmsAllocated,
        AppEvent::ProvisionDone,
        AppEvent::StartCommand,
        AppEvent::DeleteRequest,
        AppEvent::FatalError,
        AppEvent::RecoveryBegun,
        AppEvent::RecoveryDone,
    ];
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("illegal transition: {event:?} in state {state:?}")]
pub struct IllegalTransition {
    pub state: AppState,
    pub event: AppEvent,
}

/// Successor state for `(state, event)`.
pub fn transition(state: AppState, event: AppEvent) -> Result<AppState, IllegalTransition> {
    use AppEvent::*;
    use AppState::*;
    match (state, event) {
        (_, DeleteRequest) => Ok(Terminating),
        (Terminating, _) => Err(IllegalTransition { state, event }),
        (_, FatalError) => Ok(Error),
        (Creating, VmsAllocated) => Ok(Provision),
        (Provision, ProvisionDone) => Ok(Ready),
        (Ready, StartCommand) => Ok(Running),
        (Running, RecoveryBegun) => Ok(Creating),
        (Running, RecoveryDone) => Ok(Running),
        _ => Err(IllegalTransition { state, event }),
    }
}

/// Transition taken without any external event. ERROR always moves on to
/// TERMINATING.
pub fn auto_transition(state: AppState) -> Option<AppState> {
    match state {
        AppState::Error => Some(AppState::Terminating),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    UserInitiated,
    Periodic,
    AppInitiated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPolicy {
    pub mode: CheckpointMode,
    pub period: Option<VirtualDuration>,
}

impl CheckpointPolicy {
    pub const DEFAULT_PERIOD_S: u64 = 60;

    pub fn periodic(period: VirtualDuration) -> Self {
        CheckpointPolicy { mode: CheckpointMode::Periodic, period: Some(period) }
    }

    pub fn user_initiated() -> Self {
        CheckpointPolicy { mode: CheckpointMode::UserInitiated, period: None }
    }

    pub fn app_initiated() -> Self {
        CheckpointPolicy { mode: CheckpointMode::AppInitiated, period: None }
    }
}

impl Default for CheckpointPolicy {
    fn default() -> Self {
        CheckpointPolicy::periodic(VirtualDuration::from_secs(Self::DEFAULT_PERIOD_S))
    }
}

/// Checkpoint policy as it appears in a request body.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub mode: Option<CheckpointMode>,
    pub period_s: Option<f64>,
}

/// Submission request exactly as parsed from JSON, before validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AsrDocument {
    #[serde(default)]
    pub vm_templates: Vec<VmTemplate>,
    #[serde(default)]
    pub checkpoint_policy: Option<PolicyDocument>,
    pub app_spec: Option<WorkloadSpec>,
    #[serde(default)]
    pub backend_id: Option<String>,
    #[serde(default)]
    pub health_hook: Option<HookSpec>,
    /// Create the record and wait for uploaded images plus a restart instead
    /// of starting the workload from scratch (clone and migration targets).
    #[serde(default)]
    pub restore_only: bool,
}

/// A validated submission request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppSubmissionRequest {
    pub vm_templates: Vec<VmTemplate>,
    pub checkpoint_policy: CheckpointPolicy,
    pub app_spec: WorkloadSpec,
    pub backend_id: String,
    pub health_hook: HookSpec,
    pub restore_only: bool,
}

impl AppSubmissionRequest {
    pub fn to_document(&self) -> AsrDocument {
        AsrDocument {
            vm_templates: self.vm_templates.clone(),
            checkpoint_policy: Some(PolicyDocument {
                mode: Some(self.checkpoint_policy.mode),
                period_s: self.checkpoint_policy.period.map(|p| p.as_secs_f64()),
            }),
            app_spec: Some(self.app_spec.clone()),
            backend_id: Some(self.backend_id.clone()),
            health_hook: Some(self.health_hook.clone()),
            restore_only: self.restore_only,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid ASR: {0}")]
pub struct InvalidAsr(pub String);

/// Validates a submission and fills defaults. `backend_exists` answers
/// whether a backend id is configured; `default_backend` is used when the
/// request names none.
pub fn validate_asr(
    doc: AsrDocument,
    backend_exists: impl Fn(&str) -> bool,
    default_backend: &str,
) -> Result<AppSubmissionRequest, InvalidAsr> {
    let bad = |s: String| InvalidAsr(s);
    if doc.vm_templates.is_empty() {
        return Err(bad("vm_templates must not be empty".into()));
    }
    for (i, t) in doc.vm_templates.iter().enumerate() {
        t.validate().map_err(|e| bad(format!("vm_templates[{i}]: {e}")))?;
    }

    let policy = match doc.checkpoint_policy {
        None => CheckpointPolicy::default(),
        Some(p) => {
            let mode = p.mode.unwrap_or(CheckpointMode::Periodic);
            match (mode, p.period_s) {
                (CheckpointMode::Periodic, period) => {
                    let secs = period.unwrap_or(CheckpointPolicy::DEFAULT_PERIOD_S as f64);
                    let d = VirtualDuration::try_from_secs_f64(secs)
                        .filter(|d| !d.is_zero())
                        .ok_or_else(|| bad(format!("checkpoint period must be positive, got {secs}")))?;
                    CheckpointPolicy::periodic(d)
                }
                (m, None) => CheckpointPolicy { mode: m, period: None },
                (m, Some(_)) => return Err(bad(format!("period is only allowed with periodic mode, not {m:?}"))),
            }
        }
    };

    let backend = doc.backend_id.unwrap_or_else(|| default_backend.to_string());
    if !backend_exists(&backend) {
        return Err(bad(format!("unknown backend {backend}")));
    }

    let n = doc.vm_templates.len();
    let spec = doc.app_spec.unwrap_or_else(|| {
        if n == 1 {
            WorkloadSpec::single_counter(100)
        } else {
            WorkloadSpec::ring_sum(100)
        }
    });
    spec.check(n).map_err(|e| bad(e.to_string()))?;

    Ok(AppSubmissionRequest {
        vm_templates: doc.vm_templates,
        checkpoint_policy: policy,
        app_spec: spec,
        backend_id: backend,
        health_hook: doc.health_hook.unwrap_or_default(),
        restore_only: doc.restore_only,
    })
}

/// One managed application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationRecord {
    pub app_id: AppId,
    pub state: AppState,
    pub asr: AppSubmissionRequest,
    pub cluster: Option<VirtualCluster>,
    pub event_seq: u64,
    pub created_at: VirtualTime,
    pub coordinator: Option<CoordinatorId>,
    pub error: Option<String>,
    /// Final workload output (hex) once the computation completed.
    pub output: Option<String>,
}

impl ApplicationRecord {
    pub fn new(app_id: AppId, asr: AppSubmissionRequest, created_at: VirtualTime) -> Self {
        ApplicationRecord {
            app_id,
            state: AppState::Creating,
            asr,
            cluster: None,
            event_seq: 0,
            created_at,
            coordinator: None,
            error: None,
            output: None,
        }
    }

    /// Applies `event`; on an illegal pair the record is left unchanged.
    pub fn apply(&mut self, event: AppEvent) -> Result<AppState, IllegalTransition> {
        let next = transition(self.state, event)?;
        self.state = next;
        self.event_seq += 1;
        Ok(next)
    }
}
