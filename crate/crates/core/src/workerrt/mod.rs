//! Deterministic distributed workload runner with coordinated checkpoint and
//! restart.
//!
//! One [`Coordinator`] drives one daemon per VM. Daemons exchange messages
//! over reliable FIFO channels. A checkpoint quiesces every daemon at a
//! message boundary, pushes a barrier into each channel, drains the channels
//! into the receivers' inboxes and serializes each daemon with
//! [`ProcessState::encode`]. Restart rebuilds the daemons from those blobs
//! under a fresh coordinator id.

mod blob;
mod runtime;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blob::{Message, Phase, ProcessState, BLOB_VERSION};
pub use runtime::{Action, Coordinator, Daemon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoordinatorId(pub u64);

impl std::fmt::Display for CoordinatorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "coord-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    /// Every process adds a seeded contribution and passes its partial to the
    /// right-hand neighbour each iteration.
    RingSum,
    /// One process counting to `iterations`.
    SingleCounter,
}

fn default_step_s() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub iterations: u64,
    #[serde(default)]
    pub payload_bytes_per_msg: u32,
    #[serde(default)]
    pub state_bytes_total: u64,
    #[serde(default)]
    pub seed: u64,
    /// Virtual seconds per scheduler round when run inside the service.
    #[serde(default = "default_step_s")]
    pub step_s: f64,
}

impl WorkloadSpec {
    pub fn ring_sum(iterations: u64) -> Self {
        WorkloadSpec {
            kind: WorkloadKind::RingSum,
            iterations,
            payload_bytes_per_msg: 16,
            state_bytes_total: 0,
            seed: 0,
            step_s: default_step_s(),
        }
    }

    pub fn single_counter(iterations: u64) -> Self {
        WorkloadSpec { kind: WorkloadKind::SingleCounter, ..Self::ring_sum(iterations) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_state_bytes(mut self, total: u64) -> Self {
        self.state_bytes_total = total;
        self
    }

    /// Checks the spec against a process count.
    pub fn check(&self, processes: usize) -> Result<(), RtError> {
        if self.iterations < 1 {
            return Err(RtError::InvalidSpec("iterations must be >= 1".into()));
        }
        if !(self.step_s.is_finite() && self.step_s > 0.0) {
            return Err(RtError::InvalidSpec("step_s must be positive".into()));
        }
        let ok = match self.kind {
            WorkloadKind::RingSum => processes >= 2,
            WorkloadKind::SingleCounter => processes == 1,
        };
        if !ok {
            return Err(RtError::ClusterMismatch { kind: self.kind, processes });
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RtError {
    #[error("{kind:?} cannot run on {processes} process(es)")]
    ClusterMismatch { kind: WorkloadKind, processes: usize },
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("quiesce timed out: daemon {0} did not reach the barrier")]
    QuiesceTimeout(usize),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("expected {expected} images, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("unknown daemon {0}")]
    UnknownDaemon(usize),
}

/// SplitMix64 step. Small, seedable and fully captured by one `u64`, which is
/// what the image format stores.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Initial RNG state of process `index` for a workload seed.
pub fn process_seed(seed: u64, index: usize) -> u64 {
    let mut s = seed ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut s)
}

/// Bounded per-iteration contribution drawn from a process RNG.
pub fn contribution(rng_state: &mut u64) -> u64 {
    splitmix64(rng_state) % 1000
}

/// Multiplier applied to a ring accumulator before folding in the received
/// partial, so the result depends on message order.
pub const RING_MIX: u64 = 1_000_003;
