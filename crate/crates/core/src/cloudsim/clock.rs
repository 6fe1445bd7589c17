//! Virtual time and the discrete-event queue.
//!
//! Everything in the simulator runs against [`VirtualClock`]. Time only moves
//! when the driver calls [`VirtualClock::advance`] or pops the next event, so a
//! scenario replayed with the same seed produces the same trace.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// A point in virtual time, in milliseconds since the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualTime(pub u64);

/// A span of virtual time, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualDuration(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn from_secs(s: u64) -> Self {
        VirtualTime(s * 1000)
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Time elapsed since `earlier`, saturating at zero.
    pub fn since(self, earlier: VirtualTime) -> VirtualDuration {
        VirtualDuration(self.0.saturating_sub(earlier.0))
    }
}

impl VirtualDuration {
    pub const ZERO: VirtualDuration = VirtualDuration(0);

    pub fn from_secs(s: u64) -> Self {
        VirtualDuration(s * 1000)
    }

    pub fn from_millis(ms: u64) -> Self {
        VirtualDuration(ms)
    }

    /// Converts fractional seconds, rounding to the nearest millisecond.
    /// Returns `None` for negative or non-finite input.
    pub fn try_from_secs_f64(s: f64) -> Option<Self> {
        if !s.is_finite() || s < 0.0 {
            return None;
        }
        Some(VirtualDuration((s * 1000.0).round() as u64))
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl Add<VirtualDuration> for VirtualTime {
    type Output = VirtualTime;
    fn add(self, rhs: VirtualDuration) -> VirtualTime {
        VirtualTime(self.0 + rhs.0)
    }
}

impl AddAssign<VirtualDuration> for VirtualTime {
    fn add_assign(&mut self, rhs: VirtualDuration) {
        self.0 += rhs.0;
    }
}

impl Add for VirtualDuration {
    type Output = VirtualDuration;
    fn add(self, rhs: VirtualDuration) -> VirtualDuration {
        VirtualDuration(self.0 + rhs.0)
    }
}

impl AddAssign for VirtualDuration {
    fn add_assign(&mut self, rhs: VirtualDuration) {
        self.0 += rhs.0;
    }
}

impl Sub for VirtualTime {
    type Output = VirtualDuration;
    fn sub(self, rhs: VirtualTime) -> VirtualDuration {
        self.since(rhs)
    }
}

impl std::ops::Mul<u64> for VirtualDuration {
    type Output = VirtualDuration;
    fn mul(self, rhs: u64) -> VirtualDuration {
        VirtualDuration(self.0 * rhs)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}s", self.0 / 1000, self.0 % 1000)
    }
}

impl fmt::Display for VirtualDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}s", self.0 / 1000, self.0 % 1000)
    }
}

struct Pending<E> {
    at: VirtualTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Pending<E> {}

impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Pending<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.cmp(&self.at).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Discrete-event clock. Events fire in timestamp order; ties fire in
/// insertion order.
pub struct VirtualClock<E> {
    now: VirtualTime,
    seq: u64,
    pending: BinaryHeap<Pending<E>>,
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> VirtualClock<E> {
    pub fn new() -> Self {
        Self {
            now: VirtualTime::ZERO,
            seq: 0,
            pending: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    /// Schedules `event` at `at`. Timestamps in the past are clamped to now.
    pub fn schedule_at(&mut self, at: VirtualTime, event: E) {
        let at = at.max(self.now);
        let seq = self.seq;
        self.seq += 1;
        self.pending.push(Pending { at, seq, event });
    }

    pub fn schedule_in(&mut self, delay: VirtualDuration, event: E) {
        self.schedule_at(self.now + delay, event);
    }

    pub fn peek_time(&self) -> Option<VirtualTime> {
        self.pending.peek().map(|p| p.at)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Pops the next event if it is due at or before `until`, moving `now` to
    /// its timestamp.
    pub fn pop_due(&mut self, until: VirtualTime) -> Option<(VirtualTime, E)> {
        match self.pending.peek() {
            Some(p) if p.at <= until => {
                let p = self.pending.pop().expect("peeked");
                self.now = p.at;
                Some((p.at, p.event))
            }
            _ => None,
        }
    }

    /// Fires every event with timestamp `<= until` and sets `now = until`.
    ///
    /// Callers that need to react to each event (and possibly schedule more
    /// work at the same instant) should loop on [`pop_due`](Self::pop_due)
    /// instead.
    pub fn advance(&mut self, until: VirtualTime) -> Vec<(VirtualTime, E)> {
        let mut fired = Vec::new();
        while let Some(ev) = self.pop_due(until) {
            fired.push(ev);
        }
        self.now = self.now.max(until);
        fired
    }

    /// Moves `now` forward without firing anything. Panics in debug builds if
    /// an event would be skipped.
    pub fn set_now(&mut self, t: VirtualTime) {
        debug_assert!(self.peek_time().map_or(true, |p| p >= t), "skipping pending events");
        self.now = self.now.max(t);
    }

    /// Drops all pending events matching `pred`.
    pub fn cancel_where(&mut self, mut pred: impl FnMut(&E) -> bool) {
        let old = std::mem::take(&mut self.pending);
        self.pending = old.into_iter().filter(|p| !pred(&p.event)).collect();
    }
}
