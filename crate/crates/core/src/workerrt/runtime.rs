use std::collections::VecDeque;

use super::blob::{Message, Phase, ProcessState};
use super::{contribution, process_seed, splitmix64, CoordinatorId, RtError, WorkloadKind, WorkloadSpec, RING_MIX};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Envelope {
    Data(Message),
    Barrier(CoordinatorId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Channel {
    from: usize,
    to: usize,
    queue: VecDeque<Envelope>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Daemon {
    pub state: ProcessState,
    /// Value the health hook reports; an unhealthy daemon is hung.
    pub healthy: bool,
    /// False while the hosting VM is unreachable.
    pub reachable: bool,
    pub last_progress_round: u64,
}

impl Daemon {
    fn can_act(&self) -> bool {
        self.healthy && self.reachable
    }
}

/// A single scheduling decision, exposed so tests can explore interleavings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    /// The daemon's next local step: send, consume one inbox message, or count.
    Step(usize),
    /// Move the head of channel `c` into its receiver's inbox.
    Deliver(usize),
}

/// One application coordinator and the daemons it controls.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Coordinator {
    id: CoordinatorId,
    spec_kind: WorkloadKind,
    iterations: u64,
    payload_bytes: u32,
    daemons: Vec<Daemon>,
    channels: Vec<Channel>,
    round: u64,
}

fn ring_channels(n: usize, kind: WorkloadKind) -> Vec<Channel> {
    match kind {
        WorkloadKind::SingleCounter => Vec::new(),
        // channel i carries messages into process i from its left neighbour
        WorkloadKind::RingSum => (0..n)
            .map(|to| Channel { from: (to + n - 1) % n, to, queue: VecDeque::new() })
            .collect(),
    }
}

fn padding_bytes(seed: u64, index: usize, len: usize) -> Vec<u8> {
    let mut s = seed ^ 0xA5A5_A5A5 ^ (index as u64) << 17;
    let mut out = Vec::with_capacity(len + 8);
    while out.len() < len {
        out.extend_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    out.truncate(len);
    out
}

impl Coordinator {
    /// Launches one daemon per process.
    pub fn start(id: CoordinatorId, spec: &WorkloadSpec, processes: usize) -> Result<Self, RtError> {
        spec.check(processes)?;
        let pad = (spec.state_bytes_total / processes as u64) as usize;
        let daemons = (0..processes)
            .map(|i| Daemon {
                state: ProcessState {
                    vm_index: i as u32,
                    process_count: processes as u32,
                    iteration: 0,
                    phase: Phase::Send,
                    accumulator: 0,
                    inbox: Vec::new(),
                    rng_state: process_seed(spec.seed, i),
                    sent: 0,
                    consumed: 0,
                    padding: padding_bytes(spec.seed, i, pad),
                },
                healthy: true,
                reachable: true,
                last_progress_round: 0,
            })
            .collect();
        Ok(Coordinator {
            id,
            spec_kind: spec.kind,
            iterations: spec.iterations,
            payload_bytes: spec.payload_bytes_per_msg,
            daemons,
            channels: ring_channels(processes, spec.kind),
            round: 0,
        })
    }

    /// Rebuilds the daemons from checkpoint blobs under coordinator `id`.
    pub fn restart(id: CoordinatorId, spec: &WorkloadSpec, blobs: &[Vec<u8>], cluster_size: usize) -> Result<Self, RtError> {
        if blobs.len() != cluster_size {
            return Err(RtError::CountMismatch { expected: cluster_size, got: blobs.len() });
        }
        spec.check(cluster_size)?;
        let mut states = blobs.iter().map(|b| ProcessState::decode(b)).collect::<Result<Vec<_>, _>>()?;
        states.sort_by_key(|s| s.vm_index);
        for (i, s) in states.iter().enumerate() {
            if s.process_count as usize != cluster_size {
                return Err(RtError::CountMismatch { expected: s.process_count as usize, got: cluster_size });
            }
            if s.vm_index as usize != i {
                return Err(RtError::CorruptImage(format!("missing image for process {i}")));
            }
        }
        let daemons = states
            .into_iter()
            .map(|state| Daemon { state, healthy: true, reachable: true, last_progress_round: 0 })
            .collect();
        Ok(Coordinator {
            id,
            spec_kind: spec.kind,
            iterations: spec.iterations,
            payload_bytes: spec.payload_bytes_per_msg,
            daemons,
            channels: ring_channels(cluster_size, spec.kind),
            round: 0,
        })
    }

    pub fn id(&self) -> CoordinatorId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.daemons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.daemons.is_empty()
    }

    pub fn daemon(&self, i: usize) -> Option<&Daemon> {
        self.daemons.get(i)
    }

    pub fn daemons(&self) -> &[Daemon] {
        &self.daemons
    }

    pub fn rounds(&self) -> u64 {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.daemons.iter().all(|d| d.state.phase == Phase::Done)
    }

    /// Lowest completed iteration across daemons.
    pub fn progress(&self) -> u64 {
        self.daemons.iter().map(|d| d.state.iteration).min().unwrap_or(0)
    }

    pub fn accumulators(&self) -> Vec<u64> {
        self.daemons.iter().map(|d| d.state.accumulator).collect()
    }

    /// Final output: every accumulator, little-endian, in process order.
    pub fn output(&self) -> Option<Vec<u8>> {
        self.is_finished()
            .then(|| self.daemons.iter().flat_map(|d| d.state.accumulator.to_le_bytes()).collect())
    }

    pub fn set_health(&mut self, i: usize, healthy: bool) -> Result<(), RtError> {
        let d = self.daemons.get_mut(i).ok_or(RtError::UnknownDaemon(i))?;
        d.healthy = healthy;
        Ok(())
    }

    pub fn set_reachable(&mut self, i: usize, reachable: bool) -> Result<(), RtError> {
        let d = self.daemons.get_mut(i).ok_or(RtError::UnknownDaemon(i))?;
        d.reachable = reachable;
        Ok(())
    }

    pub fn messages_sent(&self) -> u64 {
        self.daemons.iter().map(|d| d.state.sent).sum()
    }

    pub fn messages_consumed(&self) -> u64 {
        self.daemons.iter().map(|d| d.state.consumed).sum()
    }

    /// Data messages currently inside channels.
    pub fn in_flight(&self) -> usize {
        self.channels
            .iter()
            .map(|c| c.queue.iter().filter(|e| matches!(e, Envelope::Data(_))).count())
            .sum()
    }

    pub fn inbox_total(&self) -> usize {
        self.daemons.iter().map(|d| d.state.inbox.len()).sum()
    }

    fn step_enabled(&self, i: usize) -> bool {
        let d = &self.daemons[i];
        d.can_act()
            && match d.state.phase {
                Phase::Send => true,
                Phase::Recv => !d.state.inbox.is_empty(),
                Phase::Done => false,
            }
    }

    pub fn enabled_actions(&self) -> Vec<Action> {
        let mut v: Vec<Action> = (0..self.daemons.len()).filter(|&i| self.step_enabled(i)).map(Action::Step).collect();
        for (c, ch) in self.channels.iter().enumerate() {
            if !ch.queue.is_empty() && self.daemons[ch.to].reachable {
                v.push(Action::Deliver(c));
            }
        }
        v
    }

    /// Applies an action. Disabled actions are ignored and return `false`.
    pub fn apply(&mut self, action: Action) -> bool {
        match action {
            Action::Step(i) => {
                if i >= self.daemons.len() || !self.step_enabled(i) {
                    return false;
                }
                self.step(i);
                self.daemons[i].last_progress_round = self.round;
                true
            }
            Action::Deliver(c) => {
                let Some(ch) = self.channels.get_mut(c) else { return false };
                if !self.daemons[ch.to].reachable {
                    return false;
                }
                match ch.queue.pop_front() {
                    Some(Envelope::Data(m)) => {
                        self.daemons[ch.to].state.inbox.push(m);
                        true
                    }
                    Some(b @ Envelope::Barrier(_)) => {
                        // barriers only exist while a checkpoint is draining
                        ch.queue.push_front(b);
                        false
                    }
                    None => false,
                }
            }
        }
    }

    fn step(&mut self, i: usize) {
        let n = self.daemons.len();
        let iterations = self.iterations;
        let payload_len = self.payload_bytes as usize;
        let kind = self.spec_kind;
        let st = &mut self.daemons[i].state;
        match (kind, st.phase) {
            (WorkloadKind::SingleCounter, Phase::Send) => {
                let c = contribution(&mut st.rng_state);
                st.accumulator = st.accumulator.wrapping_add(c);
                st.iteration += 1;
                if st.iteration >= iterations {
                    st.phase = Phase::Done;
                }
            }
            (WorkloadKind::RingSum, Phase::Send) => {
                let c = contribution(&mut st.rng_state);
                let value = st.accumulator.wrapping_add(c);
                let payload = value.to_le_bytes().iter().copied().cycle().take(payload_len).collect();
                let msg = Message { from: i as u32, iteration: st.iteration, value, payload };
                st.sent += 1;
                st.phase = Phase::Recv;
                let to = (i + 1) % n;
                self.channels[to].queue.push_back(Envelope::Data(msg));
            }
            (WorkloadKind::RingSum, Phase::Recv) => {
                let m = st.inbox.remove(0);
                debug_assert_eq!(m.iteration, st.iteration, "FIFO ring delivers iterations in order");
                st.accumulator = st.accumulator.wrapping_mul(RING_MIX).wrapping_add(m.value);
                st.consumed += 1;
                st.iteration += 1;
                st.phase = if st.iteration >= iterations { Phase::Done } else { Phase::Send };
            }
            _ => {}
        }
    }

    /// One scheduler round: deliver everything sent in earlier rounds, then
    /// let each runnable daemon take one step in index order.
    /// Returns whether anything changed.
    pub fn round(&mut self) -> bool {
        let mut progressed = false;
        for c in 0..self.channels.len() {
            while self.apply(Action::Deliver(c)) {
                progressed = true;
            }
        }
        for i in 0..self.daemons.len() {
            if self.apply(Action::Step(i)) {
                progressed = true;
            }
        }
        self.round += 1;
        progressed
    }

    /// Runs rounds until finished or stuck. Returns whether it finished.
    pub fn run_to_completion(&mut self) -> bool {
        while !self.is_finished() {
            if !self.round() {
                return false;
            }
        }
        true
    }

    /// Coordinated checkpoint. On error nothing has been modified.
    pub fn checkpoint(&mut self) -> Result<Vec<Vec<u8>>, RtError> {
        if let Some(i) = self.daemons.iter().position(|d| !d.can_act()) {
            return Err(RtError::QuiesceTimeout(i));
        }
        // every daemon is now stopped at a message boundary; mark each channel
        for ch in &mut self.channels {
            ch.queue.push_back(Envelope::Barrier(self.id));
        }
        let mut barrier_seen = vec![false; self.channels.len()];
        for (c, ch) in self.channels.iter_mut().enumerate() {
            while let Some(env) = ch.queue.pop_front() {
                match env {
                    Envelope::Data(m) => self.daemons[ch.to].state.inbox.push(m),
                    Envelope::Barrier(id) if id == self.id => {
                        barrier_seen[c] = true;
                        break;
                    }
                    Envelope::Barrier(_) => {}
                }
            }
        }
        debug_assert!(barrier_seen.iter().all(|b| *b));
        debug_assert_eq!(
            self.messages_sent() - self.messages_consumed(),
            self.inbox_total() as u64,
            "cut must capture every in-flight message"
        );
        Ok(self.daemons.iter().map(|d| d.state.encode()).collect())
    }

    /// Inbound channel endpoints for daemon `i` (left neighbour for a ring).
    pub fn inbound_of(&self, i: usize) -> Vec<usize> {
        self.channels.iter().filter(|c| c.to == i).map(|c| c.from).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sequential reference for RingSum, independent of the channel machinery.
    fn ring_oracle(spec: &WorkloadSpec, n: usize) -> Vec<u8> {
        let mut rng: Vec<u64> = (0..n).map(|i| process_seed(spec.seed, i)).collect();
        let mut acc = vec![0u64; n];
        for _ in 0..spec.iterations {
            let sent: Vec<u64> = (0..n).map(|i| acc[i].wrapping_add(contribution(&mut rng[i]))).collect();
            for i in 0..n {
                acc[i] = acc[i].wrapping_mul(RING_MIX).wrapping_add(sent[(i + n - 1) % n]);
            }
        }
        acc.iter().flat_map(|a| a.to_le_bytes()).collect()
    }

    #[test]
    fn ring_sum_matches_sequential_reference() {
        let spec = WorkloadSpec::ring_sum(10).with_seed(7);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 4).unwrap();
        assert!(c.run_to_completion());
        assert_eq!(c.output().unwrap(), ring_oracle(&spec, 4));
        assert_eq!(c.messages_sent(), 40);
        assert_eq!(c.messages_consumed(), 40);
    }

    #[test]
    fn single_counter_counts_to_iterations() {
        let spec = WorkloadSpec::single_counter(25);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 1).unwrap();
        assert!(c.run_to_completion());
        assert_eq!(c.daemon(0).unwrap().state.iteration, 25);
    }

    #[test]
    fn ring_on_one_vm_is_mismatch() {
        let err = Coordinator::start(CoordinatorId(1), &WorkloadSpec::ring_sum(3), 1).unwrap_err();
        assert!(matches!(err, RtError::ClusterMismatch { .. }));
    }

    #[test]
    fn counter_checkpoint_at_five() {
        let spec = WorkloadSpec::single_counter(10);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 1).unwrap();
        for _ in 0..5 {
            c.round();
        }
        let blobs = c.checkpoint().unwrap();
        assert_eq!(ProcessState::decode(&blobs[0]).unwrap().iteration, 5);
    }

    #[test]
    fn back_to_back_checkpoints_reflect_progress() {
        let spec = WorkloadSpec::ring_sum(10);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 3).unwrap();
        c.round();
        let a = c.checkpoint().unwrap();
        for _ in 0..4 {
            c.round();
        }
        let b = c.checkpoint().unwrap();
        let ia: u64 = a.iter().map(|x| ProcessState::decode(x).unwrap().iteration).sum();
        let ib: u64 = b.iter().map(|x| ProcessState::decode(x).unwrap().iteration).sum();
        assert!(ib > ia);
    }

    #[test]
    fn checkpoint_captures_in_flight_messages() {
        let spec = WorkloadSpec::ring_sum(4);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 3).unwrap();
        c.round(); // every daemon sent; nothing delivered yet
        assert_eq!(c.in_flight(), 3);
        let blobs = c.checkpoint().unwrap();
        assert_eq!(c.in_flight(), 0);
        let captured: usize = blobs.iter().map(|b| ProcessState::decode(b).unwrap().inbox.len()).sum();
        assert_eq!(captured, 3);
        // computation resumes normally after the checkpoint
        assert!(c.run_to_completion());
        assert_eq!(c.output().unwrap(), ring_oracle(&spec, 3));
    }

    #[test]
    fn restart_mints_given_id_and_resumes() {
        let spec = WorkloadSpec::ring_sum(6).with_seed(3);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 2).unwrap();
        for _ in 0..5 {
            c.round();
        }
        let blobs = c.checkpoint().unwrap();
        let mut r = Coordinator::restart(CoordinatorId(2), &spec, &blobs, 2).unwrap();
        assert_ne!(r.id(), c.id());
        assert!(r.run_to_completion());
        assert_eq!(r.output().unwrap(), ring_oracle(&spec, 2));
    }

    #[test]
    fn restart_with_missing_blob() {
        let spec = WorkloadSpec::ring_sum(5);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 4).unwrap();
        let blobs = c.checkpoint().unwrap();
        let err = Coordinator::restart(CoordinatorId(2), &spec, &blobs[..3], 4).unwrap_err();
        assert_eq!(err, RtError::CountMismatch { expected: 4, got: 3 });
    }

    #[test]
    fn restart_with_bit_flip() {
        let spec = WorkloadSpec::ring_sum(5);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 4).unwrap();
        let mut blobs = c.checkpoint().unwrap();
        blobs[2][7] ^= 1;
        let err = Coordinator::restart(CoordinatorId(2), &spec, &blobs, 4).unwrap_err();
        assert!(matches!(err, RtError::CorruptImage(_)));
    }

    #[test]
    fn restart_accepts_shuffled_blobs() {
        let spec = WorkloadSpec::ring_sum(5);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 3).unwrap();
        c.round();
        let mut blobs = c.checkpoint().unwrap();
        blobs.reverse();
        let mut r = Coordinator::restart(CoordinatorId(2), &spec, &blobs, 3).unwrap();
        assert!(r.run_to_completion());
        assert_eq!(r.output().unwrap(), ring_oracle(&spec, 3));
    }

    #[test]
    fn quiesce_timeout_leaves_state_untouched() {
        let spec = WorkloadSpec::ring_sum(5);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 3).unwrap();
        c.round();
        c.set_reachable(1, false).unwrap();
        let before = c.clone();
        assert_eq!(c.checkpoint(), Err(RtError::QuiesceTimeout(1)));
        assert_eq!(c, before);
    }

    #[test]
    fn unhealthy_daemon_stalls_ring() {
        let spec = WorkloadSpec::ring_sum(5);
        let mut c = Coordinator::start(CoordinatorId(1), &spec, 3).unwrap();
        c.set_health(2, false).unwrap();
        assert!(!c.run_to_completion());
        assert!(!c.is_finished());
        assert_eq!(c.set_health(9, true), Err(RtError::UnknownDaemon(9)));
    }

    #[test]
    fn per_process_image_shrinks_with_process_count() {
        let mut last = usize::MAX;
        for n in [1usize, 2, 4, 8, 16] {
            let spec = if n == 1 { WorkloadSpec::single_counter(3) } else { WorkloadSpec::ring_sum(3) }.with_state_bytes(1 << 20);
            let mut c = Coordinator::start(CoordinatorId(1), &spec, n).unwrap();
            let size = c.checkpoint().unwrap()[0].len();
            assert!(size < last, "n={n}: {size} !< {last}");
            last = size;
        }
    }
}
