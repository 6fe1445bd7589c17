//! Monitoring Manager: binary broadcast-tree heartbeats, health hooks and
//! failure classification.
//!
//! A heartbeat probe descends the tree one link at a time; every node runs
//! its health hook while forwarding the probe and answers its parent once its
//! own hook and all its children have answered. With a uniform hook cost `h`
//! the round-trip is `2 * depth * link_latency + h`, with
//! `depth = floor(log2 n)`.
//!
//! A parent that gets no answer from a child probes it once more, then
//! declares it unreachable and probes the child's children itself.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloudsim::{VirtualDuration, VirtualTime};
use crate::lifecycle::AppId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MonitorError {
    #[error("cannot build a broadcast tree over an empty cluster")]
    EmptyCluster,
    #[error("vm is not part of any monitored application")]
    UnknownVm,
}

/// Complete binary tree over node indices `0..n` in array layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BroadcastTree {
    n: usize,
}

impl BroadcastTree {
    pub fn build(n: usize) -> Result<Self, MonitorError> {
        if n == 0 {
            return Err(MonitorError::EmptyCluster);
        }
        Ok(BroadcastTree { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn depth(&self) -> u32 {
        self.n.ilog2()
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> {
        let n = self.n;
        [2 * i + 1, 2 * i + 2].into_iter().filter(move |c| *c < n)
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        (i > 0).then(|| (i - 1) / 2)
    }

    /// Depth of node `i` (root is 0).
    pub fn level(&self, i: usize) -> u32 {
        (i + 1).ilog2()
    }
}

/// Built-in health predicates selectable per application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum HookSpec {
    /// Healthy while the daemon's processes are alive and responsive.
    #[default]
    ProcessAlive,
    /// Healthy if the daemon advanced within the last `seconds`, or finished.
    ProgressWithin { seconds: f64 },
}

/// What a node-local daemon can observe when its hook runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeView {
    pub reachable: bool,
    pub process_alive: bool,
    pub last_progress: VirtualTime,
    pub finished: bool,
    pub hook_cost: VirtualDuration,
}

impl NodeView {
    pub fn healthy(hook_cost: VirtualDuration) -> Self {
        NodeView { reachable: true, process_alive: true, last_progress: VirtualTime::ZERO, finished: false, hook_cost }
    }
}

impl HookSpec {
    pub fn evaluate(&self, view: &NodeView, now: VirtualTime) -> bool {
        match self {
            HookSpec::ProcessAlive => view.process_alive,
            HookSpec::ProgressWithin { seconds } => {
                view.process_alive
                    && (view.finished
                        || now.since(view.last_progress).as_secs_f64() <= *seconds)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatParams {
    pub link_latency: VirtualDuration,
    /// A hook that runs longer than this counts as unhealthy.
    pub hook_timeout: VirtualDuration,
    /// How long a parent waits for one probe answer.
    pub probe_timeout: VirtualDuration,
    pub probe_attempts: u32,
    pub period: VirtualDuration,
}

impl Default for HeartbeatParams {
    fn default() -> Self {
        HeartbeatParams {
            link_latency: VirtualDuration::from_millis(5),
            hook_timeout: VirtualDuration::from_secs(1),
            probe_timeout: VirtualDuration::from_millis(500),
            probe_attempts: 2,
            period: VirtualDuration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub app_id: AppId,
    pub round: u64,
    pub unreachable: BTreeSet<usize>,
    pub unhealthy: BTreeSet<usize>,
    pub roundtrip_time: VirtualDuration,
}

impl HealthReport {
    pub fn has_problem(&self) -> bool {
        !self.unreachable.is_empty() || !self.unhealthy.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Healthy,
    VmFailure,
    AppFailure,
}

pub fn classify(report: &HealthReport) -> Classification {
    if !report.unreachable.is_empty() {
        Classification::VmFailure
    } else if !report.unhealthy.is_empty() {
        Classification::AppFailure
    } else {
        Classification::Healthy
    }
}

/// The report a backend failure notification stands for.
pub fn notification_report(app_id: AppId, round: u64, vm_index: usize) -> HealthReport {
    HealthReport {
        app_id,
        round,
        unreachable: BTreeSet::from([vm_index]),
        unhealthy: BTreeSet::new(),
        roundtrip_time: VirtualDuration::ZERO,
    }
}

struct Round<'a> {
    tree: BroadcastTree,
    nodes: &'a [NodeView],
    hook: &'a HookSpec,
    params: &'a HeartbeatParams,
    now: VirtualTime,
    unreachable: BTreeSet<usize>,
    unhealthy: BTreeSet<usize>,
}

impl Round<'_> {
    /// Node `i` receives the probe at `arrival`; returns when its answer is
    /// ready to leave it.
    fn visit(&mut self, i: usize, arrival: u64) -> u64 {
        let view = self.nodes[i];
        let cost = view.hook_cost.min(self.params.hook_timeout);
        let healthy = view.hook_cost <= self.params.hook_timeout && self.hook.evaluate(&view, self.now);
        if !healthy {
            self.unhealthy.insert(i);
        }
        let mut done = arrival + cost.as_millis();
        for c in self.tree.children(i).collect::<Vec<_>>() {
            done = done.max(self.probe(c, arrival));
        }
        done
    }

    /// A parent probing node `c` at `start`; returns when the answer (or the
    /// adopted subtree's answers) is back at the parent.
    fn probe(&mut self, c: usize, start: u64) -> u64 {
        let link = self.params.link_latency.as_millis();
        if self.nodes[c].reachable {
            return self.visit(c, start + link) + link;
        }
        self.unreachable.insert(c);
        let detected = start + self.params.probe_timeout.as_millis() * self.params.probe_attempts as u64;
        let mut done = detected;
        for g in self.tree.children(c).collect::<Vec<_>>() {
            done = done.max(self.probe(g, detected));
        }
        done
    }
}

/// Runs one heartbeat round and reports unreachable and unhealthy nodes.
/// `nodes[i]` describes tree node `i`.
pub fn heartbeat_round(
    app_id: AppId,
    round: u64,
    tree: &BroadcastTree,
    nodes: &[NodeView],
    hook: &HookSpec,
    params: &HeartbeatParams,
    now: VirtualTime,
) -> HealthReport {
    assert_eq!(nodes.len(), tree.len(), "one view per tree node");
    let mut r = Round {
        tree: *tree,
        nodes,
        hook,
        params,
        now,
        unreachable: BTreeSet::new(),
        unhealthy: BTreeSet::new(),
    };
    // the manager talks to the root directly, without a tree hop
    let root = tree.root();
    let end = if nodes[root].reachable {
        r.visit(root, 0)
    } else {
        r.unreachable.insert(root);
        let detected = params.probe_timeout.as_millis() * params.probe_attempts as u64;
        let mut done = detected;
        for c in tree.children(root).collect::<Vec<_>>() {
            done = done.max(r.probe(c, detected));
        }
        done
    };
    let unhealthy = r.unhealthy.difference(&r.unreachable).copied().collect();
    HealthReport { app_id, round, unreachable: r.unreachable, unhealthy, roundtrip_time: VirtualDuration(end) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn healthy(n: usize, hook_ms: u64) -> Vec<NodeView> {
        vec![NodeView::healthy(VirtualDuration(hook_ms)); n]
    }

    fn params(link_ms: u64) -> HeartbeatParams {
        HeartbeatParams { link_latency: VirtualDuration(link_ms), ..Default::default() }
    }

    /// Enumerates the complete tree level by level, independent of ilog2.
    fn depth_by_enumeration(n: usize) -> u32 {
        let mut depth = 0;
        let mut frontier = vec![0usize];
        loop {
            let next: Vec<usize> = frontier.iter().flat_map(|i| [2 * i + 1, 2 * i + 2]).filter(|c| *c < n).collect();
            if next.is_empty() {
                return depth;
            }
            depth += 1;
            frontier = next;
        }
    }

    #[test]
    fn tree_depths() {
        assert_eq!(BroadcastTree::build(1).unwrap().depth(), 0);
        assert_eq!(BroadcastTree::build(7).unwrap().depth(), 2);
        assert_eq!(BroadcastTree::build(1024).unwrap().depth(), 10);
        for n in 1..300 {
            assert_eq!(BroadcastTree::build(n).unwrap().depth(), depth_by_enumeration(n), "n={n}");
        }
        assert_eq!(BroadcastTree::build(0), Err(MonitorError::EmptyCluster));
    }

    #[test]
    fn every_node_has_at_most_two_children() {
        let t = BroadcastTree::build(37).unwrap();
        for i in 0..37 {
            assert!(t.children(i).count() <= 2);
            for c in t.children(i) {
                assert_eq!(t.parent(c), Some(i));
            }
        }
    }

    #[test]
    fn sixteen_nodes_roundtrip_is_eight_units() {
        let t = BroadcastTree::build(16).unwrap();
        let r = heartbeat_round(AppId(1), 0, &t, &healthy(16, 0), &HookSpec::ProcessAlive, &params(1000), VirtualTime::ZERO);
        assert_eq!(r.roundtrip_time, VirtualDuration::from_secs(8));
        assert!(!r.has_problem());
    }

    #[test]
    fn hook_term_adds_once() {
        for n in [1usize, 3, 16, 100] {
            let t = BroadcastTree::build(n).unwrap();
            let r = heartbeat_round(AppId(1), 0, &t, &healthy(n, 7), &HookSpec::ProcessAlive, &params(10), VirtualTime::ZERO);
            assert_eq!(r.roundtrip_time.as_millis(), 2 * t.depth() as u64 * 10 + 7);
        }
    }

    #[test]
    fn hook_false_is_unhealthy() {
        let t = BroadcastTree::build(8).unwrap();
        let mut nodes = healthy(8, 1);
        nodes[5].process_alive = false;
        let r = heartbeat_round(AppId(1), 0, &t, &nodes, &HookSpec::ProcessAlive, &params(1), VirtualTime::ZERO);
        assert_eq!(r.unhealthy, BTreeSet::from([5]));
        assert!(r.unreachable.is_empty());
        assert_eq!(classify(&r), Classification::AppFailure);
    }

    #[test]
    fn unreachable_interior_node_children_still_probed() {
        let t = BroadcastTree::build(15).unwrap();
        let mut nodes = healthy(15, 1);
        nodes[1].reachable = false;
        nodes[9].process_alive = false; // grandchild of 1 via 4
        let r = heartbeat_round(AppId(1), 0, &t, &nodes, &HookSpec::ProcessAlive, &params(1), VirtualTime::ZERO);
        assert_eq!(r.unreachable, BTreeSet::from([1]));
        assert_eq!(r.unhealthy, BTreeSet::from([9]));
        assert_eq!(classify(&r), Classification::VmFailure);
        // 2 probes of 500 ms, then two more hops down and back up
        assert!(r.roundtrip_time.as_millis() >= 1000);
    }

    #[test]
    fn unreachable_supersedes_unhealthy() {
        let t = BroadcastTree::build(4).unwrap();
        let mut nodes = healthy(4, 1);
        nodes[3].reachable = false;
        nodes[3].process_alive = false;
        let r = heartbeat_round(AppId(1), 0, &t, &nodes, &HookSpec::ProcessAlive, &params(1), VirtualTime::ZERO);
        assert!(r.unreachable.contains(&3));
        assert!(r.unhealthy.is_disjoint(&r.unreachable));
    }

    #[test]
    fn slow_hook_times_out_as_unhealthy() {
        let t = BroadcastTree::build(2).unwrap();
        let mut nodes = healthy(2, 1);
        nodes[1].hook_cost = VirtualDuration::from_secs(5);
        let p = params(1);
        let r = heartbeat_round(AppId(1), 0, &t, &nodes, &HookSpec::ProcessAlive, &p, VirtualTime::ZERO);
        assert_eq!(r.unhealthy, BTreeSet::from([1]));
        assert!(r.unreachable.is_empty());
        assert_eq!(r.roundtrip_time.as_millis(), 1 + 1000 + 1);
    }

    #[test]
    fn classification_precedence() {
        let mut r = notification_report(AppId(1), 0, 2);
        assert_eq!(classify(&r), Classification::VmFailure);
        r.unhealthy.insert(4);
        assert_eq!(classify(&r), Classification::VmFailure);
        r.unreachable.clear();
        assert_eq!(classify(&r), Classification::AppFailure);
        r.unhealthy.clear();
        assert_eq!(classify(&r), Classification::Healthy);
    }

    #[test]
    fn progress_hook() {
        let hook = HookSpec::ProgressWithin { seconds: 5.0 };
        let mut v = NodeView::healthy(VirtualDuration::ZERO);
        v.last_progress = VirtualTime::from_secs(10);
        assert!(hook.evaluate(&v, VirtualTime::from_secs(15)));
        assert!(!hook.evaluate(&v, VirtualTime::from_secs(16)));
        v.finished = true;
        assert!(hook.evaluate(&v, VirtualTime::from_secs(100)));
    }
}
