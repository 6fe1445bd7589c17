//! Experiment scenarios run entirely in virtual time.
//!
//! Each scenario builds fresh services from an [`ExperimentParams`], drives
//! them through the same API a client would use and returns a
//! [`MetricReport`]. A scenario fails with [`ScenarioFailed`] as soon as one
//! of its own consistency checks does not hold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::appmgr::clone_app;
use crate::cloudsim::{VirtualDuration, VirtualTime, OPENSTACK_SIM, SNOOZE_SIM};
use crate::gateway::{ApiRequest, Endpoint};
use crate::lifecycle::{AppId, AppState};
use crate::service::{Service, ServiceConfig};

pub const SCENARIOS: [&str; 5] = ["scaling", "burst100", "heartbeat", "migrate40", "compare"];

/// Aggregate management traffic: `m` workers polling the IaaS at `c1`
/// bytes/s each plus `n` workers running remote commands at `c2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub m: u64,
    pub n: u64,
    pub c1: u64,
    pub c2: u64,
}

impl NetworkModel {
    pub fn traffic(&self) -> u64 {
        self.m * self.c1 + self.n * self.c2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_s: f64,
    pub metric: String,
    /// Independent variable for sweeps (cluster size); absent for time series.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub summary: BTreeMap<String, Value>,
}

impl MetricReport {
    pub fn new(scenario: &str, seed: u64) -> Self {
        MetricReport { scenario: scenario.into(), seed, samples: Vec::new(), summary: BTreeMap::new() }
    }

    pub fn push(&mut self, t: VirtualTime, metric: &str, x: Option<f64>, value: f64) {
        self.samples.push(Sample { t_s: t.as_secs_f64(), metric: metric.into(), x, value });
    }

    pub fn note(&mut self, key: &str, v: impl Serialize) {
        self.summary.insert(key.into(), serde_json::to_value(v).expect("summary value serializes"));
    }

    /// `(t, x, value)` of one metric, in insertion order.
    pub fn series(&self, metric: &str) -> Vec<(f64, Option<f64>, f64)> {
        self.samples.iter().filter(|s| s.metric == metric).map(|s| (s.t_s, s.x, s.value)).collect()
    }

    /// Value of `metric` at sweep point `x`.
    pub fn at(&self, metric: &str, x: f64) -> Option<f64> {
        self.samples.iter().find(|s| s.metric == metric && s.x == Some(x)).map(|s| s.value)
    }

    pub fn timestamps_monotone(&self) -> bool {
        let mut last: BTreeMap<&str, f64> = BTreeMap::new();
        for s in &self.samples {
            let prev = last.insert(&s.metric, s.t_s);
            if prev.is_some_and(|p| p > s.t_s) {
                return false;
            }
        }
        true
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_s,metric,x,value\n");
        for s in &self.samples {
            let x = s.x.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", s.t_s, s.metric, x, s.value);
        }
        out
    }

    pub fn summary_json(&self) -> Value {
        json!({ "scenario": self.scenario, "seed": self.seed, "samples": self.samples.len(), "summary": self.summary })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("scenario {scenario} failed: {reason}")]
pub struct ScenarioFailed {
    pub scenario: String,
    pub reason: String,
}

fn fail(scenario: &str, reason: impl Into<String>) -> ScenarioFailed {
    ScenarioFailed { scenario: scenario.into(), reason: reason.into() }
}

fn check(scenario: &str, cond: bool, reason: impl FnOnce() -> String) -> Result<(), ScenarioFailed> {
    if cond {
        Ok(())
    } else {
        Err(fail(scenario, reason()))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentParams {
    pub seed: u64,
    pub config: ServiceConfig,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams { seed: 1, config: ServiceConfig::default() }
    }
}

impl ExperimentParams {
    /// The configuration with every backend seed mixed with the run seed.
    fn seeded_config(&self) -> ServiceConfig {
        let mut cfg = self.config.clone();
        for b in &mut cfg.backends {
            b.seed = b.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.seed;
        }
        cfg
    }

    fn service(&self, scenario: &str, f: impl FnOnce(&mut ServiceConfig)) -> Result<Service, ScenarioFailed> {
        let mut cfg = self.seeded_config();
        f(&mut cfg);
        Service::new(cfg).map_err(|e| fail(scenario, format!("service setup: {e}")))
    }
}

pub fn run_experiment(name: &str, params: &ExperimentParams) -> Result<MetricReport, ScenarioFailed> {
    let report = match name {
        "scaling" => scaling(params, SNOOZE_SIM, &POW2_TO_128),
        "burst100" => burst(params, 100),
        "heartbeat" => heartbeat(params, &POW2_TO_1024),
        "migrate40" => migrate(params, 40),
        "compare" => compare(params, &POW2_TO_128),
        other => return Err(fail(other, format!("unknown scenario; choose one of {SCENARIOS:?}"))),
    }?;
    check(name, report.timestamps_monotone(), || "timestamps decrease within a series".into())?;
    Ok(report)
}

pub const POW2_TO_128: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];
pub const POW2_TO_1024: [usize; 11] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];

fn asr(n: usize, backend: &str, iterations: u64, state_bytes: u64, seed: u64) -> Value {
    json!({
        "vm_templates": vec![json!({"vcpus": 1, "memory_mb": 1024, "image_name": "ubuntu"}); n],
        "checkpoint_policy": {"mode": "user_initiated"},
        "app_spec": {
            "kind": if n == 1 { "single_counter" } else { "ring_sum" },
            "iterations": iterations,
            "payload_bytes_per_msg": 16,
            "state_bytes_total": state_bytes,
            "seed": seed,
            "step_s": 1.0,
        },
        "backend_id": backend,
    })
}

fn call(svc: &mut Service, scenario: &str, req: ApiRequest) -> Result<Value, ScenarioFailed> {
    let what = format!("{:?} {}", req.method, req.path);
    let r = svc.handle(req);
    check(scenario, r.is_success(), || format!("{what}: {} {}", r.status, r.body))?;
    Ok(r.body)
}

fn submit(svc: &mut Service, scenario: &str, doc: Value) -> Result<AppId, ScenarioFailed> {
    let body = call(svc, scenario, ApiRequest::post("/coordinators", Some(doc)))?;
    Ok(AppId(body["id"].as_u64().ok_or_else(|| fail(scenario, "submit returned no id"))?))
}

fn state(svc: &Service, app: AppId) -> Option<AppState> {
    svc.db().get(app).map(|r| r.state)
}

fn await_pred(
    svc: &mut Service,
    scenario: &str,
    what: &str,
    within: VirtualDuration,
    pred: impl FnMut(&Service) -> bool,
) -> Result<(), ScenarioFailed> {
    let limit = svc.now() + within;
    check(scenario, svc.run_until_pred(limit, pred), || format!("timed out waiting for {what}"))
}

fn idle(svc: &Service, app: AppId) -> bool {
    svc.pool().task_count_of(app) == 0
}

fn trace_since<'a>(svc: &'a Service, app: AppId, kind: &str, since: VirtualTime) -> Option<&'a Value> {
    svc.trace()
        .iter()
        .find(|e| e.app == Some(app) && e.kind == kind && e.t_ms >= since.as_millis())
        .map(|e| &e.detail)
}

const HOUR: VirtualDuration = VirtualDuration(3_600_000);

/// Submit, checkpoint and restart one application per cluster size and
/// record the three phase times.
pub fn scaling(params: &ExperimentParams, backend: &str, sizes: &[usize]) -> Result<MetricReport, ScenarioFailed> {
    const S: &str = "scaling";
    let mut rep = MetricReport::new(S, params.seed);
    let budget = params.config.ssh.clone();
    let mut offset = VirtualDuration::ZERO;
    let state_bytes = 8 << 20;
    for &n in sizes {
        let mut svc = params.service(S, |c| {
            if let Some(b) = c.backend_mut(backend) {
                b.capacity = b.capacity.max(n);
            }
        })?;
        let x = Some(n as f64);
        let t0 = svc.now();
        let app = submit(&mut svc, S, asr(n, backend, 1_000_000, state_bytes, params.seed))?;
        await_pred(&mut svc, S, "RUNNING", HOUR, |s| state(s, app) == Some(AppState::Running))?;
        let submit_t = svc.now() - t0;
        let prov = trace_since(&svc, app, "provisioning", t0).cloned().ok_or_else(|| fail(S, "no provisioning entry"))?;
        let waves = prov["waves"].as_u64().unwrap_or(0);
        let prov_ms = prov["elapsed_ms"].as_u64().unwrap_or(0);
        check(S, waves == n.div_ceil(budget.max_concurrent) as u64, || format!("n={n}: {waves} provisioning waves"))?;
        check(S, prov_ms == waves * budget.fresh_wave().as_millis(), || format!("n={n}: provisioning took {prov_ms} ms"))?;

        let t1 = svc.now();
        let body = call(&mut svc, S, ApiRequest::post(format!("/coordinators/{app}/checkpoints"), None))?;
        let generation = body["id"].as_u64().ok_or_else(|| fail(S, "checkpoint returned no id"))?;
        await_pred(&mut svc, S, "checkpoint", HOUR, |s| idle(s, app))?;
        let ckpt_t = svc.now() - t1;
        let size = trace_since(&svc, app, "checkpoint_stored", t1).and_then(|d| d["size_bytes"].as_u64()).unwrap_or(0);

        let t2 = svc.now();
        call(&mut svc, S, ApiRequest::post(format!("/coordinators/{app}/checkpoints/{generation}"), None))?;
        await_pred(&mut svc, S, "restart", HOUR, |s| idle(s, app) && state(s, app) == Some(AppState::Running))?;
        check(S, trace_since(&svc, app, "restarted", t2).is_some(), || format!("n={n}: restart did not complete"))?;
        let restart_t = svc.now() - t2;

        let at = VirtualTime::ZERO + offset + (svc.now() - VirtualTime::ZERO);
        rep.push(at, "submit_s", x, submit_t.as_secs_f64());
        rep.push(at, "provision_s", x, prov_ms as f64 / 1000.0);
        rep.push(at, "provision_waves", x, waves as f64);
        rep.push(at, "checkpoint_s", x, ckpt_t.as_secs_f64());
        rep.push(at, "restart_s", x, restart_t.as_secs_f64());
        rep.push(at, "checkpoint_bytes", x, size as f64);
        rep.push(at, "image_bytes_per_process", x, (size / n as u64) as f64);
        offset += svc.now() - VirtualTime::ZERO;
    }
    rep.note("backend", backend);
    rep.note("ssh_max_concurrent", budget.max_concurrent);
    rep.note("fresh_wave_s", budget.fresh_wave().as_secs_f64());
    Ok(rep)
}

/// Submits `apps` single-VM applications, one per virtual second, and
/// samples the management traffic once per second until every worker is
/// idle.
pub fn burst(params: &ExperimentParams, apps: usize) -> Result<MetricReport, ScenarioFailed> {
    const S: &str = "burst100";
    let mut rep = MetricReport::new(S, params.seed);
    let mut svc = params.service(S, |c| c.worker_pool_capacity = 100)?;
    let c1 = svc.cloud().profile(SNOOZE_SIM).map(|p| p.api_poll_cost).unwrap_or(0);
    let c2 = svc.config().exec_bytes_per_s;
    let second = VirtualDuration::from_secs(1);
    let mut t = VirtualTime::ZERO;
    let mut last_submit = VirtualTime::ZERO;
    let mut submitted = 0;
    let mut post: Vec<(f64, f64)> = Vec::new();
    let mut mismatches = 0usize;
    loop {
        if submitted < apps {
            submit(&mut svc, S, asr(1, SNOOZE_SIM, 100_000, 0, params.seed + submitted as u64))?;
            submitted += 1;
            last_submit = t;
        }
        let (m, n) = svc.pool().census();
        let model = NetworkModel { m, n, c1, c2 }.traffic();
        let measured = svc.meter().rate();
        if model != measured {
            mismatches += 1;
        }
        rep.push(t, "traffic_measured", None, measured as f64);
        rep.push(t, "traffic_model", None, model as f64);
        rep.push(t, "m", None, m as f64);
        rep.push(t, "n", None, n as f64);
        rep.push(t, "live_workers", None, svc.pool().active_len() as f64);
        if submitted == apps && t >= last_submit {
            post.push((t.as_secs_f64(), measured as f64));
        }
        if submitted == apps && svc.pool().active_len() == 0 && svc.pool().queued_len() == 0 {
            break;
        }
        check(S, t < VirtualTime::ZERO + HOUR, || "workers never drained".into())?;
        t += second;
        svc.run_until(t);
    }
    check(S, mismatches == 0, || format!("{mismatches} samples where measured traffic != m*c1 + n*c2"))?;
    // the regression window ends when the last poller is gone
    let end = post.iter().rposition(|(_, v)| *v >= c1 as f64).map_or(0, |i| i + 1);
    let window = &post[..end];
    let (slope, intercept, r2) = linear_fit(window);
    check(S, slope < 0.0, || format!("post-submission slope {slope} is not negative"))?;
    rep.note("c1", c1);
    rep.note("c2", c2);
    rep.note("apps", apps);
    rep.note("peak_workers", svc.pool().peak_active());
    rep.note("last_submit_s", last_submit.as_secs_f64());
    rep.note("fit_points", window.len());
    rep.note("fit_slope", slope);
    rep.note("fit_intercept", intercept);
    rep.note("fit_r2", r2);
    rep.note("model_mismatches", mismatches);
    Ok(rep)
}

/// Least-squares line through `pts`: `(slope, intercept, r²)`.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let k = pts.len() as f64;
    if pts.len() < 2 {
        return (0.0, pts.first().map_or(0.0, |p| p.1), 0.0);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, my, 0.0);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Heartbeat roundtrip of a running application per cluster size.
pub fn heartbeat(params: &ExperimentParams, sizes: &[usize]) -> Result<MetricReport, ScenarioFailed> {
    const S: &str = "heartbeat";
    let mut rep = MetricReport::new(S, params.seed);
    let mut offset = VirtualDuration::ZERO;
    let mut link_ms = 0;
    let mut hook_ms = 0;
    for &n in sizes {
        let mut svc = params.service(S, |c| {
            if let Some(b) = c.backend_mut(SNOOZE_SIM) {
                b.capacity = b.capacity.max(n);
                b.max_concurrent_boots = b.max_concurrent_boots.max(n);
            }
        })?;
        link_ms = svc.config().heartbeat.link_latency.as_millis();
        hook_ms = svc.config().hook_cost.as_millis();
        // the workload only has to outlive the first heartbeat
        let app = submit(&mut svc, S, asr(n, SNOOZE_SIM, 100_000, 0, params.seed))?;
        await_pred(&mut svc, S, "heartbeat", HOUR, |s| s.trace().iter().any(|e| e.app == Some(app) && e.kind == "heartbeat"))?;
        let e = svc.trace().iter().rev().find(|e| e.kind == "heartbeat").expect("waited for it");
        let rt = e.detail["roundtrip_ms"].as_u64().unwrap_or(0);
        let depth = n.ilog2() as u64;
        check(S, rt == 2 * depth * link_ms + hook_ms, || format!("n={n}: roundtrip {rt} ms"))?;
        let at = VirtualTime::ZERO + offset + (svc.now() - VirtualTime::ZERO);
        rep.push(at, "roundtrip_ms", Some(n as f64), rt as f64);
        rep.push(at, "tree_depth", Some(n as f64), depth as f64);
        offset += svc.now() - VirtualTime::ZERO;
    }
    let rts: Vec<f64> = rep.series("roundtrip_ms").iter().map(|s| s.2).collect();
    let deltas: Vec<f64> = rts.windows(2).map(|w| w[1] - w[0]).collect();
    check(S, deltas.iter().all(|d| *d == (2 * link_ms) as f64), || format!("non-constant deltas {deltas:?}"))?;
    rep.note("link_latency_ms", link_ms);
    rep.note("hook_cost_ms", hook_ms);
    rep.note("deltas_ms", deltas);
    Ok(rep)
}

/// Two services advanced in lockstep.
struct Pair {
    a: Service,
    b: Service,
}

impl Pair {
    fn run_until(&mut self, t: VirtualTime) {
        self.a.run_until(t);
        self.b.run_until(t);
    }

    fn run_for(&mut self, d: VirtualDuration) {
        let t = self.a.now().max(self.b.now()) + d;
        self.run_until(t);
    }

    fn sample(&self, rep: &mut MetricReport) {
        let t = self.a.now();
        for (label, s) in [("a", &self.a), ("b", &self.b)] {
            rep.push(t, &format!("live_apps_{label}"), None, running(s) as f64);
            rep.push(t, &format!("live_vms_{label}"), None, s.live_vms_by_backend().values().sum::<usize>() as f64);
            rep.push(t, &format!("remote_bytes_{label}"), None, s.store().remote().bytes_used() as f64);
            rep.push(t, &format!("local_bytes_{label}"), None, s.store().local().bytes_used() as f64);
        }
    }

    /// Advances both services second by second until `pred` holds.
    fn await_pred(
        &mut self,
        rep: &mut MetricReport,
        what: &str,
        mut pred: impl FnMut(&Pair) -> bool,
    ) -> Result<(), ScenarioFailed> {
        let limit = self.a.now() + HOUR;
        while !pred(self) {
            check("migrate40", self.a.now() < limit, || format!("timed out waiting for {what}"))?;
            self.run_for(VirtualDuration::from_secs(1));
            self.sample(rep);
        }
        Ok(())
    }
}

fn running(s: &Service) -> usize {
    s.db().iter().filter(|r| r.state == AppState::Running).count()
}

/// Starts `apps` applications on one service, clones each to a second
/// service on another backend, then terminates the originals.
pub fn migrate(params: &ExperimentParams, apps: usize) -> Result<MetricReport, ScenarioFailed> {
    const S: &str = "migrate40";
    let mut rep = MetricReport::new(S, params.seed);
    let a = params.service(S, |c| c.name = "service-a".into())?;
    let b = params.service(S, |c| {
        c.name = "service-b".into();
        c.default_backend = OPENSTACK_SIM.into();
        c.vm_id_base = 1_000_000;
    })?;
    let mut p = Pair { a, b };
    let spacing = VirtualDuration::from_secs(2);
    let mut ids = Vec::new();
    for i in 0..apps {
        ids.push(submit(&mut p.a, S, asr(2, SNOOZE_SIM, 1_000_000, 1 << 20, params.seed + i as u64))?);
        p.run_for(spacing);
        p.sample(&mut rep);
    }
    p.await_pred(&mut rep, "sources running", |p| running(&p.a) == apps)?;
    let mut clones = Vec::new();
    for &app in &ids {
        let g = call(&mut p.a, S, ApiRequest::post(format!("/coordinators/{app}/checkpoints"), None))?["id"].as_u64();
        p.await_pred(&mut rep, "checkpoint", |p| idle(&p.a, app))?;
        check(S, g.is_some(), || "checkpoint returned no id".into())?;
        let clone = clone_app(&mut p.a as &mut dyn Endpoint, app, Some(&mut p.b as &mut dyn Endpoint))
            .map_err(|e| fail(S, format!("clone of {app}: {e}")))?;
        clones.push(clone);
        p.run_for(spacing);
        p.sample(&mut rep);
    }
    p.await_pred(&mut rep, "clones running", |p| running(&p.b) == apps)?;
    let peak = running(&p.a) + running(&p.b);
    check(S, peak == 2 * apps, || format!("{peak} live applications before termination"))?;
    let terminate_start = p.a.now();
    for &app in &ids {
        call(&mut p.a, S, ApiRequest::delete(format!("/coordinators/{app}")))?;
        p.run_for(spacing);
        p.sample(&mut rep);
    }
    p.await_pred(&mut rep, "sources gone", |p| p.a.db().is_empty())?;
    let (left_a, left_b) = (p.a.db().len(), running(&p.b));
    check(S, left_a == 0 && left_b == apps, || format!("after termination: {left_a} on source, {left_b} on target"))?;
    for s in [&p.a, &p.b] {
        let live: usize = s.live_vms_by_backend().values().sum();
        check(S, live == s.cluster_vm_total(), || format!("{live} live VMs but {} in clusters", s.cluster_vm_total()))?;
    }
    rep.note("apps", apps);
    rep.note("peak_live_apps", peak);
    rep.note("final_source_apps", left_a);
    rep.note("final_target_apps", left_b);
    rep.note("termination_start_s", terminate_start.as_secs_f64());
    rep.note("clone_ids", clones);
    Ok(rep)
}

/// [`scaling`] on both built-in backends.
pub fn compare(params: &ExperimentParams, sizes: &[usize]) -> Result<MetricReport, ScenarioFailed> {
    let mut rep = MetricReport::new("compare", params.seed);
    let mut offset = 0.0;
    for backend in [SNOOZE_SIM, OPENSTACK_SIM] {
        let sub = scaling(params, backend, sizes)?;
        let mut end = offset;
        for s in sub.samples {
            end = f64::max(end, offset + s.t_s);
            rep.samples.push(Sample { t_s: offset + s.t_s, metric: format!("{backend}.{}", s.metric), ..s });
        }
        offset = end;
    }
    for &n in sizes {
        let x = n as f64;
        let (ps, po) = (rep.at("snooze-sim.provision_s", x), rep.at("openstack-sim.provision_s", x));
        check("compare", ps == po, || format!("n={n}: provisioning differs across backends ({ps:?} vs {po:?})"))?;
    }
    rep.note("backends", [SNOOZE_SIM, OPENSTACK_SIM]);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traffic_by_hand() {
        assert_eq!(NetworkModel { m: 100, n: 0, c1: 1, c2: 5 }.traffic(), 100);
        assert_eq!(NetworkModel { m: 0, n: 0, c1: 9, c2: 9 }.traffic(), 0);
        assert_eq!(NetworkModel { m: 3, n: 2, c1: 2, c2: 7 }.traffic(), 20);
    }

    #[test]
    fn fit_exact_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 5.0 - 2.0 * i as f64)).collect();
        let (s, c, r2) = linear_fit(&pts);
        assert!((s + 2.0).abs() < 1e-12 && (c - 5.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_shape() {
        let mut r = MetricReport::new("x", 3);
        r.push(VirtualTime::from_secs(1), "a", Some(2.0), 4.5);
        r.push(VirtualTime::from_secs(2), "b", None, 1.0);
        assert_eq!(r.to_csv(), "t_s,metric,x,value\n1,a,2,4.5\n2,b,,1\n");
        assert!(r.timestamps_monotone());
        r.push(VirtualTime::ZERO, "a", None, 0.0);
        assert!(!r.timestamps_monotone());
    }

    #[test]
    fn unknown_scenario() {
        assert!(run_experiment("nope", &ExperimentParams::default()).is_err());
    }
}
