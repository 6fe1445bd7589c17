//! Helpers shared by the integration tests.
#![allow(dead_code)]

use cloudckpt::cloudsim::VirtualDuration;
use cloudckpt::{ApiRequest, AppId, AppState, Service};
use serde_json::{json, Value};

// Independent re-statement of the RingSum workload: lock-step iterations
// with no channels, barriers or scheduler involved.
fn splitmix(s: &mut u64) -> u64 {
    *s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *s;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn seed_of(seed: u64, i: usize) -> u64 {
    let mut s = seed ^ (i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix(&mut s)
}

/// Final accumulators of RingSum, little-endian, in process order.
pub fn ring_oracle(n: usize, iterations: u64, seed: u64) -> Vec<u8> {
    let mut rng: Vec<u64> = (0..n).map(|i| seed_of(seed, i)).collect();
    let mut acc = vec![0u64; n];
    for _ in 0..iterations {
        let sent: Vec<u64> = (0..n).map(|i| acc[i].wrapping_add(splitmix(&mut rng[i]) % 1000)).collect();
        for i in 0..n {
            acc[i] = acc[i].wrapping_mul(1_000_003).wrapping_add(sent[(i + n - 1) % n]);
        }
    }
    acc.iter().flat_map(|a| a.to_le_bytes()).collect()
}

pub fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

pub fn ring_asr(n: usize, backend: &str, iterations: u64, seed: u64, policy: Value) -> Value {
    json!({
        "vm_templates": vec![json!({"vcpus": 1, "memory_mb": 512, "image_name": "img"}); n],
        "checkpoint_policy": policy,
        "app_spec": {"kind": "ring_sum", "iterations": iterations, "payload_bytes_per_msg": 16, "seed": seed, "step_s": 1.0},
        "backend_id": backend,
    })
}

pub fn submit(svc: &mut Service, doc: Value) -> AppId {
    let r = svc.handle(ApiRequest::post("/coordinators", Some(doc)));
    assert_eq!(r.status, 202, "{}", r.body);
    AppId(r.body["id"].as_u64().unwrap())
}

pub fn state(svc: &Service, app: AppId) -> Option<AppState> {
    svc.db().get(app).map(|r| r.state)
}

pub fn wait_until(svc: &mut Service, within_s: u64, pred: impl FnMut(&Service) -> bool) -> bool {
    let limit = svc.now() + VirtualDuration::from_secs(within_s);
    svc.run_until_pred(limit, pred)
}

pub fn wait_state(svc: &mut Service, app: AppId, s: AppState, within_s: u64) {
    assert!(wait_until(svc, within_s, |x| state(x, app) == Some(s)), "app {app} never reached {s:?}, at {:?}", state(svc, app));
}

pub fn wait_output(svc: &mut Service, app: AppId, within_s: u64) -> Option<String> {
    wait_until(svc, within_s, |x| x.db().get(app).is_some_and(|r| r.output.is_some()));
    svc.db().get(app).and_then(|r| r.output.clone())
}

pub fn idle(svc: &Service, app: AppId) -> bool {
    svc.pool().task_count_of(app) == 0
}

/// Trace kinds of one application from `since_ms` on.
pub fn kinds_since(svc: &Service, app: AppId, since_ms: u64) -> Vec<String> {
    svc.trace().iter().filter(|e| e.app == Some(app) && e.t_ms >= since_ms).map(|e| e.kind.clone()).collect()
}
