//! End-to-end flows through the API of in-process services.

mod common;

use cloudckpt::appmgr::{clone_app, migrate_app, CloneError};
use cloudckpt::cloudsim::VirtualDuration;
use cloudckpt::gateway::{EndpointError, Endpoint};
use cloudckpt::{ApiRequest, ApiResponse, AppId, AppState, Service, ServiceConfig};
use common::*;
use serde_json::json;

fn ckpt(svc: &mut Service, app: AppId) -> u64 {
    let r = svc.handle(ApiRequest::post(format!("/coordinators/{app}/checkpoints"), None));
    assert_eq!(r.status, 202, "{}", r.body);
    let g = r.body["id"].as_u64().unwrap();
    assert!(wait_until(svc, 60, |s| idle(s, app)));
    g
}

#[test]
fn submit_runs_to_completion() {
    let mut svc = Service::with_defaults();
    let app = submit(&mut svc, ring_asr(4, "snooze-sim", 10, 7, json!(null)));
    assert_eq!(state(&svc, app), Some(AppState::Creating));
    wait_state(&mut svc, app, AppState::Running, 60);
    assert_eq!(svc.db().get(app).unwrap().cluster.as_ref().unwrap().len(), 4);
    assert_eq!(wait_output(&mut svc, app, 60).unwrap(), hex(&ring_oracle(4, 10, 7)));
}

#[test]
fn restart_picks_latest_or_requested_generation() {
    let mut svc = Service::with_defaults();
    let app = submit(&mut svc, ring_asr(3, "snooze-sim", 200, 7, json!(null)));
    wait_state(&mut svc, app, AppState::Running, 60);
    svc.run_for(VirtualDuration::from_secs(10));
    let g1 = ckpt(&mut svc, app);
    svc.run_for(VirtualDuration::from_secs(10));
    let g2 = ckpt(&mut svc, app);
    assert_eq!((g1, g2), (1, 2));
    let it = |svc: &Service, g: u64| {
        svc.trace()
            .iter()
            .find(|e| e.kind == "checkpoint_stored" && e.detail["generation"] == json!(g))
            .and_then(|e| e.detail["iteration"].as_u64())
            .unwrap()
    };
    let (i1, i2) = (it(&svc, g1), it(&svc, g2));
    assert!(i1 < i2);

    let first = svc.coordinator(app).unwrap().id();
    assert_eq!(svc.restart(app, None).unwrap(), g2);
    assert!(wait_until(&mut svc, 60, |s| idle(s, app)));
    let restarted = svc.trace().iter().rev().find(|e| e.kind == "restarted").unwrap().detail.clone();
    assert_eq!((restarted["generation"].as_u64(), restarted["iteration"].as_u64()), (Some(g2), Some(i2)));
    let second = svc.coordinator(app).unwrap().id();

    let r = svc.handle(ApiRequest::post(format!("/coordinators/{app}/checkpoints/{g1}"), None));
    assert_eq!(r.status, 202);
    assert!(wait_until(&mut svc, 60, |s| idle(s, app)));
    let restarted = svc.trace().iter().rev().find(|e| e.kind == "restarted").unwrap().detail.clone();
    assert_eq!((restarted["generation"].as_u64(), restarted["iteration"].as_u64()), (Some(g1), Some(i1)));
    let third = svc.coordinator(app).unwrap().id();
    assert!(first != second && second != third && first != third);
    assert_eq!(wait_output(&mut svc, app, 600).unwrap(), hex(&ring_oracle(3, 200, 7)));
}

#[test]
fn restart_without_checkpoint_is_conflict() {
    let mut svc = Service::with_defaults();
    let app = submit(&mut svc, ring_asr(2, "snooze-sim", 100, 1, json!(null)));
    wait_state(&mut svc, app, AppState::Running, 60);
    let r = svc.handle(ApiRequest::post(format!("/coordinators/{app}/checkpoints/1"), None));
    assert_eq!(r.status, 404, "{}", r.body);
    assert!(svc.restart(app, None).is_err());
}

#[test]
fn oversized_cluster_goes_to_error_then_terminates() {
    let mut cfg = ServiceConfig::default();
    cfg.backend_mut("snooze-sim").unwrap().capacity = 3;
    let mut svc = Service::new(cfg).unwrap();
    let app = submit(&mut svc, ring_asr(4, "snooze-sim", 10, 1, json!(null)));
    svc.run_for(VirtualDuration::from_secs(1));
    let rec = svc.db().get(app).unwrap();
    assert_eq!(rec.state, AppState::Error);
    assert!(rec.error.as_deref().unwrap().contains("unavailable"), "{:?}", rec.error);
    assert_eq!(svc.cloud().pool("snooze-sim").unwrap().idle, 3);
    // ERROR is observable during the grace period, then cleaned up
    svc.run_for(svc.config().error_grace);
    assert!(svc.db().get(app).is_none());
    assert_eq!(svc.store().key_counts(app), (0, 0));
}

#[test]
fn app_initiated_checkpoints_register_lazily() {
    let mut svc = Service::with_defaults();
    let app = submit(&mut svc, ring_asr(2, "snooze-sim", 10, 3, json!({"mode": "app_initiated"})));
    wait_state(&mut svc, app, AppState::Running, 60);
    svc.run_for(VirtualDuration::from_secs(6));
    let stored = svc.trace().iter().filter(|e| e.kind == "checkpoint_stored").count();
    assert!(stored > 0);
    assert_eq!(svc.store().registered_count(app), 0);
    let r = svc.handle(ApiRequest::get(format!("/coordinators/{app}/checkpoints")));
    assert_eq!(r.body["checkpoints"].as_array().unwrap().len(), stored);
    assert_eq!(svc.store().registered_count(app), stored);
}

#[test]
fn list_tracks_creates_and_deletes() {
    let mut svc = Service::with_defaults();
    let ids: Vec<AppId> = (0..5).map(|i| submit(&mut svc, ring_asr(2, "snooze-sim", 50, i, json!(null)))).collect();
    svc.run_for(VirtualDuration::from_secs(30));
    for id in &ids[..2] {
        assert_eq!(svc.handle(ApiRequest::delete(format!("/coordinators/{id}"))).status, 202);
    }
    svc.run_for(VirtualDuration::from_secs(1));
    let r = svc.handle(ApiRequest::get("/coordinators"));
    let listed: Vec<u64> = r.body["coordinators"].as_array().unwrap().iter().map(|c| c["id"].as_u64().unwrap()).collect();
    assert_eq!(listed, ids[2..].iter().map(|a| a.0).collect::<Vec<_>>());
}

#[test]
fn every_accepted_request_leaves_a_trace() {
    let mut svc = Service::with_defaults();
    let app = submit(&mut svc, ring_asr(2, "snooze-sim", 1000, 1, json!(null)));
    wait_state(&mut svc, app, AppState::Running, 60);
    let seq = svc.db().get(app).unwrap().event_seq;
    let g = ckpt(&mut svc, app);
    assert_eq!(svc.handle(ApiRequest::post(format!("/coordinators/{app}/checkpoints/{g}"), None)).status, 202);
    assert!(wait_until(&mut svc, 60, |s| idle(s, app)));
    assert!(svc.db().get(app).unwrap().event_seq > seq);
}

#[test]
fn clone_within_one_service() {
    let mut svc = Service::with_defaults();
    let app = submit(&mut svc, ring_asr(2, "snooze-sim", 80, 5, json!(null)));
    wait_state(&mut svc, app, AppState::Running, 60);
    svc.run_for(VirtualDuration::from_secs(10));
    ckpt(&mut svc, app);
    let new = clone_app(&mut svc, app, None).unwrap();
    assert_ne!(new, app);
    wait_state(&mut svc, new, AppState::Running, 120);
    assert_eq!(svc.db().len(), 2);
    // the clone starts with only the transferred images
    let r = svc.handle(ApiRequest::get(format!("/coordinators/{new}/checkpoints")));
    assert_eq!(r.body["checkpoints"].as_array().unwrap().len(), 1);
    let c1 = svc.db().get(app).unwrap().cluster.clone().unwrap().vm_ids;
    let c2 = svc.db().get(new).unwrap().cluster.clone().unwrap().vm_ids;
    assert!(c1.iter().all(|v| !c2.contains(v)));
    let expected = hex(&ring_oracle(2, 80, 5));
    assert_eq!(wait_output(&mut svc, app, 300).unwrap(), expected);
    assert_eq!(wait_output(&mut svc, new, 300).unwrap(), expected);
}

#[test]
fn clone_without_checkpoint_fails() {
    let mut svc = Service::with_defaults();
    let app = submit(&mut svc, ring_asr(2, "snooze-sim", 80, 5, json!(null)));
    wait_state(&mut svc, app, AppState::Running, 60);
    assert!(matches!(clone_app(&mut svc, app, None), Err(CloneError::NoCheckpoint)));
    assert_eq!(svc.db().len(), 1);
}

struct Unreachable;

impl Endpoint for Unreachable {
    fn call(&mut self, _: ApiRequest) -> Result<ApiResponse, EndpointError> {
        Err(EndpointError::Transport("connection refused".into()))
    }
}

#[test]
fn migrate_to_unreachable_target_keeps_source() {
    let mut svc = Service::with_defaults();
    let app = submit(&mut svc, ring_asr(2, "snooze-sim", 80, 5, json!(null)));
    wait_state(&mut svc, app, AppState::Running, 60);
    ckpt(&mut svc, app);
    assert!(matches!(migrate_app(&mut svc, app, &mut Unreachable), Err(CloneError::Transport(_))));
    assert_eq!(state(&svc, app), Some(AppState::Running));
}

#[test]
fn terminate_from_error_runs_all_steps() {
    let mut svc = Service::with_defaults();
    let app = submit(&mut svc, ring_asr(2, "snooze-sim", 1000, 5, json!({"mode": "periodic", "period_s": 2.0})));
    wait_state(&mut svc, app, AppState::Running, 60);
    svc.run_for(VirtualDuration::from_secs(5));
    // a failure with no checkpoint to fall back on is fatal
    let r = svc.handle(ApiRequest::get(format!("/coordinators/{app}/checkpoints")));
    for c in r.body["checkpoints"].as_array().unwrap() {
        let g = c["id"].as_u64().unwrap();
        assert_eq!(svc.handle(ApiRequest::delete(format!("/coordinators/{app}/checkpoints/{g}"))).status, 204);
    }
    let mark = svc.trace().len();
    svc.set_health(app, 1, false).unwrap();
    assert!(wait_until(&mut svc, 30, |s| state(s, app) == Some(AppState::Error)));
    assert!(!svc.trace()[mark..].iter().any(|e| e.kind == "recovery_started"));
    let r = svc.handle(ApiRequest::delete(format!("/coordinators/{app}")));
    assert_eq!(r.status, 202);
    svc.run_for(VirtualDuration::from_secs(1));
    assert!(svc.db().get(app).is_none());
    assert_eq!(svc.store().key_counts(app), (0, 0));
    assert_eq!(svc.live_vms_by_backend()["snooze-sim"], 0);
}

#[test]
fn vm_accounting_holds_throughout() {
    let mut svc = Service::with_defaults();
    let mut apps = Vec::new();
    for i in 0..6 {
        apps.push(submit(&mut svc, ring_asr(2 + i % 3, "snooze-sim", 60, i as u64, json!({"mode": "periodic", "period_s": 4.0}))));
        svc.run_for(VirtualDuration::from_secs(3));
    }
    let audit = |s: &Service| {
        let p = s.cloud().pool("snooze-sim").unwrap();
        assert_eq!((p.claimed_total - p.released_total) as usize, s.cluster_vm_total());
        assert_eq!(p.live, s.cluster_vm_total());
    };
    for step in 0..60 {
        svc.run_for(VirtualDuration::from_secs(1));
        audit(&svc);
        if step == 20 {
            let now = svc.now();
            svc.inject_vm_failure(apps[1], 0, now).unwrap();
        }
        if step == 30 {
            svc.terminate(apps[2]).unwrap();
        }
    }
}

#[test]
fn global_ssh_limit_is_shared() {
    let mut cfg = ServiceConfig::default();
    cfg.ssh_global_limit = true;
    cfg.backend_mut("snooze-sim").unwrap().max_concurrent_boots = 64;
    let mut svc = Service::new(cfg).unwrap();
    let a = submit(&mut svc, ring_asr(16, "snooze-sim", 50, 1, json!(null)));
    let b = submit(&mut svc, ring_asr(16, "snooze-sim", 50, 2, json!(null)));
    wait_state(&mut svc, a, AppState::Running, 120);
    wait_state(&mut svc, b, AppState::Running, 120);
    let prov: Vec<u64> =
        svc.trace().iter().filter(|e| e.kind == "provisioning").map(|e| e.detail["elapsed_ms"].as_u64().unwrap()).collect();
    // both clusters boot together; the second must wait for the first wave
    assert_eq!(prov, vec![2000, 4000]);
}
