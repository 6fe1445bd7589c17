//! Drives the `cactl` binary against in-process services.

use std::path::Path;
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};

use cloudckpt::cloudsim::{VirtualDuration, OPENSTACK_SIM};
use cloudckpt::gateway::http::HttpServer;
use cloudckpt::{AppId, AppState, Service, ServiceConfig};
use serde_json::{json, Value};

fn cactl(url: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cactl")).arg("--url").arg(url).args(args).output().expect("cactl runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn serve(cfg: ServiceConfig) -> (Arc<Mutex<Service>>, HttpServer) {
    let svc = Arc::new(Mutex::new(Service::new(cfg).unwrap()));
    let server = HttpServer::start(svc.clone(), "127.0.0.1:0", None).unwrap();
    (svc, server)
}

fn asr_file(dir: &Path) -> String {
    let doc = json!({
        "vm_templates": [{"vcpus": 1, "memory_mb": 512, "image_name": "img"}, {"vcpus": 1, "memory_mb": 512, "image_name": "img"}],
        "checkpoint_policy": {"mode": "user_initiated"},
        "app_spec": {"kind": "ring_sum", "iterations": 200, "seed": 4, "step_s": 1.0},
    });
    let p = dir.join("asr.json");
    std::fs::write(&p, doc.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

fn advance_until(svc: &Arc<Mutex<Service>>, pred: impl Fn(&Service) -> bool) {
    let mut s = svc.lock().unwrap();
    for _ in 0..600 {
        if pred(&s) {
            return;
        }
        s.run_for(VirtualDuration::from_secs(1));
    }
    panic!("condition not reached");
}

#[test]
fn ls_after_three_submits() {
    let dir = tempfile::tempdir().unwrap();
    let asr = asr_file(dir.path());
    let (_svc, server) = serve(ServiceConfig::default());
    for _ in 0..3 {
        let o = cactl(&server.url(), &["submit", &asr]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = cactl(&server.url(), &["ls"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert!(lines[0].starts_with("ID"));
    assert!(lines[1..].iter().all(|l| l.contains("CREATING")));
    let o = cactl(&server.url(), &["ls", "--json"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["coordinators"].as_array().unwrap().len(), 3);
}

#[test]
fn migrate_moves_app_between_services() {
    let dir = tempfile::tempdir().unwrap();
    let asr = asr_file(dir.path());
    let (a, sa) = serve(ServiceConfig::default());
    let (b, sb) = serve(ServiceConfig { default_backend: OPENSTACK_SIM.into(), vm_id_base: 1_000_000, ..ServiceConfig::default() });
    let o = cactl(&sa.url(), &["submit", &asr]);
    let id = serde_json::from_slice::<Value>(&o.stdout).unwrap()["id"].as_u64().unwrap();
    let app = AppId(id);
    advance_until(&a, |s| s.db().get(app).is_some_and(|r| r.state == AppState::Running));
    assert!(cactl(&sa.url(), &["ckpt", &id.to_string()]).status.success());
    advance_until(&a, |s| s.pool().task_count_of(app) == 0);

    let o = cactl(&sa.url(), &["migrate", &id.to_string(), "--to", &sb.url()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let new_id = AppId(serde_json::from_slice::<Value>(&o.stdout).unwrap()["id"].as_u64().unwrap());
    advance_until(&a, |s| s.db().get(app).is_none());
    assert!(a.lock().unwrap().db().is_empty());
    advance_until(&b, |s| s.db().get(new_id).is_some_and(|r| r.state == AppState::Running));
    let b = b.lock().unwrap();
    assert_eq!(b.db().len(), 1);
    assert_eq!(b.db().get(new_id).unwrap().asr.backend_id, OPENSTACK_SIM);
}

#[test]
fn restart_unknown_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let asr = asr_file(dir.path());
    let (svc, server) = serve(ServiceConfig::default());
    cactl(&server.url(), &["submit", &asr]);
    advance_until(&svc, |s| s.db().get(AppId(1)).is_some_and(|r| r.state == AppState::Running));
    let o = cactl(&server.url(), &["restart", "1", "--ckpt", "99"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("404") && err.contains("unknown checkpoint 99"), "{err}");
}

#[test]
fn unreachable_service_is_an_error() {
    let o = cactl("http://127.0.0.1:9", &["ls"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unreachable"));
}

#[test]
fn experiment_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("burst.csv");
    let o = cactl("http://unused", &["experiment", "burst100", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("t_s,metric,x,value\n"));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary["scenario"], "burst100");
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["samples"].as_u64().unwrap() as usize, csv.lines().count() - 1);

    // same seed, same report
    let again = dir.path().join("again.csv");
    cactl("http://unused", &["experiment", "burst100", "--seed", "3", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&again).unwrap(), csv.as_bytes());

    let o = cactl("http://unused", &["experiment", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown scenario"));
}
