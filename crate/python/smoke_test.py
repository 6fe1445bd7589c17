"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation ./crates/py
"""

import json

import pycloudckpt as cc


def main():
    assert cc.traffic(100, 0, 1, 5) == 100
    assert cc.traffic(3, 2, 2, 7) == 20
    assert "burst100" in cc.scenarios()

    svc = cc.Service()
    asr = {
        "vm_templates": [{"vcpus": 1, "memory_mb": 512, "image_name": "img"}] * 2,
        "checkpoint_policy": {"mode": "user_initiated"},
        "app_spec": {"kind": "ring_sum", "iterations": 20, "seed": 7, "step_s": 1.0},
    }
    status, body = svc.handle("POST", "/coordinators", json.dumps(asr))
    assert status == 202, body
    app = json.loads(body)["id"]

    svc.run_for(30)
    status, body = svc.handle("GET", f"/coordinators/{app}")
    assert json.loads(body)["state"] == "RUNNING", body
    status, body = svc.handle("POST", f"/coordinators/{app}/checkpoints")
    assert status == 202, body
    svc.run_for(60)
    status, body = svc.handle("GET", f"/coordinators/{app}")
    record = json.loads(body)
    assert record["output"], record
    kinds = [json.loads(line)["kind"] for line in svc.trace().splitlines()]
    assert "checkpoint_stored" in kinds and "completed" in kinds

    status, _ = svc.handle("GET", "/coordinators/999")
    assert status == 404

    csv, summary = cc.run_experiment("burst100", seed=2)
    summary = json.loads(summary)
    assert csv.startswith("t_s,metric,x,value")
    assert summary["summary"]["model_mismatches"] == 0
    assert summary["summary"]["fit_r2"] >= 0.99
    print(f"python smoke test ok: app {app} output {record['output'][:16]}..., burst100 r2 {summary['summary']['fit_r2']:.4f}")


if __name__ == "__main__":
    main()
