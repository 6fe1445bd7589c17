//! VM pool conservation under random claim/release/failure sequences.

use cloudckpt::cloudsim::{
    BackendProfile, CloudEvent, CloudManager, FailureTarget, VirtualClock, VirtualCluster, VirtualDuration, VmStatus,
    VmTemplate, SNOOZE_SIM,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Create(usize),
    Destroy(usize),
    Fail(usize, usize),
    Advance(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1usize..6).prop_map(Op::Create),
        any::<usize>().prop_map(Op::Destroy),
        (any::<usize>(), any::<usize>()).prop_map(|(a, b)| Op::Fail(a, b)),
        (0u64..5000).prop_map(Op::Advance),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn claimed_minus_released_is_live(ops in prop::collection::vec(op(), 1..60)) {
        let mut cloud = CloudManager::new([BackendProfile::snooze_sim().with_capacity(12)]);
        let mut clock: VirtualClock<CloudEvent> = VirtualClock::new();
        let mut clusters: Vec<VirtualCluster> = Vec::new();
        for o in ops {
            match o {
                Op::Create(n) => {
                    let free = cloud.pool(SNOOZE_SIM).unwrap().idle;
                    match cloud.create_cluster(&mut clock, SNOOZE_SIM, &vec![VmTemplate::new(1, 256, "x"); n]) {
                        Ok(c) => clusters.push(c),
                        Err(_) => prop_assert!(n > free),
                    }
                }
                Op::Destroy(i) if !clusters.is_empty() => {
                    let c = clusters.remove(i % clusters.len());
                    cloud.destroy_cluster(&c);
                }
                Op::Fail(i, j) if !clusters.is_empty() => {
                    let c = &clusters[i % clusters.len()];
                    let vm = c.vm_ids[j % c.len()];
                    let now = clock.now();
                    let up = cloud.status(vm) == Some(VmStatus::Up);
                    // only a running VM can fail right now
                    prop_assert_eq!(cloud.inject_failure(&mut clock, FailureTarget::Vm(vm), now).is_ok(), up);
                }
                Op::Advance(ms) => {
                    let until = clock.now() + VirtualDuration(ms);
                    while let Some((_, ev)) = clock.pop_due(until) {
                        cloud.handle_event(&mut clock, ev);
                    }
                    clock.set_now(until);
                }
                _ => {}
            }
            let p = cloud.pool(SNOOZE_SIM).unwrap();
            let in_clusters: usize = clusters.iter().map(|c| c.len()).sum();
            prop_assert_eq!((p.claimed_total - p.released_total) as usize, in_clusters);
            prop_assert_eq!(p.live, in_clusters);
            prop_assert_eq!(p.idle + p.live, p.capacity);
            for c in &clusters {
                for v in &c.vm_ids {
                    prop_assert_ne!(cloud.status(*v), Some(VmStatus::Released));
                }
            }
        }
    }
}
