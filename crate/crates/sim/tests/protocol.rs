//! End-to-end protocol behavior on the deterministic simulator.

use groupcast_sim::{run, LateHandling, NeighborScript, SimScenario, Strategy};

fn base(seed: u64) -> SimScenario {
    SimScenario {
        seed,
        events_per_client: 100,
        ..SimScenario::default()
    }
}

#[test]
fn clean_run_delivers_everything_without_consensus() {
    let mut sc = base(1);
    // Bounded jitter keeps every event inside its cycle.
    sc.net.jitter_cap_ms = Some(190.0);
    let m = run(&sc);
    assert_eq!(m.violations.total(), 0, "{:?}", m.violations);
    assert_eq!(m.queries_sent, 0);
    assert_eq!(m.consensus_cycles, 0);
    assert_eq!(m.events_sent, 1000);
    assert_eq!(m.delivery_rate, 1.0);
    assert!(!m.group_failed);
}

#[test]
fn same_seed_same_metrics() {
    let mut sc = base(7);
    sc.net.p_loss = 0.2;
    sc.churn.enabled = true;
    sc.churn.session_mean_s = 120.0;
    let a = run(&sc);
    let b = run(&sc);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.trace_hash, b.trace_hash);
}

#[test]
fn different_seeds_differ() {
    let a = run(&base(1));
    let b = run(&base(2));
    assert_ne!(a.trace_hash, b.trace_hash);
}

#[test]
fn losses_trigger_consensus_but_not_violations() {
    let mut sc = base(3);
    sc.net.p_loss = 0.3;
    let m = run(&sc);
    assert!(m.consensus_cycles > 0);
    assert_eq!(m.violations.total(), 0, "{:?}", m.violations);
    // Group redundancy keeps delivery high despite 30% per-link loss.
    assert!(m.delivery_rate > 0.95, "delivery {}", m.delivery_rate);
}

#[test]
fn churn_triggers_reconfigurations_safely() {
    let mut sc = base(4);
    sc.events_per_client = 200;
    sc.churn.enabled = true;
    sc.churn.session_mean_s = 60.0; // sessions much shorter than the run
    let m = run(&sc);
    assert!(m.replica_crashes >= 1);
    assert!(m.reconfigs >= 1, "reconfigs {}", m.reconfigs);
    assert_eq!(m.violations.total(), 0, "{:?}", m.violations);
}

#[test]
fn leader_crash_mid_instance_elects_and_recovers() {
    let mut sc = base(5);
    sc.net.p_loss = 0.3;
    sc.crash_leader_on_instance = 2;
    let m = run(&sc);
    assert!(m.elections >= 1, "elections {}", m.elections);
    assert_eq!(m.violations.total(), 0, "{:?}", m.violations);
    assert!(m.delivery_rate > 0.9, "delivery {}", m.delivery_rate);
}

#[test]
fn gc_bounds_the_queue() {
    let mut sc = base(6);
    sc.events_per_client = 300;
    let with_gc = run(&sc);
    sc.gc_enabled = false;
    let without = run(&sc);
    assert!(with_gc.max_qd < without.max_qd / 4);
    assert_eq!(with_gc.violations.gc, 0);
}

#[test]
fn neighbor_join_and_leave_are_agreed() {
    let mut sc = base(8);
    sc.events_per_client = 80;
    sc.net.p_loss = 0.2;
    sc.script = vec![
        NeighborScript {
            at_ms: 4_000,
            notifier: 0,
            subject: 10,
            join: true,
        },
        NeighborScript {
            at_ms: 12_000,
            notifier: 1,
            subject: 10,
            join: false,
        },
    ];
    let m = run(&sc);
    assert_eq!(m.violations.total(), 0, "{:?}", m.violations);
}

#[test]
fn simple_discard_matches_dynamic_on_a_clean_network() {
    let mut a = base(9);
    a.net.jitter_cap_ms = Some(190.0);
    let mut b = a.clone();
    b.late_handling = LateHandling::SimpleDiscard;
    let ma = run(&a);
    let mb = run(&b);
    assert_eq!(ma.trace_hash, mb.trace_hash);
}

#[test]
fn primary_backup_runs_and_delivers() {
    let mut sc = base(10);
    sc.strategy = Strategy::PrimaryBackup;
    let m = run(&sc);
    assert!(m.delivery_rate > 0.99, "delivery {}", m.delivery_rate);
    assert_eq!(m.pb_divergence, 0);
}

#[test]
fn reliable_primary_backup_keeps_backups_consistent_under_loss() {
    let mut sc = base(11);
    sc.strategy = Strategy::ReliablePrimaryBackup;
    sc.net.p_loss = 0.3;
    let m = run(&sc);
    assert_eq!(m.pb_divergence, 0);
    assert!(m.delivery_rate > 0.4);
}

#[test]
fn consensus_strategy_delivers_every_cycle_through_instances() {
    let mut sc = base(12);
    sc.strategy = Strategy::ConsensusTotalOrder;
    let m = run(&sc);
    assert_eq!(m.violations.total(), 0, "{:?}", m.violations);
    assert!(m.delivery_rate > 0.99, "delivery {}", m.delivery_rate);
    assert!(m.p_sync > 0.99, "p_sync {}", m.p_sync);
    assert!(m.mean_latency_ms > 0.0);
}
