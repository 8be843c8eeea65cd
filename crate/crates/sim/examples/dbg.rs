use groupcast_sim::{run, LateHandling, SimScenario, Strategy};
use std::time::Instant;

fn time(label: &str, sc: &SimScenario) {
    let t = Instant::now();
    let m = run(sc);
    println!(
        "{label}: {:.2}s wall | delivery={:.3} lat={:.0}ms p_sync={:.3} qd_max={} elect={} reconf={} viol={} fail={}",
        t.elapsed().as_secs_f64(), m.delivery_rate, m.mean_latency_ms, m.p_sync, m.max_qd, m.elections, m.reconfigs, m.violations.total(), m.group_failed
    );
}

fn main() {
    // criterion 1 style: churn + loss + jitter
    let mut sc = SimScenario { seed: 42, events_per_client: 400, ..SimScenario::default() };
    sc.net.p_loss = 0.5;
    sc.net.jitter_std_ms = 250.0;
    sc.churn.enabled = true;
    time("c1 heavy", &sc);

    // criterion 5: p=0.7 fast, 1000 events
    let mut sc = SimScenario { seed: 1, ..SimScenario::default() };
    sc.net.p_loss = 0.7;
    time("c5 fast p=.7", &sc);

    let mut sc = SimScenario { seed: 1, ..SimScenario::default() };
    sc.net.p_loss = 0.5;
    time("c5 fast p=.5", &sc);

    // criterion 7: clock 400ms simple discard (the backlog case)
    let mut sc = SimScenario { seed: 2, ..SimScenario::default() };
    sc.clock.sync_enabled = false;
    sc.clock.offset_std_ms = 400.0;
    sc.late_handling = LateHandling::SimpleDiscard;
    time("c7 simple s400", &sc);

    let mut sc = SimScenario { seed: 2, ..SimScenario::default() };
    sc.clock.sync_enabled = false;
    sc.clock.offset_std_ms = 400.0;
    time("c7 dynamic s400", &sc);

    // criterion 8: no GC
    let mut sc = SimScenario { seed: 3, events_per_client: 1000, ..SimScenario::default() };
    sc.gc_enabled = false;
    time("c8 no-gc", &sc);
    let mut sc2 = SimScenario { seed: 3, events_per_client: 1000, ..SimScenario::default() };
    sc2.gc_enabled = true;
    time("c8 gc5s", &sc2);

    // consensus strategy p=.5
    let mut sc = SimScenario { seed: 4, ..SimScenario::default() };
    sc.strategy = Strategy::ConsensusTotalOrder;
    sc.net.p_loss = 0.5;
    time("c5 cons p=.5", &sc);
}
