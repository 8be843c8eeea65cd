//! Closed-form synchronization delay and update loss rate per approach.

use crate::scenario::Strategy;

/// Predicted (synchronization delay, update loss rate) for an approach.
///
/// `d_c` is the delay of collecting a message from all replicas, `d_m` the
/// reliable multicast delay, and `p_sync` the probability that a cycle
/// needs consensus; all three are measured from the simulation that the
/// prediction is compared against.
pub fn closed_form(
    strategy: Strategy,
    n: u32,
    p_loss: f64,
    d_c: f64,
    d_m: f64,
    p_sync: f64,
) -> (f64, f64) {
    assert!((0.0..=1.0).contains(&p_loss));
    assert!(n >= 1);
    let single = p_loss + (1.0 - p_loss) * p_loss;
    let pn = p_loss.powi(n as i32);
    let group = pn + (1.0 - pn) * pn;
    match strategy {
        Strategy::PrimaryBackup => (0.0, single),
        Strategy::ReliablePrimaryBackup => (d_c + d_m, single),
        Strategy::ConsensusTotalOrder => (d_c + 2.0 * d_m, group),
        Strategy::Fast => ((d_c + 2.0 * d_m) * p_sync, group),
    }
}

/// Update delivery rate implied by the loss rate.
pub fn delivery_rate(strategy: Strategy, n: u32, p_loss: f64) -> f64 {
    1.0 - closed_form(strategy, n, p_loss, 0.0, 0.0, 0.0).1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_loss_at_half() {
        // n=5, p=0.5: 0.03125 + 0.96875·0.03125 ≈ 0.06152.
        let (_, loss) = closed_form(Strategy::Fast, 5, 0.5, 0.0, 0.0, 0.0);
        assert!((loss - 0.061523).abs() < 1e-5);
    }

    #[test]
    fn primary_backup_loss() {
        // p=0.3: 0.3 + 0.7·0.3 = 0.51.
        let (sync, loss) = closed_form(Strategy::PrimaryBackup, 5, 0.3, 9.0, 9.0, 1.0);
        assert_eq!(sync, 0.0);
        assert!((loss - 0.51).abs() < 1e-12);
    }

    #[test]
    fn fast_sync_delay_vanishes_with_p_sync() {
        let (sync, _) = closed_form(Strategy::Fast, 5, 0.5, 120.0, 80.0, 0.0);
        assert_eq!(sync, 0.0);
    }

    #[test]
    fn group_beats_single_loss_on_the_whole_grid() {
        // p ∈ {0.01..0.99}, n ∈ {2..10}: group loss strictly below single.
        for pi in 1..100 {
            let p = pi as f64 / 100.0;
            for n in 2..=10 {
                let single = closed_form(Strategy::PrimaryBackup, n, p, 0.0, 0.0, 0.0).1;
                let group = closed_form(Strategy::Fast, n, p, 0.0, 0.0, 0.0).1;
                assert!(group < single, "p={p} n={n}");
            }
        }
    }

    #[test]
    fn group_loss_decreases_in_n() {
        for pi in 1..100 {
            let p = pi as f64 / 100.0;
            let mut prev = f64::INFINITY;
            for n in 1..=10 {
                let loss = closed_form(Strategy::Fast, n, p, 0.0, 0.0, 0.0).1;
                assert!(loss <= prev, "p={p} n={n}");
                prev = loss;
            }
        }
    }
}
