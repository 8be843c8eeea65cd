//! Network, churn, and clock models.

use groupcast_core::Micros;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Weibull};
use serde::{Deserialize, Serialize};

/// One-way message delay: a floor plus truncated-normal jitter, and an
/// independent per-message drop probability.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NetModel {
    pub d_min_ms: f64,
    pub jitter_mean_ms: f64,
    pub jitter_std_ms: f64,
    /// Optional upper bound on jitter; bounded-jitter scenarios resample
    /// above it, matching the resampling truncation at zero.
    pub jitter_cap_ms: Option<f64>,
    pub p_loss: f64,
}

impl Default for NetModel {
    fn default() -> Self {
        NetModel {
            d_min_ms: 50.0,
            jitter_mean_ms: 50.0,
            jitter_std_ms: 50.0,
            jitter_cap_ms: None,
            p_loss: 0.0,
        }
    }
}

impl NetModel {
    /// Sampled one-way delay in microseconds. Jitter below zero (or above
    /// the cap, when set) is resampled rather than clamped, so no
    /// probability atom forms at the floor.
    pub fn sample_delay(&self, rng: &mut ChaCha12Rng) -> Micros {
        let jitter_us = if self.jitter_std_ms == 0.0 {
            (self.jitter_mean_ms.max(0.0) * 1000.0) as i64
        } else {
            let dist = Normal::new(self.jitter_mean_ms * 1000.0, self.jitter_std_ms * 1000.0)
                .expect("std is positive");
            let cap = self.jitter_cap_ms.map(|c| c * 1000.0);
            loop {
                let v = dist.sample(rng);
                if v >= 0.0 && cap.map_or(true, |c| v <= c) {
                    break v as i64;
                }
            }
        };
        (self.d_min_ms * 1000.0) as Micros + jitter_us as Micros
    }

    pub fn dropped(&self, rng: &mut ChaCha12Rng) -> bool {
        self.p_loss > 0.0 && rng.gen::<f64>() < self.p_loss
    }
}

/// Replica session lengths: Weibull with the configured mean; the scale is
/// solved from mean = scale · Γ(1 + 1/shape).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChurnModel {
    pub enabled: bool,
    pub session_mean_s: f64,
    pub shape: f64,
}

impl Default for ChurnModel {
    fn default() -> Self {
        ChurnModel {
            enabled: false,
            session_mean_s: 1800.0,
            shape: 0.5,
        }
    }
}

fn gamma_fn(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEF: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma_fn(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut a = 0.99999999999980993;
        for (i, c) in COEF.iter().enumerate() {
            a += c / (x + i as f64 + 1.0);
        }
        let t = x + 7.5;
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
    }
}

impl ChurnModel {
    pub fn scale_s(&self) -> f64 {
        self.session_mean_s / gamma_fn(1.0 + 1.0 / self.shape)
    }

    /// Session length in microseconds.
    pub fn sample_session(&self, rng: &mut ChaCha12Rng) -> Micros {
        let w = Weibull::new(self.scale_s(), self.shape).expect("positive parameters");
        let s: f64 = w.sample(rng);
        (s.max(0.001) * 1_000_000.0) as Micros
    }
}

/// Sender-side clock error: a constant per-client offset drawn from a
/// zero-mean normal. Enabling time synchronization forces the offset to
/// zero for every actor.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClockModel {
    pub offset_std_ms: f64,
    pub sync_enabled: bool,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel {
            offset_std_ms: 0.0,
            sync_enabled: true,
        }
    }
}

impl ClockModel {
    /// Offset in microseconds, negative meaning the sender runs early.
    pub fn sample_offset(&self, rng: &mut ChaCha12Rng) -> i64 {
        if self.sync_enabled || self.offset_std_ms == 0.0 {
            return 0;
        }
        let dist = Normal::new(0.0, self.offset_std_ms * 1000.0).expect("std is positive");
        dist.sample(rng) as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn delay_respects_the_floor() {
        let net = NetModel {
            jitter_std_ms: 50.0,
            ..NetModel::default()
        };
        let mut rng = stream(1, Purpose::Delay, 0, 0);
        for _ in 0..2000 {
            assert!(net.sample_delay(&mut rng) >= 50_000);
        }
    }

    #[test]
    fn degenerate_jitter_is_constant() {
        let net = NetModel {
            jitter_mean_ms: 50.0,
            jitter_std_ms: 0.0,
            ..NetModel::default()
        };
        let mut rng = stream(1, Purpose::Delay, 0, 0);
        for _ in 0..10 {
            assert_eq!(net.sample_delay(&mut rng), 100_000);
        }
    }

    #[test]
    fn truncated_mean_matches_the_analytic_value() {
        // Resampling truncation at zero: E = μ + σ·φ(μ/σ)/Φ(μ/σ).
        let net = NetModel {
            d_min_ms: 50.0,
            jitter_mean_ms: 50.0,
            jitter_std_ms: 50.0,
            jitter_cap_ms: None,
            p_loss: 0.0,
        };
        let mut rng = stream(2, Purpose::Delay, 0, 0);
        let n = 100_000;
        let mean_ms = (0..n)
            .map(|_| net.sample_delay(&mut rng) as f64 / 1000.0)
            .sum::<f64>()
            / n as f64;
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let alpha: f64 = 50.0 / 50.0;
        let pdf = (-alpha * alpha / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let analytic = 50.0 + 50.0 + 50.0 * pdf / normal.cdf(alpha);
        let err = (mean_ms - analytic).abs() / analytic;
        assert!(err < 0.03, "mean {mean_ms} vs analytic {analytic}");
    }

    #[test]
    fn weibull_mean_converges() {
        let churn = ChurnModel {
            enabled: true,
            session_mean_s: 1800.0,
            shape: 0.5,
        };
        // Γ(3) = 2 for shape one half.
        assert!((churn.scale_s() - 900.0).abs() < 1e-6);
        let mut rng = stream(3, Purpose::Churn, 0, 0);
        let n = 200_000;
        let mean_s = (0..n)
            .map(|_| churn.sample_session(&mut rng) as f64 / 1e6)
            .sum::<f64>()
            / n as f64;
        assert!(
            (mean_s - 1800.0).abs() / 1800.0 < 0.05,
            "empirical mean {mean_s}"
        );
    }

    #[test]
    fn sync_forces_zero_offset() {
        let clock = ClockModel {
            offset_std_ms: 400.0,
            sync_enabled: true,
        };
        let mut rng = stream(4, Purpose::Clock, 0, 0);
        assert_eq!(clock.sample_offset(&mut rng), 0);
    }
}
