//! Binomial summaries for trial batches.

use serde::Serialize;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Proportion {
    pub successes: u64,
    pub trials: u64,
    pub frequency: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Wilson score interval.
pub fn wilson(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn proportion(successes: u64, trials: u64) -> Proportion {
    let (ci_low, ci_high) = wilson(successes, trials, Z95);
    let frequency = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
    Proportion { successes, trials, frequency, ci_low, ci_high }
}
