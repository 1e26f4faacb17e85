//! Reference values computed without touching the simulator: closed forms,
//! straight-line folds, and Monte-Carlo estimates from their own RNG.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// The accumulator transition written out independently: `31 s + i`.
pub fn fold(s0: i64, inputs: &[i64]) -> i64 {
    inputs.iter().fold(s0, |s, &i| s.wrapping_mul(31).wrapping_add(i))
}

/// P(at least one of `c` independent tries succeeds) at per-try `p`.
pub fn any_of(c: u32, p: f64) -> f64 {
    1.0 - (1.0 - p).powi(c as i32)
}

/// P(the favored client wins at least one of `c` uniform draws among `k`).
pub fn favored_win(c: u32, k: u32) -> f64 {
    any_of(c, 1.0 / k as f64)
}

/// P(one of `c` adversary nonces is the minimum of `m + c` uniform nonces).
pub fn lowest_nonce(c: u32, m: u32) -> f64 {
    c as f64 / (m + c) as f64
}

fn mc(seed: u64, samples: u32, mut trial: impl FnMut(&mut ChaCha20Rng) -> bool) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..samples).filter(|_| trial(&mut rng)).count() as f64 / samples as f64
}

pub fn any_of_mc(seed: u64, samples: u32, c: u32, p: f64) -> f64 {
    mc(seed, samples, |rng| (0..c).any(|_| rng.gen::<f64>() < p))
}

pub fn favored_win_mc(seed: u64, samples: u32, c: u32, k: u32) -> f64 {
    mc(seed, samples, |rng| (0..c).any(|_| rng.gen_range(0..k) == 0))
}

pub fn lowest_nonce_mc(seed: u64, samples: u32, c: u32, m: u32) -> f64 {
    mc(seed, samples, |rng| {
        let honest = (0..m).map(|_| rng.gen::<u64>()).min().unwrap_or(u64::MAX);
        let adversary = (0..c).map(|_| rng.gen::<u64>()).min().unwrap_or(u64::MAX);
        adversary < honest
    })
}

/// Expected heartbeat senders per block when each of `workers` is eligible
/// with probability `min(target, workers) / workers`.
pub fn expected_senders(workers: u64, target: u64) -> f64 {
    target.min(workers) as f64
}

/// Expected gap between one worker's heartbeats, in ms.
pub fn expected_gap_ms(workers: u64, target: u64, interval_ms: u64) -> f64 {
    workers as f64 / target.min(workers) as f64 * interval_ms as f64
}
