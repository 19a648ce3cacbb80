//! Deterministic randomness.
//!
//! Every random draw in the workspace comes from one u64 seed. Components
//! never share a generator: each derives its own stream from `(seed, label)`
//! or `(seed, label, index)`, so adding a consumer or reordering work cannot
//! change what any other component sees. Indexed streams also make resume
//! trivial: step k of a training run draws from `(seed, "...", k)` no matter
//! how the process got there.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 round; the standard finalizer, good avalanche.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = mix(seed);
    for &b in label.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index)
}

/// Generator for the component named by `label`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label, 0))
}

/// Generator for one element of a per-item family (sample index, step index).
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label, index.wrapping_add(1)))
}

/// Standard normal via Box-Muller. `u1` is pushed into (0, 1] so the log is
/// always finite.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `n` standard-normal f32 draws.
pub fn normal_f32s<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| standard_normal(rng) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<f64> = {
            let mut r = stream(7, "dataset");
            (0..8).map(|_| r.gen::<f64>()).collect()
        };
        let b: Vec<f64> = {
            let mut r = stream(7, "dataset");
            (0..8).map(|_| r.gen::<f64>()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn labels_separate_streams() {
        let mut a = stream(7, "dataset");
        let mut b = stream(7, "train");
        let xa: u64 = a.gen();
        let xb: u64 = b.gen();
        assert_ne!(xa, xb);
    }

    #[test]
    fn indexed_streams_are_independent_of_visit_order() {
        let mut fwd: Vec<u64> = Vec::new();
        for i in 0..4 {
            fwd.push(indexed_stream(3, "step", i).gen());
        }
        let mut rev: Vec<u64> = Vec::new();
        for i in (0..4).rev() {
            rev.push(indexed_stream(3, "step", i).gen());
        }
        rev.reverse();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = stream(11, "normal");
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = standard_normal(&mut r);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
