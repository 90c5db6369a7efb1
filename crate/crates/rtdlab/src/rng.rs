//! Deterministic randomness as counter-based streams.
//!
//! Every random decision in the crate draws from a stream derived from
//! `(seed, step, purpose)`. Streams never share state: masking at step 7 is
//! independent of sampling at step 7 and of masking at step 8. Because the
//! key is reconstructed from the step counter alone, a run resumed from a
//! checkpoint consumes exactly the randomness an uninterrupted run would
//! have consumed.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// What a stream is for. The discriminant is folded into the stream key, so
/// two purposes at the same `(seed, step)` never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Parameter initialization.
    Init = 1,
    /// Shuffling the window order when batching a corpus.
    DataOrder = 2,
    /// Choosing which positions of a batch get masked.
    MaskPositions = 3,
    /// Drawing replacement tokens (from the generator or a unigram table).
    Replacement = 4,
    /// The 80/10/10 decision per masked position in BERT-style noising.
    BertNoise = 5,
    /// Generating synthetic corpus tokens.
    CorpusGen = 6,
    /// Building probe-task examples and the probe classifier head.
    Probe = 7,
    /// Masking held-out batches during evaluation.
    Eval = 8,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the stream for `(seed, step, purpose)`. Steps are 0-based; uses
/// that happen once per run (initialization, batching) pass step 0.
pub fn stream(seed: u64, step: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut h = mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    h = mix(h ^ step.wrapping_mul(0x2545_f491_4f6c_dd1d));
    h = mix(h ^ (purpose as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    ChaCha8Rng::seed_from_u64(h)
}

/// Uniform draw from `[0, 1)` with 53 bits of precision.
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw from `0..n`, unbiased via rejection. Panics if `n == 0`.
pub fn uniform_below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "uniform_below needs a nonempty range");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX - n + 1) % n;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return (v % n) as usize;
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_below(rng, i + 1);
        items.swap(i, j);
    }
}

/// `k` distinct values from `0..n` without replacement, ascending. Panics if
/// `k > n`.
pub fn sample_distinct(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} distinct values from 0..{n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + uniform_below(rng, n - i);
        pool.swap(i, j);
    }
    let mut picked = pool[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Draw from a normal with the given standard deviation, truncated to two
/// standard deviations (the BERT initializer convention).
pub fn truncated_normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    loop {
        let u1 = 1.0 - uniform_f64(rng); // (0, 1], keeps ln away from 0
        let u2 = uniform_f64(rng);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * sd;
        }
    }
}

/// Inverse-CDF draw from an unnormalized nonnegative weight vector. The
/// caller is responsible for validating the weights; entries with zero
/// weight are never returned. Panics if the total weight is not positive.
pub fn categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0, "categorical needs positive total weight");
    let u = uniform_f64(rng) * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = Some(i);
            if u < acc {
                return i;
            }
        }
    }
    // Rounding in the partial sums can leave u marginally above the final
    // accumulator; fall back to the last entry that carries mass.
    last_positive.expect("positive total implies a positive entry")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut a = stream(7, 3, Purpose::MaskPositions);
        let mut b = stream(7, 3, Purpose::MaskPositions);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn key_components_all_matter() {
        let base: Vec<u64> = {
            let mut r = stream(7, 3, Purpose::MaskPositions);
            (0..4).map(|_| r.next_u64()).collect()
        };
        for (seed, step, purpose) in [
            (8, 3, Purpose::MaskPositions),
            (7, 4, Purpose::MaskPositions),
            (7, 3, Purpose::Replacement),
        ] {
            let mut r = stream(seed, step, purpose);
            let other: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
            assert_ne!(base, other);
        }
    }

    #[test]
    fn uniform_f64_stays_in_unit_interval() {
        let mut r = stream(1, 0, Purpose::Init);
        for _ in 0..10_000 {
            let u = uniform_f64(&mut r);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn uniform_below_covers_range_roughly_evenly() {
        let mut r = stream(2, 0, Purpose::Init);
        let n = 5;
        let draws = 50_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[uniform_below(&mut r, n)] += 1;
        }
        let expected = draws as f64 / n as f64;
        for &c in &counts {
            assert!((c as f64 - expected).abs() < 0.05 * expected);
        }
    }

    #[test]
    fn sample_distinct_is_sorted_and_unique() {
        let mut r = stream(3, 0, Purpose::MaskPositions);
        for _ in 0..100 {
            let picked = sample_distinct(&mut r, 10, 64);
            assert_eq!(picked.len(), 10);
            for w in picked.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!(picked.iter().all(|&p| p < 64));
        }
    }

    #[test]
    fn sample_distinct_full_range_is_identity_set() {
        let mut r = stream(3, 1, Purpose::MaskPositions);
        let picked = sample_distinct(&mut r, 8, 8);
        assert_eq!(picked, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_normal_respects_bounds_and_scale() {
        let mut r = stream(4, 0, Purpose::Init);
        let sd = 0.02;
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = truncated_normal(&mut r, sd);
            assert!(z.abs() <= 2.0 * sd);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        // Truncation at 2 sigma shrinks the variance to ~0.774 sigma^2.
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 5e-4);
        assert!((var / (sd * sd) - 0.774).abs() < 0.05);
    }

    #[test]
    fn categorical_matches_weights() {
        let mut r = stream(5, 0, Purpose::Replacement);
        let weights = [0.5, 0.0, 0.25, 0.25];
        let draws = 40_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[categorical(&mut r, &weights)] += 1;
        }
        assert_eq!(counts[1], 0);
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                let freq = counts[i] as f64 / draws as f64;
                assert!((freq - w).abs() < 0.01, "weight {i}: {freq} vs {w}");
            }
        }
    }

    #[test]
    fn shuffle_is_deterministic_per_key() {
        let mut a: Vec<u32> = (0..20).collect();
        let mut b: Vec<u32> = (0..20).collect();
        shuffle(&mut stream(6, 0, Purpose::DataOrder), &mut a);
        shuffle(&mut stream(6, 0, Purpose::DataOrder), &mut b);
        assert_eq!(a, b);
        let mut c: Vec<u32> = (0..20).collect();
        shuffle(&mut stream(7, 0, Purpose::DataOrder), &mut c);
        assert_ne!(a, c);
    }
}
