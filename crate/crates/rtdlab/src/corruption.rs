//! Input corruption: mask sampling, `[MASK]` application, replacement
//! sampling, corrupted-batch assembly with real/fake labels, and BERT-style
//! 80/10/10 noising.
//!
//! Mask positions are drawn without replacement: exactly `k` distinct
//! positions per sequence, resampled fresh every step (dynamic masking).
//! The labeling rule is token equality, not provenance: a masked position
//! where the sampled replacement happens to equal the original is labeled
//! real, so the discriminator is never asked to call a correct token fake.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenBatch, Vocab, MASK, NUM_SPECIALS};
use crate::rng;
use crate::{Error, Result};

/// Masked-out positions for every sequence of a batch. Row `i` lists the
/// positions of sequence `i`, ascending and distinct, always exactly `k` of
/// them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub positions: Vec<Vec<usize>>,
    pub k: usize,
}

impl MaskSpec {
    /// Total number of masked positions across the batch.
    pub fn total(&self) -> usize {
        self.k * self.positions.len()
    }
}

/// `k = ceil(mask_frac * n)`, computed with a small slack so that products
/// like `0.15 * 20` land on 3, not on `ceil(3.0000000000000004)`.
pub fn mask_count(n: usize, mask_frac: f64) -> usize {
    assert!(
        mask_frac > 0.0 && mask_frac < 1.0,
        "mask fraction must lie strictly between 0 and 1"
    );
    let k = (mask_frac * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Draws `k` distinct positions uniformly without replacement for every
/// sequence in the batch.
pub fn sample_mask_positions(
    batch: usize,
    n: usize,
    mask_frac: f64,
    rng: &mut ChaCha8Rng,
) -> MaskSpec {
    assert!(n >= 1, "sequences must be non-empty");
    let k = mask_count(n, mask_frac);
    let positions = (0..batch)
        .map(|_| rng::sample_distinct(rng, k, n))
        .collect();
    MaskSpec { positions, k }
}

/// Replaces the ids at the masked positions with `[MASK]`.
pub fn apply_mask(batch: &TokenBatch, spec: &MaskSpec, vocab: &Vocab) -> Result<TokenBatch> {
    debug_assert_eq!(vocab.id("[MASK]"), Some(MASK));
    if spec.positions.len() != batch.batch() {
        return Err(Error::Shape(format!(
            "mask spec covers {} sequences, batch has {}",
            spec.positions.len(),
            batch.batch()
        )));
    }
    let n = batch.seq_len();
    let mut ids = batch.ids.clone();
    for (row, positions) in spec.positions.iter().enumerate() {
        for &p in positions {
            if p >= n {
                return Err(Error::Shape(format!(
                    "mask position {p} out of range for sequence length {n}"
                )));
            }
            ids[[row, p]] = MASK;
        }
    }
    Ok(TokenBatch { ids })
}

/// One categorical sample per masked position at temperature 1.0. Rows of
/// `probs` follow the record convention: batch-major, positions ascending
/// within a sequence. Every row must sum to 1 within 1e-6.
pub fn sample_replacements(probs: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    let mut samples = Vec::with_capacity(probs.nrows());
    for row in probs.rows() {
        let total: f64 = row.sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Distribution(format!(
                "replacement distribution sums to {total}, expected 1"
            )));
        }
        let row = row.to_vec();
        samples.push(rng::categorical(rng, &row) as u32);
    }
    Ok(samples)
}

/// Replacement samples drawn from the corpus unigram table at every masked
/// position. Specials carry no mass in the table, so they are never drawn.
pub fn unigram_replacements(
    table: &crate::corpus::UnigramTable,
    spec: &MaskSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    let total: f64 = table.probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Distribution(format!(
            "unigram table sums to {total}, expected 1"
        )));
    }
    Ok((0..spec.total())
        .map(|_| rng::categorical(rng, &table.probs) as u32)
        .collect())
}

/// Originals, masked input, samples, corrupted input, and per-position
/// real/fake labels for one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub originals: TokenBatch,
    pub masked: TokenBatch,
    /// One replacement per masked position, batch-major, positions ascending.
    pub samples: Vec<u32>,
    pub corrupt: TokenBatch,
    /// `labels[[i, t]]` is true where the corrupted token equals the
    /// original (the "real" class).
    pub labels: Array2<bool>,
    pub mask: MaskSpec,
}

/// Assembles the corrupted batch and its labels from originals, a mask
/// spec, and one replacement sample per masked position.
pub fn build_corruption(x: &TokenBatch, spec: &MaskSpec, samples: &[u32]) -> Result<CorruptionRecord> {
    if samples.len() != spec.total() {
        return Err(Error::Shape(format!(
            "{} samples for {} masked positions",
            samples.len(),
            spec.total()
        )));
    }
    let n = x.seq_len();
    let mut corrupt = x.ids.clone();
    let mut next = 0;
    for (row, positions) in spec.positions.iter().enumerate() {
        for &p in positions {
            if p >= n {
                return Err(Error::Shape(format!(
                    "mask position {p} out of range for sequence length {n}"
                )));
            }
            corrupt[[row, p]] = samples[next];
            next += 1;
        }
    }
    let labels = Array2::from_shape_fn((x.batch(), n), |(i, t)| corrupt[[i, t]] == x.ids[[i, t]]);
    let vocab_free_mask = apply_mask_ids(&x.ids, spec);
    Ok(CorruptionRecord {
        originals: x.clone(),
        masked: TokenBatch { ids: vocab_free_mask },
        samples: samples.to_vec(),
        corrupt: TokenBatch { ids: corrupt },
        labels,
        mask: spec.clone(),
    })
}

fn apply_mask_ids(ids: &Array2<u32>, spec: &MaskSpec) -> Array2<u32> {
    let mut masked = ids.clone();
    for (row, positions) in spec.positions.iter().enumerate() {
        for &p in positions {
            masked[[row, p]] = MASK;
        }
    }
    masked
}

/// Mixing weights for BERT-style noising. The remainder keeps the token
/// unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BertNoiseProbs {
    pub mask: f64,
    pub random: f64,
}

impl Default for BertNoiseProbs {
    fn default() -> Self {
        BertNoiseProbs { mask: 0.8, random: 0.1 }
    }
}

/// Noises the masked positions BERT-style: `[MASK]` w.p. `probs.mask`, a
/// uniform random non-special token w.p. `probs.random`, kept unchanged
/// otherwise. Every masked position stays a prediction target either way.
pub fn bert_noise(
    batch: &TokenBatch,
    spec: &MaskSpec,
    vocab: &Vocab,
    probs: BertNoiseProbs,
    rng: &mut ChaCha8Rng,
) -> Result<TokenBatch> {
    if probs.mask < 0.0 || probs.random < 0.0 || probs.mask + probs.random > 1.0 {
        return Err(Error::Config(format!(
            "noise probabilities mask={} random={} must be nonnegative and sum to at most 1",
            probs.mask, probs.random
        )));
    }
    let non_special = vocab.size() - NUM_SPECIALS;
    if non_special == 0 {
        return Err(Error::Distribution(
            "vocabulary has no non-special tokens to draw from".into(),
        ));
    }
    let n = batch.seq_len();
    let mut ids = batch.ids.clone();
    for (row, positions) in spec.positions.iter().enumerate() {
        for &p in positions {
            if p >= n {
                return Err(Error::Shape(format!(
                    "mask position {p} out of range for sequence length {n}"
                )));
            }
            let u = rng::uniform_f64(rng);
            if u < probs.mask {
                ids[[row, p]] = MASK;
            } else if u < probs.mask + probs.random {
                ids[[row, p]] = (NUM_SPECIALS + rng::uniform_below(rng, non_special)) as u32;
            }
        }
    }
    Ok(TokenBatch { ids })
}

/// Record for the BERT baseline: the noised batch is both the model input
/// and the "corrupted" view, so the equality labeling rule still applies
/// (kept-unchanged positions are real, `[MASK]` and wrong random tokens are
/// fake).
pub fn bert_record(
    batch: &TokenBatch,
    spec: &MaskSpec,
    vocab: &Vocab,
    probs: BertNoiseProbs,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptionRecord> {
    let noised = bert_noise(batch, spec, vocab, probs, rng)?;
    let samples = spec
        .positions
        .iter()
        .enumerate()
        .flat_map(|(row, ps)| ps.iter().map(move |&p| (row, p)))
        .map(|(row, p)| noised.ids[[row, p]])
        .collect();
    let labels = Array2::from_shape_fn((batch.batch(), batch.seq_len()), |(i, t)| {
        noised.ids[[i, t]] == batch.ids[[i, t]]
    });
    Ok(CorruptionRecord {
        originals: batch.clone(),
        masked: noised.clone(),
        samples,
        corrupt: noised,
        labels,
        mask: spec.clone(),
    })
}
