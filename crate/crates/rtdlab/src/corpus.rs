//! Text ingestion, vocabularies, deterministic batching, and synthetic
//! Markov corpora.
//!
//! Tokenization is whitespace splitting: the vocabulary stays tiny, the
//! generator softmax stays enumerable, and oracle tests can count things by
//! hand. Three special tokens occupy the lowest ids so downstream code can
//! hard-assume them: `[PAD]`=0, `[UNK]`=1, `[MASK]`=2.
//!
//! Synthetic corpora are sampled from seeded Markov chains. The plain
//! order-1 matrices are doubly stochastic (rows and columns both sum to 1),
//! so their stationary distribution is uniform. The two-regime corpus
//! instead pairs a sharp chain with its time-reversal: the regimes share
//! one stationary distribution, so chain identity never leaks into unigram
//! counts, while the transition structure separating them stays steep
//! enough to learn from.

use std::collections::HashMap;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

use crate::rng::{self, Purpose};
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const NUM_SPECIALS: usize = 3;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[MASK]"];

/// Token-string ↔ id mapping with dense ids `0..size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from whitespace-delimited text: tokens ranked by
    /// frequency (ties broken lexicographically), truncated to `max_size`
    /// including the three specials.
    pub fn build(corpus: &str, max_size: usize) -> Result<Vocab> {
        if max_size < NUM_SPECIALS + 1 {
            return Err(Error::Config(format!(
                "vocab max_size must be at least {}, got {max_size}",
                NUM_SPECIALS + 1
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for tok in corpus.split_whitespace() {
            if !SPECIAL_TOKENS.contains(&tok) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Corpus("empty corpus".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Ok(Vocab::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, ids }
    }

    /// Number of ids, specials included.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Panics on an out-of-range id; ids come from this vocabulary.
    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// One token per line, line number = id.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    /// Inverse of [`Vocab::to_lines`].
    pub fn from_lines(text: &str) -> Result<Vocab> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < NUM_SPECIALS
            || SPECIAL_TOKENS.iter().zip(&tokens).any(|(s, t)| s != t)
        {
            return Err(Error::Corpus(
                "vocab file must start with [PAD], [UNK], [MASK]".into(),
            ));
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Encodes whitespace-delimited text. Unknown tokens map to `[UNK]`; so do
/// literal special-token strings, which keeps raw corpora free of `[MASK]`.
pub fn encode(text: &str, vocab: &Vocab) -> Vec<u32> {
    text.split_whitespace()
        .map(|tok| {
            if SPECIAL_TOKENS.contains(&tok) {
                UNK
            } else {
                vocab.id(tok).unwrap_or(UNK)
            }
        })
        .collect()
}

/// Joins the tokens for `ids` with single spaces.
pub fn decode(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A `[batch, n]` block of raw (uncorrupted) token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Array2<u32>,
}

impl TokenBatch {
    pub fn batch(&self) -> usize {
        self.ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.ncols()
    }
}

/// Chunks a token stream into non-overlapping length-`n` windows (trailing
/// remainder dropped), shuffles the window order with the seeded stream, and
/// groups windows into batches. A trailing group smaller than `batch` is
/// dropped as well, so every emitted batch is exactly `[batch, n]`.
pub fn make_batches(ids: &[u32], n: usize, batch: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    assert!(n >= 2, "sequence length must be at least 2");
    assert!(batch >= 1, "batch size must be at least 1");
    if ids.len() < n {
        return Err(Error::Corpus("corpus shorter than sequence length".into()));
    }
    let num_windows = ids.len() / n;
    let mut order: Vec<usize> = (0..num_windows).collect();
    rng::shuffle(&mut rng::stream(seed, 0, Purpose::DataOrder), &mut order);

    let mut batches = Vec::with_capacity(num_windows / batch);
    for group in order.chunks_exact(batch) {
        let mut block = Array2::zeros((batch, n));
        for (row, &w) in group.iter().enumerate() {
            for (col, &id) in ids[w * n..(w + 1) * n].iter().enumerate() {
                block[[row, col]] = id;
            }
        }
        batches.push(TokenBatch { ids: block });
    }
    Ok(batches)
}

/// Unigram probabilities per token id. Specials carry zero mass.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramTable {
    pub probs: Vec<f64>,
}

/// Counts non-special tokens in `ids`: `probs[t] = count(t) / total`.
pub fn unigram_table(ids: &[u32], vocab: &Vocab) -> Result<UnigramTable> {
    let mut counts = vec![0u64; vocab.size()];
    let mut total = 0u64;
    for &id in ids {
        if !vocab.is_special(id) {
            counts[id as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Corpus("empty stream".into()));
    }
    let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(UnigramTable { probs })
}

/// Markov chain order for synthetic corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkovOrder {
    One,
    Two,
}

/// Recipe for a synthetic corpus. The chain structure is keyed by
/// `matrix_seed`; the sampling pass is keyed separately, so one chain can
/// produce many corpora.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpusSpec {
    /// Number of distinct (non-special) tokens.
    pub vocab_size: usize,
    pub order: MarkovOrder,
    pub matrix_seed: u64,
    /// Length of the generated corpus in tokens.
    pub length: usize,
}

/// Token string for chain symbol `s`: `t000`, `t001`, ... Zero padding keeps
/// lexicographic tie-breaking aligned with symbol order.
pub fn symbol_token(s: usize, vocab_size: usize) -> String {
    let width = (vocab_size.max(2) - 1).to_string().len().max(3);
    format!("t{s:0width$}")
}

/// The transition matrix implied by `(vocab_size, order, matrix_seed)`.
///
/// Order 1 returns `[V, V]`, Sinkhorn-balanced to doubly stochastic. Order 2
/// returns `[V*V, V]` (row `prev2 * V + prev1`), row-normalized only.
pub fn transition_matrix(vocab_size: usize, order: MarkovOrder, matrix_seed: u64) -> Array2<f64> {
    let v = vocab_size;
    let rows = match order {
        MarkovOrder::One => v,
        MarkovOrder::Two => v * v,
    };
    let mut r = rng::stream(matrix_seed, 0, Purpose::CorpusGen);
    // exp(1.5 z) entries give rows with a few strongly preferred successors.
    let mut t = Array2::zeros((rows, v));
    for i in 0..rows {
        for j in 0..v {
            t[[i, j]] = (1.5 * rng::truncated_normal(&mut r, 1.0)).exp();
        }
    }
    match order {
        MarkovOrder::One => {
            // Sinkhorn balancing; at convergence rows and columns sum to 1.
            for _ in 0..200 {
                for i in 0..rows {
                    let s: f64 = t.row(i).sum();
                    t.row_mut(i).mapv_inplace(|x| x / s);
                }
                for j in 0..v {
                    let s: f64 = t.column(j).sum();
                    t.column_mut(j).mapv_inplace(|x| x / s);
                }
            }
            // Final row pass so the row-stochastic invariant holds exactly.
            for i in 0..rows {
                let s: f64 = t.row(i).sum();
                t.row_mut(i).mapv_inplace(|x| x / s);
            }
        }
        MarkovOrder::Two => {
            for i in 0..rows {
                let s: f64 = t.row(i).sum();
                t.row_mut(i).mapv_inplace(|x| x / s);
            }
        }
    }
    t
}

/// Samples `length` chain symbols (0-based, in `0..vocab_size`).
pub fn sample_chain(
    matrix: &Array2<f64>,
    order: MarkovOrder,
    vocab_size: usize,
    length: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let v = vocab_size;
    let mut out = Vec::with_capacity(length);
    match order {
        MarkovOrder::One => {
            let mut prev = rng::uniform_below(rng, v);
            out.push(prev);
            while out.len() < length {
                let row = matrix.row(prev);
                prev = rng::categorical(rng, row.as_slice().expect("contiguous row"));
                out.push(prev);
            }
        }
        MarkovOrder::Two => {
            let mut p2 = rng::uniform_below(rng, v);
            let mut p1 = rng::uniform_below(rng, v);
            out.push(p2);
            if length > 1 {
                out.push(p1);
            }
            while out.len() < length {
                let row = matrix.row(p2 * v + p1);
                let next = rng::categorical(rng, row.as_slice().expect("contiguous row"));
                out.push(next);
                p2 = p1;
                p1 = next;
            }
        }
    }
    out.truncate(length);
    out
}

/// Generates a whitespace-joined synthetic corpus. Deterministic given
/// `(spec, seed)`.
pub fn synthetic_corpus(spec: &SyntheticCorpusSpec, seed: u64) -> String {
    let matrix = transition_matrix(spec.vocab_size, spec.order, spec.matrix_seed);
    let mut r = rng::stream(seed, 0, Purpose::CorpusGen);
    let symbols = sample_chain(&matrix, spec.order, spec.vocab_size, spec.length, &mut r);
    symbols
        .iter()
        .map(|&s| symbol_token(s, spec.vocab_size))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Recipe for a corpus interleaving two chains ("regimes") in alternating
/// fixed-length segments. With `segment_len` equal to the training window
/// length, every window drawn from the corpus is pure-regime, which is what
/// the downstream probe task discriminates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoRegimeSpec {
    pub vocab_size: usize,
    pub matrix_seed: u64,
    pub length: usize,
    pub segment_len: usize,
}

/// The order-1 transition matrix of regime 0 or 1.
///
/// Regime 0 is a sharp row-normalized chain (a few strongly preferred
/// successors per token); regime 1 is its time-reversal
/// `P'(j|i) = pi_j P(i|j) / pi_i`. Both regimes therefore share one
/// stationary distribution: unigram counts cannot separate them, and a
/// probe has to read transition structure.
pub fn regime_matrix(spec: &TwoRegimeSpec, regime: usize) -> Array2<f64> {
    assert!(regime < 2, "two regimes only");
    let v = spec.vocab_size;
    let mut r = rng::stream(spec.matrix_seed, 0, Purpose::CorpusGen);
    let mut t = Array2::zeros((v, v));
    for i in 0..v {
        for j in 0..v {
            t[[i, j]] = (1.5 * rng::truncated_normal(&mut r, 1.0)).exp();
        }
    }
    for i in 0..v {
        let s: f64 = t.row(i).sum();
        t.row_mut(i).mapv_inplace(|x| x / s);
    }
    if regime == 0 {
        return t;
    }
    let pi = stationary_distribution(&t);
    let mut rev = Array2::zeros((v, v));
    for i in 0..v {
        for j in 0..v {
            rev[[i, j]] = pi[j] * t[[j, i]] / pi[i];
        }
    }
    // Rows sum to 1 analytically; renormalize to absorb the power-iteration
    // residual in pi.
    for i in 0..v {
        let s: f64 = rev.row(i).sum();
        rev.row_mut(i).mapv_inplace(|x| x / s);
    }
    rev
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
fn stationary_distribution(t: &Array2<f64>) -> Vec<f64> {
    let v = t.nrows();
    let mut pi = vec![1.0 / v as f64; v];
    for _ in 0..500 {
        let mut next = vec![0.0; v];
        for i in 0..v {
            for j in 0..v {
                next[j] += pi[i] * t[[i, j]];
            }
        }
        let s: f64 = next.iter().sum();
        for x in &mut next {
            *x /= s;
        }
        pi = next;
    }
    pi
}

/// Generates the interleaved corpus: segments 0, 2, 4, ... come from regime
/// 0 and odd segments from regime 1. Deterministic given `(spec, seed)`.
pub fn two_regime_corpus(spec: &TwoRegimeSpec, seed: u64) -> String {
    assert!(spec.segment_len >= 2, "segments must hold at least 2 tokens");
    let matrices = [regime_matrix(spec, 0), regime_matrix(spec, 1)];
    let mut r = rng::stream(seed, 0, Purpose::CorpusGen);
    let mut tokens: Vec<String> = Vec::with_capacity(spec.length);
    let mut segment = 0;
    while tokens.len() < spec.length {
        let take = spec.segment_len.min(spec.length - tokens.len());
        let symbols = sample_chain(
            &matrices[segment % 2],
            MarkovOrder::One,
            spec.vocab_size,
            take,
            &mut r,
        );
        tokens.extend(symbols.iter().map(|&s| symbol_token(s, spec.vocab_size)));
        segment += 1;
    }
    tokens.join(" ")
}
