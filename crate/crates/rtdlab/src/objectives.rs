//! Training losses: the masked-LM term, the replaced-token-detection term,
//! the λ-weighted combined objective, and the efficiency-analysis variants,
//! each with exact hand-derived gradients.
//!
//! Every loss is a per-token mean, so λ keeps the same calibration across
//! sequence lengths and batch sizes. Cross-entropies are computed in log
//! space (log-sum-exp for the vocabulary softmax, softplus for the binary
//! head) so no literal `log 0` can occur.
//!
//! Stop-gradient rule: the discriminator consumes sampled token ids, not
//! generator activations, so the only path from the detection loss back to
//! the generator is through sampling, which differentiation never crosses.
//! Gradients of that term are therefore exactly zero for every
//! generator-exclusive parameter; shared embeddings still receive both
//! terms' gradients through their own forward uses.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenBatch, UnigramTable, Vocab};
use crate::corruption::{
    apply_mask, bert_record, build_corruption, sample_mask_positions, sample_replacements,
    unigram_replacements, BertNoiseProbs, CorruptionRecord, MaskSpec,
};
use crate::encoder::backward::{mlm_head_backward, score_head_backward, tower_backward};
use crate::encoder::forward::{forward_cached, mlm_logits_cached, score_head};
use crate::encoder::{
    encoder_forward, generator_probs, sigmoid, softplus, GradStore, ModelParams, TowerKind,
};
use crate::{Error, Result};

/// The six loss variants reachable through [`loss_gradients`]. Two-stage
/// and adversarial training reuse these pieces but are trainer algorithms,
/// not loss variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Generator MLM plus λ-weighted detection over every position.
    Electra,
    /// Plain masked-LM baseline with 80/10/10 noising; trains the
    /// generator tower (run with `gen_mult = 1` for a full-size model).
    Bert,
    /// As `Electra`, but the detection loss scores only masked positions.
    Electra15,
    /// Generator MLM plus a full-size MLM over the corrupted input.
    ReplaceMlm,
    /// Generator MLM plus a copy-mixture MLM over all positions.
    AllTokensMlm,
    /// Detection only, with replacements drawn from a unigram table.
    UnigramElectra,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Electra,
        Variant::Bert,
        Variant::Electra15,
        Variant::ReplaceMlm,
        Variant::AllTokensMlm,
        Variant::UnigramElectra,
    ];

    pub fn parse(name: &str) -> Result<Variant> {
        match name {
            "electra" => Ok(Variant::Electra),
            "bert" => Ok(Variant::Bert),
            "electra15" => Ok(Variant::Electra15),
            "replace-mlm" => Ok(Variant::ReplaceMlm),
            "all-tokens-mlm" => Ok(Variant::AllTokensMlm),
            "unigram-electra" => Ok(Variant::UnigramElectra),
            _ => Err(Error::Config(format!(
                "unknown loss variant {name:?}; expected one of electra, bert, electra15, \
                 replace-mlm, all-tokens-mlm, unigram-electra"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Electra => "electra",
            Variant::Bert => "bert",
            Variant::Electra15 => "electra15",
            Variant::ReplaceMlm => "replace-mlm",
            Variant::AllTokensMlm => "all-tokens-mlm",
            Variant::UnigramElectra => "unigram-electra",
        }
    }
}

/// Everything a training step needs to know about its loss.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub variant: Variant,
    /// Weight of the detection term in the combined loss.
    pub lambda: f64,
    /// Fraction of each sequence that is masked out.
    pub mask_frac: f64,
    /// Noising mix for the `bert` variant.
    pub bert: BertNoiseProbs,
    /// Replacement distribution for `unigram-electra`.
    pub unigram: Option<UnigramTable>,
}

impl LossSpec {
    pub fn new(variant: Variant) -> LossSpec {
        LossSpec {
            variant,
            lambda: 50.0,
            mask_frac: 0.15,
            bert: BertNoiseProbs::default(),
            unigram: None,
        }
    }
}

/// Which positions the detection loss scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscScope {
    /// Every position of every sequence.
    All,
    /// Only the masked-out positions.
    MaskedOnly,
}

/// Loss values for one step. `combined` is assigned as
/// `mlm_loss + lambda * disc_loss`, never recomputed another way, so the
/// identity holds exactly in floating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// Sum of the vocabulary cross-entropy means (generator MLM plus the
    /// main tower's MLM-style term when the variant has one).
    pub mlm_loss: f64,
    /// Binary cross-entropy mean of the detection term; 0 when absent.
    pub disc_loss: f64,
    pub combined: f64,
    pub lambda: f64,
    /// Masked targets behind each vocabulary cross-entropy mean.
    pub mlm_count: usize,
    /// Positions behind the binary cross-entropy mean; 0 when absent.
    pub disc_count: usize,
    /// Positions scored by the variant's main objective: all `b*n` for
    /// electra, all-tokens-mlm, and unigram-electra; the masked positions
    /// for electra15, bert, and replace-mlm.
    pub scored_count: usize,
}

/// Masked positions as flat row indices into `[batch * n, _]` activations,
/// batch-major with positions ascending, matching the sample order of a
/// [`CorruptionRecord`].
pub(crate) fn mask_rows(mask: &MaskSpec, n: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(mask.total());
    for (i, seq) in mask.positions.iter().enumerate() {
        for &t in seq {
            rows.push(i * n + t);
        }
    }
    rows
}

/// Original token ids at the masked positions, in `mask_rows` order.
fn mask_targets(mask: &MaskSpec, originals: &TokenBatch) -> Vec<usize> {
    let mut targets = Vec::with_capacity(mask.total());
    for (i, seq) in mask.positions.iter().enumerate() {
        for &t in seq {
            targets.push(originals.ids[[i, t]] as usize);
        }
    }
    targets
}

/// Vocabulary cross-entropy at the masked positions of `input`, predicting
/// the original ids through `tower`'s tied-softmax head. Accumulates
/// `weight` times the gradient of the mean into `grads` and returns
/// `(mean, count)`.
fn mlm_term(
    params: &ModelParams,
    tower: TowerKind,
    input: &TokenBatch,
    mask: &MaskSpec,
    originals: &TokenBatch,
    weight: f64,
    grads: &mut GradStore,
) -> Result<(f64, usize)> {
    let cache = forward_cached(params, tower, &input.ids)?;
    let rows = mask_rows(mask, cache.n);
    let targets = mask_targets(mask, originals);
    let count = rows.len();
    if count == 0 {
        return Err(Error::Shape("masked-LM loss needs at least one masked position".into()));
    }
    let (logits, head) = mlm_logits_cached(params, tower, &cache.hidden, &rows);
    let mut dlogits = Array2::zeros(logits.dim());
    let inv = weight / count as f64;
    let mut total = 0.0;
    for (a, &target) in targets.iter().enumerate() {
        let row = logits.row(a);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[target];
        for v in 0..row.len() {
            let one_hot = if v == target { 1.0 } else { 0.0 };
            dlogits[[a, v]] = ((row[v] - lse).exp() - one_hot) * inv;
        }
    }
    let mut d_hidden = Array2::zeros(cache.hidden.dim());
    mlm_head_backward(params, tower, &head, &dlogits, &mut d_hidden, grads);
    tower_backward(params, &cache, &d_hidden, grads);
    Ok((total / count as f64, count))
}

/// Binary cross-entropy of the detection head over the corrupted input,
/// labels from the record (real = token equals the original). Accumulates
/// `weight` times the gradient of the mean into `grads` and returns
/// `(mean, count)`.
pub(crate) fn disc_term(
    params: &ModelParams,
    record: &CorruptionRecord,
    scope: DiscScope,
    weight: f64,
    grads: &mut GradStore,
) -> Result<(f64, usize)> {
    let cache = forward_cached(params, TowerKind::Discriminator, &record.corrupt.ids)?;
    let scores = score_head(params, params.layout.disc_score, &cache.hidden);
    let n = cache.n;
    let rows: Vec<usize> = match scope {
        DiscScope::All => (0..cache.batch * n).collect(),
        DiscScope::MaskedOnly => mask_rows(&record.mask, n),
    };
    let count = rows.len();
    if count == 0 {
        return Err(Error::Shape("detection loss needs at least one scored position".into()));
    }
    let inv = weight / count as f64;
    let mut dscores = vec![0.0; scores.len()];
    let mut total = 0.0;
    for &r in &rows {
        let real = record.labels[[r / n, r % n]];
        let s = scores[r];
        // -log D = softplus(-s), -log(1 - D) = softplus(s).
        total += if real { softplus(-s) } else { softplus(s) };
        let y = if real { 1.0 } else { 0.0 };
        dscores[r] = (sigmoid(s) - y) * inv;
    }
    let mut d_hidden = Array2::zeros(cache.hidden.dim());
    score_head_backward(
        params,
        params.layout.disc_score,
        &cache.hidden,
        &dscores,
        &mut d_hidden,
        grads,
    );
    tower_backward(params, &cache, &d_hidden, grads);
    Ok((total / count as f64, count))
}

/// Copy-mixture negative log-likelihood at one position and its partial
/// derivatives: `p_mix = d * copied + (1 - d) * p_target`, clamped away
/// from zero before the log. Returns `(nll, d nll / d d, d nll / d p)`.
fn mixture_nll(d: f64, copied: f64, p_target: f64) -> (f64, f64, f64) {
    let mix = (d * copied + (1.0 - d) * p_target).max(f64::MIN_POSITIVE);
    (-mix.ln(), -(copied - p_target) / mix, -(1.0 - d) / mix)
}

/// Copy-mixture cross-entropy over every position of the corrupted input:
/// the main tower predicts each original token as
/// `D(t) * onehot(corrupt_t) + (1 - D(t)) * softmax`. Accumulates `weight`
/// times the gradient of the mean into `grads`; returns `(mean, count)`.
fn mixture_term(
    params: &ModelParams,
    record: &CorruptionRecord,
    weight: f64,
    grads: &mut GradStore,
) -> Result<(f64, usize)> {
    let cache = forward_cached(params, TowerKind::Discriminator, &record.corrupt.ids)?;
    let n = cache.n;
    let count = cache.batch * n;
    let rows: Vec<usize> = (0..count).collect();
    let scores = score_head(params, params.layout.copy_score, &cache.hidden);
    let (logits, head) = mlm_logits_cached(params, TowerKind::Discriminator, &cache.hidden, &rows);
    let mut dlogits = Array2::zeros(logits.dim());
    let mut dscores = vec![0.0; count];
    let inv = weight / count as f64;
    let mut total = 0.0;
    for r in 0..count {
        let (i, t) = (r / n, r % n);
        let target = record.originals.ids[[i, t]] as usize;
        let copied = if record.corrupt.ids[[i, t]] == record.originals.ids[[i, t]] {
            1.0
        } else {
            0.0
        };
        let d = sigmoid(scores[r]);
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        let p_target = (row[target] - lse).exp();
        let (nll, dnll_dd, dnll_dp) = mixture_nll(d, copied, p_target);
        total += nll;
        dscores[r] = dnll_dd * d * (1.0 - d) * inv;
        // p_target is a softmax entry, so its logit gradient is
        // p_target * (onehot(target) - softmax).
        let coeff = dnll_dp * inv * p_target;
        for v in 0..row.len() {
            let one_hot = if v == target { 1.0 } else { 0.0 };
            dlogits[[r, v]] = coeff * (one_hot - (row[v] - lse).exp());
        }
    }
    let mut d_hidden = Array2::zeros(cache.hidden.dim());
    mlm_head_backward(params, TowerKind::Discriminator, &head, &dlogits, &mut d_hidden, grads);
    score_head_backward(
        params,
        params.layout.copy_score,
        &cache.hidden,
        &dscores,
        &mut d_hidden,
        grads,
    );
    tower_backward(params, &cache, &d_hidden, grads);
    Ok((total / count as f64, count))
}

/// Generator masked-LM loss: mean `-log p_G(original | input)` over the
/// masked positions, with gradients for everything the generator touches.
pub fn mlm_loss(
    params: &ModelParams,
    tower: TowerKind,
    input: &TokenBatch,
    mask: &MaskSpec,
    originals: &TokenBatch,
) -> Result<(f64, usize, GradStore)> {
    let mut grads = GradStore::zeros_like(&params.store);
    let (loss, count) = mlm_term(params, tower, input, mask, originals, 1.0, &mut grads)?;
    Ok((loss, count, grads))
}

/// Detection loss on its own: mean binary cross-entropy of real-vs-fake
/// over the scored positions.
pub fn disc_loss(
    params: &ModelParams,
    record: &CorruptionRecord,
    scope: DiscScope,
) -> Result<(f64, usize, GradStore)> {
    let mut grads = GradStore::zeros_like(&params.store);
    let (loss, count) = disc_term(params, record, scope, 1.0, &mut grads)?;
    Ok((loss, count, grads))
}

/// The combined objective: generator MLM on the masked input plus λ times
/// the detection loss on the corrupted input.
pub fn combined_loss(
    params: &ModelParams,
    record: &CorruptionRecord,
    lambda: f64,
    scope: DiscScope,
) -> Result<(LossReport, GradStore)> {
    let mut spec = LossSpec::new(match scope {
        DiscScope::All => Variant::Electra,
        DiscScope::MaskedOnly => Variant::Electra15,
    });
    spec.lambda = lambda;
    record_gradients(&spec, params, record)
}

/// MLM over the corrupted input (generator samples instead of `[MASK]`),
/// predicting the originals at the masked positions through the main
/// tower.
pub fn replace_mlm_loss(
    params: &ModelParams,
    record: &CorruptionRecord,
) -> Result<(f64, usize, GradStore)> {
    let mut grads = GradStore::zeros_like(&params.store);
    let (loss, count) = mlm_term(
        params,
        TowerKind::Discriminator,
        &record.corrupt,
        &record.mask,
        &record.originals,
        1.0,
        &mut grads,
    )?;
    Ok((loss, count, grads))
}

/// Copy-mixture MLM over every position of the corrupted input.
pub fn all_tokens_mlm_loss(
    params: &ModelParams,
    record: &CorruptionRecord,
) -> Result<(f64, usize, GradStore)> {
    let mut grads = GradStore::zeros_like(&params.store);
    let (loss, count) = mixture_term(params, record, 1.0, &mut grads)?;
    Ok((loss, count, grads))
}

/// Loss and gradients of `spec.variant` on a fixed corruption record. The
/// record is data from the gradient's point of view, which is exactly the
/// stop-gradient rule: sampling is never differentiated through.
pub fn record_gradients(
    spec: &LossSpec,
    params: &ModelParams,
    record: &CorruptionRecord,
) -> Result<(LossReport, GradStore)> {
    if !(spec.lambda.is_finite() && spec.lambda >= 0.0) {
        return Err(Error::Config(format!(
            "loss weight lambda must be a finite non-negative number, got {}",
            spec.lambda
        )));
    }
    let mut grads = GradStore::zeros_like(&params.store);
    let (mlm, disc, mlm_count, disc_count, scored_count) = match spec.variant {
        Variant::Electra | Variant::Electra15 => {
            let scope = if spec.variant == Variant::Electra {
                DiscScope::All
            } else {
                DiscScope::MaskedOnly
            };
            let (m, mk) = mlm_term(
                params,
                TowerKind::Generator,
                &record.masked,
                &record.mask,
                &record.originals,
                1.0,
                &mut grads,
            )?;
            let (d, dk) = disc_term(params, record, scope, spec.lambda, &mut grads)?;
            (m, d, mk, dk, dk)
        }
        Variant::Bert => {
            let (m, mk) = mlm_term(
                params,
                TowerKind::Generator,
                &record.corrupt,
                &record.mask,
                &record.originals,
                1.0,
                &mut grads,
            )?;
            (m, 0.0, mk, 0, mk)
        }
        Variant::ReplaceMlm => {
            let (mg, mk) = mlm_term(
                params,
                TowerKind::Generator,
                &record.masked,
                &record.mask,
                &record.originals,
                1.0,
                &mut grads,
            )?;
            let (mm, sk) = mlm_term(
                params,
                TowerKind::Discriminator,
                &record.corrupt,
                &record.mask,
                &record.originals,
                1.0,
                &mut grads,
            )?;
            (mg + mm, 0.0, mk, 0, sk)
        }
        Variant::AllTokensMlm => {
            let (mg, mk) = mlm_term(
                params,
                TowerKind::Generator,
                &record.masked,
                &record.mask,
                &record.originals,
                1.0,
                &mut grads,
            )?;
            let (mx, sk) = mixture_term(params, record, 1.0, &mut grads)?;
            (mg + mx, 0.0, mk, 0, sk)
        }
        Variant::UnigramElectra => {
            let (d, dk) = disc_term(params, record, DiscScope::All, spec.lambda, &mut grads)?;
            (0.0, d, 0, dk, dk)
        }
    };
    let report = LossReport {
        mlm_loss: mlm,
        disc_loss: disc,
        combined: mlm + spec.lambda * disc,
        lambda: spec.lambda,
        mlm_count,
        disc_count,
        scored_count,
    };
    Ok((report, grads))
}

/// [`record_gradients`] without keeping the gradients; the scalar that
/// finite-difference checks probe.
pub fn loss_for_record(
    spec: &LossSpec,
    params: &ModelParams,
    record: &CorruptionRecord,
) -> Result<LossReport> {
    Ok(record_gradients(spec, params, record)?.0)
}

/// Draws the mask and the replacements for one step, in that order, from
/// the single `rng` stream.
pub fn build_step_record(
    spec: &LossSpec,
    params: &ModelParams,
    batch: &TokenBatch,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptionRecord> {
    if vocab.size() != params.config.vocab {
        return Err(Error::Config(format!(
            "vocabulary of size {} does not match the model's configured vocab {}",
            vocab.size(),
            params.config.vocab
        )));
    }
    let mask = sample_mask_positions(batch.batch(), batch.seq_len(), spec.mask_frac, rng);
    match spec.variant {
        Variant::Bert => bert_record(batch, &mask, vocab, spec.bert, rng),
        Variant::UnigramElectra => {
            let table = spec.unigram.as_ref().ok_or_else(|| {
                Error::Config(
                    "the unigram-electra variant needs a unigram replacement table".into(),
                )
            })?;
            let samples = unigram_replacements(table, &mask, rng)?;
            build_corruption(batch, &mask, &samples)
        }
        _ => {
            let masked = apply_mask(batch, &mask, vocab)?;
            let hidden = encoder_forward(params, TowerKind::Generator, &masked.ids)?;
            let rows = mask_rows(&mask, batch.seq_len());
            let probs = generator_probs(params, &hidden, &rows);
            let samples = sample_replacements(probs.view(), rng)?;
            build_corruption(batch, &mask, &samples)
        }
    }
}

/// Single training-step entry point: corrupt the batch, then evaluate
/// `spec.variant` on the result. Deterministic given the rng state; the
/// gradient set covers exactly the parameters the variant reaches, and
/// every other tensor stays at exact zero.
pub fn loss_gradients(
    spec: &LossSpec,
    params: &ModelParams,
    batch: &TokenBatch,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<(LossReport, GradStore)> {
    let record = build_step_record(spec, params, batch, vocab, rng)?;
    record_gradients(spec, params, &record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NUM_SPECIALS;
    use crate::encoder::{init_params, randomize_params, ModelConfig, Owner};
    use crate::rng::{self, stream, Purpose};
    use proptest::prelude::*;

    // Generator width stays >= 3; layer norm over a 2-vector keeps only
    // the sign of its input, so gradients through such a tower vanish.
    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 6,
            ffn: 6,
            heads: 2,
            embed: 3,
            vocab: 11,
            max_seq: 12,
            gen_mult: 0.5,
        }
    }

    fn test_vocab() -> Vocab {
        // Eight words plus the three specials: matches tiny().vocab.
        Vocab::build("alder birch cedar elm fir hazel oak pine", 32).unwrap()
    }

    fn content_batch(cfg: &ModelConfig, batch: usize, n: usize, seed: u64) -> TokenBatch {
        let mut r = stream(seed, 0, Purpose::CorpusGen);
        let ids = Array2::from_shape_simple_fn((batch, n), || {
            (NUM_SPECIALS + rng::uniform_below(&mut r, cfg.vocab - NUM_SPECIALS)) as u32
        });
        TokenBatch { ids }
    }

    fn uniform_unigram(vocab: usize) -> UnigramTable {
        let content = (vocab - NUM_SPECIALS) as f64;
        let mut probs = vec![0.0; vocab];
        for p in probs.iter_mut().skip(NUM_SPECIALS) {
            *p = 1.0 / content;
        }
        UnigramTable { probs }
    }

    fn spec_for(variant: Variant) -> LossSpec {
        let mut spec = LossSpec::new(variant);
        spec.mask_frac = 0.25;
        if variant == Variant::UnigramElectra {
            spec.unigram = Some(uniform_unigram(tiny().vocab));
        }
        spec
    }

    #[test]
    fn mixture_kernel_degenerate_cases() {
        // Pure copy of the correct token: no loss.
        let (nll, _, _) = mixture_nll(1.0, 1.0, 0.3);
        assert_eq!(nll, 0.0);
        // No copy weight: plain MLM at that position.
        let (nll, _, _) = mixture_nll(0.0, 1.0, 0.3);
        assert!((nll - (0.3f64).ln().abs()).abs() < 1e-15);
        // Full copy weight on a replaced token: clamped, huge, finite.
        let (nll, dd, dp) = mixture_nll(1.0, 0.0, 0.3);
        assert!(nll.is_finite() && nll > 700.0);
        assert!(dd.is_finite() && dp.is_finite());
    }

    #[test]
    fn uniform_generator_scores_ln_v() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 3).unwrap();
        params.store.tensor_mut(params.layout.gen.out_proj.w).fill(0.0);
        params.store.tensor_mut(params.layout.gen.out_proj.b).fill(0.0);
        let originals = content_batch(&cfg, 1, 12, 5);
        let mask = MaskSpec { positions: vec![vec![1, 4, 9]], k: 3 };
        let input = apply_mask(&originals, &mask, &test_vocab()).unwrap();
        let (loss, count, _) =
            mlm_loss(&params, TowerKind::Generator, &input, &mask, &originals).unwrap();
        assert_eq!(count, 3);
        assert!((loss - (cfg.vocab as f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn one_hot_generator_scores_zero() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 3).unwrap();
        // Output projection fixed at u = e1, so logits are column 0 of the
        // token embeddings; give the target a huge margin there.
        params.store.tensor_mut(params.layout.gen.out_proj.w).fill(0.0);
        let b = params.store.tensor_mut(params.layout.gen.out_proj.b);
        b.fill(0.0);
        b[[0, 0]] = 1.0;
        let target = 5u32;
        let emb = params.store.tensor_mut(params.layout.token_emb);
        for v in 0..cfg.vocab {
            emb[[v, 0]] = if v == target as usize { 50.0 } else { -50.0 };
        }
        let originals = TokenBatch { ids: Array2::from_elem((1, 8), target) };
        let mask = MaskSpec { positions: vec![vec![0, 3, 7]], k: 3 };
        let input = apply_mask(&originals, &mask, &test_vocab()).unwrap();
        let (loss, _, _) =
            mlm_loss(&params, TowerKind::Generator, &input, &mask, &originals).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn half_probability_discriminator_scores_ln_2() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 9).unwrap();
        params.store.tensor_mut(params.layout.disc_score).fill(0.0);
        let batch = content_batch(&cfg, 2, 8, 11);
        let mut rng = stream(1, 0, Purpose::MaskPositions);
        let mask = sample_mask_positions(2, 8, 0.25, &mut rng);
        // Two different sample sets, identical loss: labels are irrelevant
        // when D is exactly one half everywhere.
        for fill in [super::super::corpus::MASK, 4] {
            let samples = vec![fill; mask.total()];
            let record = build_corruption(&batch, &mask, &samples).unwrap();
            for scope in [DiscScope::All, DiscScope::MaskedOnly] {
                let (loss, _, _) = disc_loss(&params, &record, scope).unwrap();
                assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_real_samples_make_disc_loss_mean_neg_log_d() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 21).unwrap();
        randomize_params(&mut params, 22, 0.4);
        let batch = content_batch(&cfg, 2, 8, 23);
        let mut rng = stream(2, 0, Purpose::MaskPositions);
        let mask = sample_mask_positions(2, 8, 0.25, &mut rng);
        let samples = mask_targets(&mask, &batch).iter().map(|&t| t as u32).collect::<Vec<_>>();
        let record = build_corruption(&batch, &mask, &samples).unwrap();
        assert!(record.labels.iter().all(|&l| l));
        let (loss, count, _) = disc_loss(&params, &record, DiscScope::All).unwrap();
        assert_eq!(count, 16);
        let hidden =
            encoder_forward(&params, TowerKind::Discriminator, &record.corrupt.ids).unwrap();
        let probs = crate::encoder::discriminator_probs(&params, &hidden);
        let oracle = probs.iter().map(|&p| -p.ln()).sum::<f64>() / 16.0;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn replace_loss_on_uncorrupted_input_matches_plain_mlm() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 31).unwrap();
        randomize_params(&mut params, 32, 0.4);
        let batch = content_batch(&cfg, 2, 8, 33);
        let mut rng = stream(3, 0, Purpose::MaskPositions);
        let mask = sample_mask_positions(2, 8, 0.25, &mut rng);
        let samples = mask_targets(&mask, &batch).iter().map(|&t| t as u32).collect::<Vec<_>>();
        let record = build_corruption(&batch, &mask, &samples).unwrap();
        let (replace, _, _) = replace_mlm_loss(&params, &record).unwrap();
        let (plain, _, _) =
            mlm_loss(&params, TowerKind::Discriminator, &batch, &mask, &batch).unwrap();
        assert_eq!(replace, plain);
    }

    #[test]
    fn variant_term_counts_and_combined_identity() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 41).unwrap();
        randomize_params(&mut params, 42, 0.3);
        let vocab = test_vocab();
        let batch = content_batch(&cfg, 2, 8, 43);
        // mask_frac 0.25 over n=8 masks k=2 per sequence, 4 in total.
        let (k_total, all) = (4, 16);
        for variant in Variant::ALL {
            let spec = spec_for(variant);
            let mut rng = stream(7, 0, Purpose::MaskPositions);
            let (report, _) = loss_gradients(&spec, &params, &batch, &vocab, &mut rng).unwrap();
            let (mlm_count, disc_count, scored) = match variant {
                Variant::Electra => (k_total, all, all),
                Variant::Electra15 => (k_total, k_total, k_total),
                Variant::Bert => (k_total, 0, k_total),
                Variant::ReplaceMlm => (k_total, 0, k_total),
                Variant::AllTokensMlm => (k_total, 0, all),
                Variant::UnigramElectra => (0, all, all),
            };
            assert_eq!(report.mlm_count, mlm_count, "{}", variant.name());
            assert_eq!(report.disc_count, disc_count, "{}", variant.name());
            assert_eq!(report.scored_count, scored, "{}", variant.name());
            assert!(report.mlm_loss >= 0.0 && report.mlm_loss.is_finite());
            assert!(report.disc_loss >= 0.0 && report.disc_loss.is_finite());
            assert_eq!(report.combined, report.mlm_loss + report.lambda * report.disc_loss);
        }
    }

    #[test]
    fn lambda_scales_discriminator_gradients_bitwise() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 51).unwrap();
        randomize_params(&mut params, 52, 0.3);
        let vocab = test_vocab();
        let batch = content_batch(&cfg, 2, 8, 53);
        let mut spec = spec_for(Variant::Electra);
        spec.lambda = 2.5;
        let mut rng = stream(9, 0, Purpose::MaskPositions);
        let record = build_step_record(&spec, &params, &batch, &vocab, &mut rng).unwrap();
        let (_, low) = record_gradients(&spec, &params, &record).unwrap();
        spec.lambda = 5.0;
        let (_, high) = record_gradients(&spec, &params, &record).unwrap();
        let mut disc_tensors = 0;
        for (id, meta, _) in params.store.iter() {
            if meta.owner != Owner::Discriminator {
                continue;
            }
            disc_tensors += 1;
            for (a, b) in low.tensor(id).iter().zip(high.tensor(id).iter()) {
                assert_eq!(*b, 2.0 * *a, "{}", meta.name);
            }
        }
        assert!(disc_tensors > 5);
    }

    #[test]
    fn disc_term_leaves_generator_exclusive_params_at_bitwise_zero() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 61).unwrap();
        randomize_params(&mut params, 62, 0.3);
        let batch = content_batch(&cfg, 2, 8, 63);
        let mut rng = stream(11, 0, Purpose::MaskPositions);
        let mask = sample_mask_positions(2, 8, 0.25, &mut rng);
        let samples = vec![4u32; mask.total()];
        let record = build_corruption(&batch, &mask, &samples).unwrap();
        let (_, _, grads) = disc_loss(&params, &record, DiscScope::All).unwrap();
        for (id, meta, _) in params.store.iter() {
            if meta.owner == Owner::Generator {
                assert!(
                    grads.tensor(id).iter().all(|&g| g == 0.0),
                    "{} received detection gradients",
                    meta.name
                );
            }
        }
        let emb = grads.tensor(params.layout.token_emb);
        assert!(emb.iter().any(|&g| g != 0.0), "shared embeddings must train");
    }

    #[test]
    fn unreachable_parameters_stay_at_bitwise_zero_per_variant() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 71).unwrap();
        randomize_params(&mut params, 72, 0.3);
        let vocab = test_vocab();
        let batch = content_batch(&cfg, 2, 8, 73);
        let zero_owner = |grads: &GradStore, owner: Owner| {
            params
                .store
                .iter()
                .filter(|(_, m, _)| m.owner == owner)
                .all(|(id, _, _)| grads.tensor(id).iter().all(|&g| g == 0.0))
        };

        let mut rng = stream(13, 0, Purpose::MaskPositions);
        let (_, g) =
            loss_gradients(&spec_for(Variant::Bert), &params, &batch, &vocab, &mut rng).unwrap();
        assert!(zero_owner(&g, Owner::Discriminator));
        assert!(!zero_owner(&g, Owner::Generator));

        let mut rng = stream(13, 1, Purpose::MaskPositions);
        let (_, g) =
            loss_gradients(&spec_for(Variant::UnigramElectra), &params, &batch, &vocab, &mut rng)
                .unwrap();
        assert!(zero_owner(&g, Owner::Generator));
        assert!(!zero_owner(&g, Owner::Discriminator));

        let mut rng = stream(13, 2, Purpose::MaskPositions);
        let (_, g) =
            loss_gradients(&spec_for(Variant::ReplaceMlm), &params, &batch, &vocab, &mut rng)
                .unwrap();
        for head in [params.layout.disc_score, params.layout.copy_score, params.layout.baseline] {
            assert!(g.tensor(head).iter().all(|&x| x == 0.0));
        }

        let mut rng = stream(13, 3, Purpose::MaskPositions);
        let (_, g) =
            loss_gradients(&spec_for(Variant::Electra), &params, &batch, &vocab, &mut rng).unwrap();
        for head in [params.layout.copy_score, params.layout.baseline] {
            assert!(g.tensor(head).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn every_variant_matches_finite_differences() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 81).unwrap();
        randomize_params(&mut params, 82, 0.4);
        let vocab = test_vocab();
        let batch = content_batch(&cfg, 2, 5, 83);
        let h = 1e-5;
        let mut checked = 0usize;
        for variant in Variant::ALL {
            let spec = spec_for(variant);
            let mut rng = stream(17, 0, Purpose::MaskPositions);
            let record = build_step_record(&spec, &params, &batch, &vocab, &mut rng).unwrap();
            let (_, analytic) = record_gradients(&spec, &params, &record).unwrap();
            let ids: Vec<_> = params.store.iter().map(|(id, _, _)| id).collect();
            for id in ids {
                let (rows, cols) = params.store.tensor(id).dim();
                let len = rows * cols;
                // Probe a deterministic spread of at most 18 scalars per
                // tensor to keep six variants affordable.
                let stride = (len / 18).max(1);
                for flat in (0..len).step_by(stride) {
                    let (i, j) = (flat / cols, flat % cols);
                    let orig = params.store.tensor(id)[[i, j]];
                    params.store.tensor_mut(id)[[i, j]] = orig + h;
                    let up = loss_for_record(&spec, &params, &record).unwrap().combined;
                    params.store.tensor_mut(id)[[i, j]] = orig - h;
                    let down = loss_for_record(&spec, &params, &record).unwrap().combined;
                    params.store.tensor_mut(id)[[i, j]] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = analytic.tensor(id)[[i, j]];
                    let err = (an - fd).abs();
                    let tol = 1e-7 + 1e-4 * an.abs().max(fd.abs());
                    assert!(
                        err <= tol,
                        "{}: {}[{i},{j}] analytic {an} vs fd {fd}",
                        variant.name(),
                        params.store.meta(id).name
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 600, "gradcheck covered {checked} scalars");
    }

    #[test]
    fn identical_inputs_give_identical_reports_and_gradients() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 91).unwrap();
        randomize_params(&mut params, 92, 0.3);
        let vocab = test_vocab();
        let batch = content_batch(&cfg, 2, 8, 93);
        for variant in Variant::ALL {
            let spec = spec_for(variant);
            let mut r1 = stream(19, 4, Purpose::MaskPositions);
            let mut r2 = stream(19, 4, Purpose::MaskPositions);
            let (rep1, g1) = loss_gradients(&spec, &params, &batch, &vocab, &mut r1).unwrap();
            let (rep2, g2) = loss_gradients(&spec, &params, &batch, &vocab, &mut r2).unwrap();
            assert_eq!(rep1, rep2);
            for (id, _, _) in params.store.iter() {
                assert_eq!(g1.tensor(id), g2.tensor(id));
            }
        }
    }

    #[test]
    fn unknown_variant_name_is_a_config_error() {
        assert!(Variant::parse("electra").is_ok());
        assert!(matches!(Variant::parse("eltecra"), Err(Error::Config(_))));
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
    }

    #[test]
    fn unigram_variant_without_table_is_a_config_error() {
        let cfg = tiny();
        let params = init_params(&cfg, 95).unwrap();
        let batch = content_batch(&cfg, 1, 8, 96);
        let spec = LossSpec::new(Variant::UnigramElectra);
        let mut rng = stream(23, 0, Purpose::MaskPositions);
        let err = loss_gradients(&spec, &params, &batch, &test_vocab(), &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn combined_identity_and_scope_counts_hold(
            seed in 0u64..1000,
            b in 1usize..3,
            n in 4usize..10,
            frac in 0.05f64..0.5,
        ) {
            let cfg = tiny();
            let params = init_params(&cfg, seed).unwrap();
            let vocab = test_vocab();
            let batch = content_batch(&cfg, b, n, seed ^ 0xabcd);
            for (variant, scope_is_all) in
                [(Variant::Electra, true), (Variant::Electra15, false)]
            {
                let mut spec = LossSpec::new(variant);
                spec.mask_frac = frac;
                let mut rng = stream(seed, 1, Purpose::MaskPositions);
                let (report, _) =
                    loss_gradients(&spec, &params, &batch, &vocab, &mut rng).unwrap();
                let k = crate::corruption::mask_count(n, frac) * b;
                prop_assert_eq!(report.mlm_count, k);
                prop_assert_eq!(report.disc_count, if scope_is_all { b * n } else { k });
                prop_assert_eq!(
                    report.combined,
                    report.mlm_loss + report.lambda * report.disc_loss
                );
                prop_assert!(report.combined.is_finite() && report.combined >= 0.0);
            }
        }
    }
}
