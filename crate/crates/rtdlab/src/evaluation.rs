//! Quality metrics: generator masked-LM accuracy, replaced-token-detection
//! metrics, the closed-form optimal discriminator and its inversion, the
//! use of a trained detector as a masked-LM predictor, and a synthetic
//! downstream probe (two-regime discrimination) standing in for real
//! fine-tuning tasks.
//!
//! Everything here is read-only over model parameters: the probe clones
//! the model before fine-tuning. All argmax ties break to the lowest token
//! id so results are identical across platforms.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    regime_matrix, sample_chain, symbol_token, MarkovOrder, TokenBatch, TwoRegimeSpec, Vocab,
    MASK, UNK,
};
use crate::corruption::{apply_mask, sample_mask_positions};
use crate::encoder::backward::tower_backward;
use crate::encoder::forward::forward_cached;
use crate::encoder::{
    discriminator_probs, encoder_forward, generator_probs, sigmoid, GradStore, LinearIds,
    ModelParams, ParamId, TowerKind,
};
use crate::objectives::{build_step_record, LossSpec};
use crate::rng::{self, Purpose};
use crate::trainer::{optimizer_step_filtered, OptimizerHp, OptimizerState};
use crate::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of a probability table against target ids, one row per
/// prediction site.
pub fn accuracy_from_probs(probs: &Array2<f64>, targets: &[u32]) -> Result<f64> {
    if probs.nrows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "{} probability rows against {} targets",
            probs.nrows(),
            targets.len()
        )));
    }
    let hits = probs
        .rows()
        .into_iter()
        .zip(targets)
        .filter(|(row, &t)| argmax_lowest(row.as_slice().expect("contiguous row")) == t as usize)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Generator top-1 accuracy at freshly masked positions of the given
/// batches. Mask positions are drawn from `rng`, so callers key it by
/// evaluation purpose for reproducibility.
pub fn masked_lm_accuracy(
    params: &ModelParams,
    batches: &[TokenBatch],
    mask_frac: f64,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Shape("masked-LM accuracy needs at least one batch".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for batch in batches {
        let n = batch.seq_len();
        let mask = sample_mask_positions(batch.batch(), n, mask_frac, rng);
        let masked = apply_mask(batch, &mask, vocab)?;
        let hidden = encoder_forward(params, TowerKind::Generator, &masked.ids)?;
        let mut rows = Vec::with_capacity(mask.total());
        let mut targets = Vec::with_capacity(mask.total());
        for (i, positions) in mask.positions.iter().enumerate() {
            for &t in positions {
                rows.push(i * n + t);
                targets.push(batch.ids[[i, t]]);
            }
        }
        let probs = generator_probs(params, &hidden, &rows);
        for (a, &t) in targets.iter().enumerate() {
            if argmax_lowest(probs.row(a).as_slice().expect("contiguous row")) == t as usize {
                hits += 1;
            }
        }
        total += targets.len();
    }
    Ok(hits as f64 / total as f64)
}

/// Detection quality at threshold 1/2. The fake (replaced) class is the
/// positive one; a score exactly at the threshold counts as a real
/// prediction. Vacuous ratios are reported as 1.0 and flagged rather than
/// left undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtdMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// No fake labels in the input: recall is vacuous.
    pub zero_label_positives: bool,
    /// No fake predictions: precision is vacuous.
    pub zero_predicted_positives: bool,
    pub real_count: usize,
    pub fake_count: usize,
}

/// Metrics from per-position probabilities of being real and ground-truth
/// labels (`true` = real).
pub fn rtd_metrics(scores: &[f64], labels_real: &[bool]) -> RtdMetrics {
    assert_eq!(scores.len(), labels_real.len(), "scores and labels must align");
    assert!(!scores.is_empty(), "metrics need at least one position");
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&d, &real) in scores.iter().zip(labels_real) {
        let predicted_fake = d < 0.5;
        match (predicted_fake, real) {
            (true, false) => tp += 1,
            (true, true) => fp += 1,
            (false, true) => tn += 1,
            (false, false) => fn_ += 1,
        }
    }
    let total = tp + fp + tn + fn_;
    let zero_label_positives = tp + fn_ == 0;
    let zero_predicted_positives = tp + fp == 0;
    RtdMetrics {
        accuracy: (tp + tn) as f64 / total as f64,
        precision: if zero_predicted_positives { 1.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: if zero_label_positives { 1.0 } else { tp as f64 / (tp + fn_) as f64 },
        zero_label_positives,
        zero_predicted_positives,
        real_count: tn + fp,
        fake_count: tp + fn_,
    }
}

/// Detection metrics of the discriminator over corruption records built
/// from the given batches, exactly as training would build them.
pub fn detection_eval(
    spec: &LossSpec,
    params: &ModelParams,
    batches: &[TokenBatch],
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<RtdMetrics> {
    if batches.is_empty() {
        return Err(Error::Shape("detection evaluation needs at least one batch".into()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for batch in batches {
        let record = build_step_record(spec, params, batch, vocab, rng)?;
        let hidden = encoder_forward(params, TowerKind::Discriminator, &record.corrupt.ids)?;
        let probs = discriminator_probs(params, &hidden);
        scores.extend(probs.iter().copied());
        labels.extend(record.labels.iter().copied());
    }
    Ok(rtd_metrics(&scores, &labels))
}

/// The masking odds ratio `a = (1 - p_mask) / p_mask`: unmasked positions
/// per masked one.
pub fn mask_ratio(p_mask: f64) -> Result<f64> {
    if !(p_mask > 0.0 && p_mask < 1.0) {
        return Err(Error::Config(format!(
            "mask probability {p_mask} outside the open interval (0, 1)"
        )));
    }
    Ok((1.0 - p_mask) / p_mask)
}

fn unit_interval(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Config(format!("{name} = {x} outside [0, 1]")));
    }
    Ok(())
}

/// The detector that minimizes the expected per-token Bernoulli loss when a
/// position is masked with probability `p_mask`, originals follow `p_data`,
/// and replacements follow `p_g`:
/// `D = p_data (a + p_g) / (a p_data + p_g)` with `a = (1-p_mask)/p_mask`.
pub fn optimal_discriminator(p_data: f64, p_g: f64, p_mask: f64) -> Result<f64> {
    unit_interval("p_data", p_data)?;
    unit_interval("p_G", p_g)?;
    let a = mask_ratio(p_mask)?;
    let denom = a * p_data + p_g;
    if denom == 0.0 {
        return Err(Error::Numeric(
            "undefined optimum: a * p_data + p_G = 0 means the token is never seen".into(),
        ));
    }
    Ok(p_data * (a + p_g) / denom)
}

/// Inverts [`optimal_discriminator`]: recovers the data probability a
/// detector value implies, `p_data = D p_g / (a (1 - D) + p_g)`.
pub fn invert_discriminator(d: f64, p_g: f64, p_mask: f64) -> Result<f64> {
    unit_interval("D", d)?;
    unit_interval("p_G", p_g)?;
    let a = mask_ratio(p_mask)?;
    let denom = a * (1.0 - d) + p_g;
    if denom == 0.0 {
        return Err(Error::Numeric(
            "cannot invert: a (1 - D) + p_G = 0 pins no data probability".into(),
        ));
    }
    Ok(d * p_g / denom)
}

/// Candidate ids ordered by generator probability, descending, ties to the
/// lowest id; at most `top` of them.
fn top_candidates(p_g: &[f64], top: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p_g.len()).collect();
    order.sort_by(|&i, &j| p_g[j].total_cmp(&p_g[i]).then(i.cmp(&j)));
    order.truncate(top.min(p_g.len()));
    order
}

/// Predicts a masked token from per-candidate generator probabilities and
/// detector values: the candidate maximizing the inverted data-probability
/// estimate among the `top` most likely generator candidates. Ties break
/// to the lowest id.
pub fn combined_prediction(p_g: &[f64], d: &[f64], p_mask: f64, top: usize) -> Result<u32> {
    if p_g.len() != d.len() || p_g.is_empty() {
        return Err(Error::Shape(format!(
            "{} generator probabilities against {} detector values",
            p_g.len(),
            d.len()
        )));
    }
    if top == 0 {
        return Err(Error::Config("candidate budget must be positive".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    for &cand in &top_candidates(p_g, top) {
        let score = invert_discriminator(d[cand], p_g[cand], p_mask)?;
        let better = match best {
            None => true,
            Some((s, id)) => score > s || (score == s && cand < id),
        };
        if better {
            best = Some((score, cand));
        }
    }
    Ok(best.expect("nonempty candidate set").1 as u32)
}

/// Number of generator candidates the combined predictor rescores.
pub const PREDICT_TOP: usize = 100;

/// Masked-LM prediction through the trained detector: the generator
/// proposes its top candidates for the single masked position of
/// `context`, the discriminator scores each completed sequence, and the
/// candidate with the best inverted data-probability estimate wins.
pub fn electra_mlm_predict(
    params: &ModelParams,
    context: &TokenBatch,
    p_mask: f64,
) -> Result<u32> {
    let mut found = None;
    for ((i, t), &id) in context.ids.indexed_iter() {
        if id == MASK {
            if found.is_some() {
                return Err(Error::Shape(
                    "combined prediction needs exactly one masked position, found several".into(),
                ));
            }
            found = Some((i, t));
        }
    }
    let (i, t) = found.ok_or_else(|| {
        Error::Shape("combined prediction needs exactly one masked position, found none".into())
    })?;
    let n = context.seq_len();
    let v = params.config.vocab;
    let hidden = encoder_forward(params, TowerKind::Generator, &context.ids)?;
    let probs = generator_probs(params, &hidden, &[i * n + t]);
    let p_g = probs.row(0).as_slice().expect("contiguous row").to_vec();

    let candidates = top_candidates(&p_g, PREDICT_TOP);
    let mut completions = Array2::zeros((candidates.len(), n));
    for (r, &cand) in candidates.iter().enumerate() {
        completions.row_mut(r).assign(&context.ids.row(i));
        completions[[r, t]] = cand as u32;
    }
    let d_hidden = encoder_forward(params, TowerKind::Discriminator, &completions)?;
    let d_probs = discriminator_probs(params, &d_hidden);
    // Detector values land in a dense per-id table; only candidate entries
    // are ever read back by the scorer, which selects the same candidates.
    let mut d = vec![0.5; v];
    for (r, &cand) in candidates.iter().enumerate() {
        d[cand] = d_probs[[r, t]];
    }
    combined_prediction(&p_g, &d, p_mask, PREDICT_TOP)
}

/// A labeled binary sequence-classification dataset with a train/test
/// split. Labels are `true` for the positive class; the two classes are
/// exactly balanced by construction.
#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub train_ids: Array2<u32>,
    pub train_labels: Vec<bool>,
    pub test_ids: Array2<u32>,
    pub test_labels: Vec<bool>,
    /// Train only the linear head, leaving the encoder untouched.
    pub frozen_encoder: bool,
}

/// Builds the two-regime discrimination task: sequences sampled from one
/// of two Markov chains (the regimes of `spec`), labeled by which chain
/// produced them. Regime 1 is the time-reversal of regime 0, so both share
/// one stationary distribution: unigram counts are uninformative and only
/// transition structure separates the classes.
pub fn two_regime_probe_task(
    spec: &TwoRegimeSpec,
    vocab: &Vocab,
    per_class_train: usize,
    per_class_test: usize,
    seq_len: usize,
    frozen_encoder: bool,
    seed: u64,
) -> Result<ProbeTask> {
    if per_class_train == 0 || per_class_test == 0 {
        return Err(Error::Config("probe task needs sequences in both splits".into()));
    }
    if seq_len < 2 {
        return Err(Error::Config("probe sequences need at least 2 tokens".into()));
    }
    let total = per_class_train + per_class_test;
    let mut train: Vec<(Vec<u32>, bool)> = Vec::with_capacity(2 * per_class_train);
    let mut test: Vec<(Vec<u32>, bool)> = Vec::with_capacity(2 * per_class_test);
    for regime in 0..2usize {
        let matrix = regime_matrix(spec, regime);
        let mut r = rng::stream(seed, regime as u64, Purpose::Probe);
        for row in 0..total {
            let symbols = sample_chain(&matrix, MarkovOrder::One, spec.vocab_size, seq_len, &mut r);
            let ids: Vec<u32> = symbols
                .iter()
                .map(|&sym| vocab.id(&symbol_token(sym, spec.vocab_size)).unwrap_or(UNK))
                .collect();
            if row < per_class_train {
                train.push((ids, regime == 1));
            } else {
                test.push((ids, regime == 1));
            }
        }
    }
    for (t, _) in &test {
        if train.iter().any(|(row, _)| row == t) {
            return Err(Error::Corpus(
                "probe splits overlap: a test sequence also appears in training".into(),
            ));
        }
    }
    let to_matrix = |rows: &[(Vec<u32>, bool)]| {
        Array2::from_shape_fn((rows.len(), seq_len), |(i, j)| rows[i].0[j])
    };
    Ok(ProbeTask {
        train_ids: to_matrix(&train),
        train_labels: train.iter().map(|(_, l)| *l).collect(),
        test_ids: to_matrix(&test),
        test_labels: test.iter().map(|(_, l)| *l).collect(),
        frozen_encoder,
    })
}

/// Mean over positions of each sequence's final hidden states, forwarded
/// in bounded row chunks: `[rows, H_tower]`.
fn pooled_features(
    params: &ModelParams,
    tower: TowerKind,
    ids: &Array2<u32>,
) -> Result<Array2<f64>> {
    let (rows, n) = ids.dim();
    let h = params.config.tower(tower).hidden;
    let mut feats = Array2::zeros((rows, h));
    let chunk = 64;
    for start in (0..rows).step_by(chunk) {
        let end = (start + chunk).min(rows);
        let block = ids.slice(s![start..end, ..]).to_owned();
        let cache = forward_cached(params, tower, &block)?;
        for r in 0..(end - start) {
            for t in 0..n {
                for k in 0..h {
                    feats[[start + r, k]] += cache.hidden[[r * n + t, k]] / n as f64;
                }
            }
        }
    }
    Ok(feats)
}

/// Adam over the probe head's weight vector and bias, with the crate's
/// default betas and epsilon and a constant probe-local learning rate.
struct HeadState {
    w: Vec<f64>,
    b: f64,
    mw: Vec<f64>,
    vw: Vec<f64>,
    mb: f64,
    vb: f64,
    t: u64,
}

const PROBE_HEAD_LR: f64 = 0.02;

impl HeadState {
    /// Small random weights rather than zeros: the fine-tuning path routes
    /// every encoder gradient through `w`, so an all-zero head would block
    /// gradient flow entirely until the head itself drifts away from zero.
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> HeadState {
        HeadState {
            w: (0..dim).map(|_| 0.05 * rng::truncated_normal(rng, 2.0)).collect(),
            b: 0.0,
            mw: vec![0.0; dim],
            vw: vec![0.0; dim],
            mb: 0.0,
            vb: 0.0,
            t: 0,
        }
    }

    fn logit(&self, feat: &[f64]) -> f64 {
        self.b + self.w.iter().zip(feat).map(|(w, f)| w * f).sum::<f64>()
    }

    fn step(&mut self, gw: &[f64], gb: f64) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-6);
        self.t += 1;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for k in 0..self.w.len() {
            self.mw[k] = b1 * self.mw[k] + (1.0 - b1) * gw[k];
            self.vw[k] = b2 * self.vw[k] + (1.0 - b2) * gw[k] * gw[k];
            self.w[k] -= PROBE_HEAD_LR * (self.mw[k] / bc1) / ((self.vw[k] / bc2).sqrt() + eps);
        }
        self.mb = b1 * self.mb + (1.0 - b1) * gb;
        self.vb = b2 * self.vb + (1.0 - b2) * gb * gb;
        self.b -= PROBE_HEAD_LR * (self.mb / bc1) / ((self.vb / bc2).sqrt() + eps);
    }
}

fn head_accuracy(feats: &Array2<f64>, labels: &[bool], head: &HeadState) -> f64 {
    let hits = feats
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(f, &y)| (head.logit(f.as_slice().expect("contiguous row")) > 0.0) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Parameters the probe may fine-tune: the probed tower's input projection
/// and blocks, plus the shared embeddings. Score heads and the other tower
/// stay untouched.
fn probe_trainable(params: &ModelParams, tower: TowerKind) -> Vec<bool> {
    let count = params.store.iter().count();
    let mut allowed = vec![false; count];
    let mut ids: Vec<ParamId> = vec![params.layout.token_emb, params.layout.pos_emb];
    let tw = params.tower_ids(tower);
    let push_linear = |ids: &mut Vec<ParamId>, l: LinearIds| {
        ids.push(l.w);
        ids.push(l.b);
    };
    push_linear(&mut ids, tw.input_proj);
    for b in &tw.blocks {
        for l in [b.wq, b.wk, b.wv, b.wo, b.ffn_in, b.ffn_out] {
            push_linear(&mut ids, l);
        }
        ids.extend([b.ln1.gain, b.ln1.bias, b.ln2.gain, b.ln2.bias]);
    }
    for id in ids {
        allowed[id.0] = true;
    }
    allowed
}

/// Accuracy of the trained probe on both splits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOutcome {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

const PROBE_BATCH: usize = 32;

/// Trains a linear classifier on mean-pooled hidden states of the given
/// tower: binary cross-entropy, Adam, `epochs` passes over shuffled
/// minibatches. With `frozen_encoder` only the head trains; otherwise the
/// probed tower and the shared embeddings fine-tune alongside it (on a
/// clone, the caller's parameters are never mutated). Deterministic given
/// the seed.
pub fn downstream_probe(
    params: &ModelParams,
    tower: TowerKind,
    task: &ProbeTask,
    epochs: usize,
    seed: u64,
) -> Result<ProbeOutcome> {
    let rows = task.train_ids.nrows();
    if rows == 0 || task.test_ids.nrows() == 0 {
        return Err(Error::Shape("probe task has an empty split".into()));
    }
    if task.train_labels.len() != rows || task.test_labels.len() != task.test_ids.nrows() {
        return Err(Error::Shape("probe labels do not align with sequences".into()));
    }
    let n = task.train_ids.ncols();
    let h = params.config.tower(tower).hidden;
    let mut head = HeadState::new(h, &mut rng::stream(seed, u64::MAX, Purpose::Probe));

    if task.frozen_encoder {
        let feats = pooled_features(params, tower, &task.train_ids)?;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..rows).collect();
            let mut r = rng::stream(seed, epoch as u64, Purpose::Probe);
            rng::shuffle(&mut r, &mut order);
            for chunk in order.chunks(PROBE_BATCH.min(rows)) {
                let mut gw = vec![0.0; h];
                let mut gb = 0.0;
                for &row in chunk {
                    let f = feats.row(row);
                    let y = if task.train_labels[row] { 1.0 } else { 0.0 };
                    let dz = (sigmoid(head.logit(f.as_slice().expect("row"))) - y)
                        / chunk.len() as f64;
                    for k in 0..h {
                        gw[k] += dz * f[k];
                    }
                    gb += dz;
                }
                head.step(&gw, gb);
            }
        }
        let test_feats = pooled_features(params, tower, &task.test_ids)?;
        return Ok(ProbeOutcome {
            train_accuracy: head_accuracy(&feats, &task.train_labels, &head),
            test_accuracy: head_accuracy(&test_feats, &task.test_labels, &head),
        });
    }

    // Fine-tuning path: the encoder clone trains with the standard
    // optimizer at a constant rate (warmup 0, no decay horizon). The probe
    // gradient reaches the encoder only through the 1-dimensional head, so
    // it starts orders of magnitude smaller than pre-training gradients; a
    // tighter epsilon keeps Adam's per-parameter normalization effective at
    // that scale instead of flattening the updates.
    let mut local = params.clone();
    let allowed = probe_trainable(&local, tower);
    let hp = OptimizerHp { warmup: 0, total: 0, eps: 1e-8, ..OptimizerHp::default() };
    let mut opt = OptimizerState::new(&local, hp);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..rows).collect();
        let mut r = rng::stream(seed, epoch as u64, Purpose::Probe);
        rng::shuffle(&mut r, &mut order);
        for chunk in order.chunks(PROBE_BATCH.min(rows)) {
            let mut ids = Array2::zeros((chunk.len(), n));
            for (r_i, &row) in chunk.iter().enumerate() {
                ids.row_mut(r_i).assign(&task.train_ids.row(row));
            }
            let cache = forward_cached(&local, tower, &ids)?;
            let mut gw = vec![0.0; h];
            let mut gb = 0.0;
            let mut d_hidden = Array2::zeros(cache.hidden.dim());
            for (r_i, &row) in chunk.iter().enumerate() {
                let mut feat = vec![0.0; h];
                for t in 0..n {
                    for k in 0..h {
                        feat[k] += cache.hidden[[r_i * n + t, k]] / n as f64;
                    }
                }
                let y = if task.train_labels[row] { 1.0 } else { 0.0 };
                let dz = (sigmoid(head.logit(&feat)) - y) / chunk.len() as f64;
                for k in 0..h {
                    gw[k] += dz * feat[k];
                    for t in 0..n {
                        d_hidden[[r_i * n + t, k]] = dz * head.w[k] / n as f64;
                    }
                }
                gb += dz;
            }
            let mut grads = GradStore::zeros_like(&local.store);
            tower_backward(&local, &cache, &d_hidden, &mut grads);
            optimizer_step_filtered(&mut local, &grads, &mut opt, |id, _| allowed[id.0])?;
            head.step(&gw, gb);
        }
    }
    let feats = pooled_features(&local, tower, &task.train_ids)?;
    let test_feats = pooled_features(&local, tower, &task.test_ids)?;
    Ok(ProbeOutcome {
        train_accuracy: head_accuracy(&feats, &task.train_labels, &head),
        test_accuracy: head_accuracy(&test_feats, &task.test_labels, &head),
    })
}

/// One evaluation result, tagged by the checkpoint step it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Evaluation CSV with a metric-name column: `step,metric,value`.
pub fn render_eval_csv(rows: &[EvalRow]) -> String {
    use std::fmt::Write;
    let mut out = String::from("step,metric,value\n");
    for row in rows {
        writeln!(out, "{},{},{:.5e}", row.step, row.metric, row.value).expect("string write");
    }
    out
}
