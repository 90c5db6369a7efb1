//! Forward passes that record every activation the backward pass needs.
//!
//! Hidden states are kept flat: a batch of `b` sequences of length `n`
//! becomes a `[b*n, H]` matrix whose row `i*n + t` is position `t` of
//! sequence `i`. Attention runs per sequence and head on slices of that
//! matrix, and the per-head probability matrices stay inspectable on the
//! cache.

use ndarray::{s, Array2};

use super::{ModelParams, ParamId, TowerKind, LN_EPS};
use crate::{Error, Result};

/// tanh-approximation GELU constants.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// Per-row layer-norm activations: the normalized input and each row's
/// `1/sqrt(var + eps)`.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

/// Everything one block's backward pass reads.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x_in: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Attention probabilities, one `[n, n]` matrix per (sequence, head),
    /// indexed `seq * heads + head`.
    pub probs: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
    pub sum1: Array2<f64>,
    pub ln1: NormCache,
    pub x_mid: Array2<f64>,
    pub ffn_pre: Array2<f64>,
    pub tanh_u: Array2<f64>,
    pub ffn_act: Array2<f64>,
    pub sum2: Array2<f64>,
    pub ln2: NormCache,
}

/// One tower's full forward trace.
#[derive(Debug, Clone)]
pub struct TowerCache {
    pub kind: TowerKind,
    pub ids: Array2<u32>,
    pub x_emb: Array2<f64>,
    pub blocks: Vec<BlockCache>,
    pub hidden: Array2<f64>,
    pub batch: usize,
    pub n: usize,
}

impl TowerCache {
    /// Attention probabilities for one (layer, sequence, head); rows are
    /// query positions and sum to 1.
    pub fn attention_probs(&self, layer: usize, seq: usize, head: usize) -> &Array2<f64> {
        let heads = self.blocks[layer].probs.len() / self.batch;
        &self.blocks[layer].probs[seq * heads + head]
    }
}

/// `x·W + b` with the bias row added to every output row.
pub(crate) fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    let brow = b.row(0);
    for mut row in y.rows_mut() {
        row += &brow;
    }
    y
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array2<f64>,
    bias: &Array2<f64>,
) -> (Array2<f64>, NormCache) {
    let (rows, cols) = x.dim();
    let mut xhat = Array2::zeros((rows, cols));
    let mut out = Array2::zeros((rows, cols));
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.sum() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..cols {
            let xh = (x[[i, j]] - mean) * is;
            xhat[[i, j]] = xh;
            out[[i, j]] = xh * gain[[0, j]] + bias[[0, j]];
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// tanh-approximation GELU; returns the activation and the cached tanh
/// values the derivative reuses.
pub(crate) fn gelu(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut act = Array2::zeros(x.dim());
    let mut tanh_u = Array2::zeros(x.dim());
    for ((a, t), &v) in act.iter_mut().zip(tanh_u.iter_mut()).zip(x.iter()) {
        let u = GELU_C * (v + GELU_CUBIC * v * v * v);
        let th = u.tanh();
        *t = th;
        *a = 0.5 * v * (1.0 + th);
    }
    (act, tanh_u)
}

fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    batch: usize,
    n: usize,
    heads: usize,
    head_size: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let alpha = 1.0 / (head_size as f64).sqrt();
    let mut concat = Array2::zeros((batch * n, heads * head_size));
    let mut probs = Vec::with_capacity(batch * heads);
    for bi in 0..batch {
        let r0 = bi * n;
        for h in 0..heads {
            let c0 = h * head_size;
            let qs = q.slice(s![r0..r0 + n, c0..c0 + head_size]);
            let ks = k.slice(s![r0..r0 + n, c0..c0 + head_size]);
            let vs = v.slice(s![r0..r0 + n, c0..c0 + head_size]);
            let mut scores = qs.dot(&ks.t());
            scores *= alpha;
            let p = softmax_rows(&scores);
            let ctx = p.dot(&vs);
            concat
                .slice_mut(s![r0..r0 + n, c0..c0 + head_size])
                .assign(&ctx);
            probs.push(p);
        }
    }
    (concat, probs)
}

/// Embedding sum, input projection, then `L` post-layer-norm blocks.
pub fn forward_cached(
    params: &ModelParams,
    kind: TowerKind,
    ids: &Array2<u32>,
) -> Result<TowerCache> {
    let cfg = &params.config;
    let tc = cfg.tower(kind);
    let (batch, n) = ids.dim();
    if batch == 0 || n == 0 {
        return Err(Error::Shape("empty id batch".into()));
    }
    if n > cfg.max_seq {
        return Err(Error::Shape(format!(
            "sequence length {n} exceeds configured maximum {}",
            cfg.max_seq
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab) {
        return Err(Error::Shape(format!(
            "token id {bad} outside vocab of size {}",
            cfg.vocab
        )));
    }

    let emb = params.store.tensor(params.layout.token_emb);
    let pos = params.store.tensor(params.layout.pos_emb);
    let mut x_emb = Array2::zeros((batch * n, cfg.embed));
    for i in 0..batch {
        for t in 0..n {
            let r = i * n + t;
            let e = emb.row(ids[[i, t]] as usize);
            let p = pos.row(t);
            for j in 0..cfg.embed {
                x_emb[[r, j]] = e[j] + p[j];
            }
        }
    }

    let tw = params.tower_ids(kind);
    let st = &params.store;
    let mut cur = linear(&x_emb, st.tensor(tw.input_proj.w), st.tensor(tw.input_proj.b));
    let mut blocks = Vec::with_capacity(tc.layers);
    for bids in &tw.blocks {
        let q = linear(&cur, st.tensor(bids.wq.w), st.tensor(bids.wq.b));
        let k = linear(&cur, st.tensor(bids.wk.w), st.tensor(bids.wk.b));
        let v = linear(&cur, st.tensor(bids.wv.w), st.tensor(bids.wv.b));
        let (concat, probs) = attention(&q, &k, &v, batch, n, tc.heads, tc.head_size());
        let attn_out = linear(&concat, st.tensor(bids.wo.w), st.tensor(bids.wo.b));
        let sum1 = &cur + &attn_out;
        let (x_mid, ln1) = layer_norm(&sum1, st.tensor(bids.ln1.gain), st.tensor(bids.ln1.bias));
        let ffn_pre = linear(&x_mid, st.tensor(bids.ffn_in.w), st.tensor(bids.ffn_in.b));
        let (ffn_act, tanh_u) = gelu(&ffn_pre);
        let ffn_out = linear(&ffn_act, st.tensor(bids.ffn_out.w), st.tensor(bids.ffn_out.b));
        let sum2 = &x_mid + &ffn_out;
        let (out, ln2) = layer_norm(&sum2, st.tensor(bids.ln2.gain), st.tensor(bids.ln2.bias));
        let x_in = std::mem::replace(&mut cur, out);
        blocks.push(BlockCache {
            x_in,
            q,
            k,
            v,
            probs,
            concat,
            sum1,
            ln1,
            x_mid,
            ffn_pre,
            tanh_u,
            ffn_act,
            sum2,
            ln2,
        });
    }
    Ok(TowerCache {
        kind,
        ids: ids.clone(),
        x_emb,
        blocks,
        hidden: cur,
        batch,
        n,
    })
}

/// Tied-softmax MLM head activations at selected flat rows.
#[derive(Debug, Clone)]
pub struct MlmHeadCache {
    pub rows: Vec<usize>,
    pub h_rows: Array2<f64>,
    /// Output-projection result, `[k, E]`.
    pub u: Array2<f64>,
}

/// Logits `u·eᵀ` of the tied softmax at the given flat rows of `hidden`,
/// where `u` is the tower's output projection of those rows.
pub(crate) fn mlm_logits_cached(
    params: &ModelParams,
    kind: TowerKind,
    hidden: &Array2<f64>,
    rows: &[usize],
) -> (Array2<f64>, MlmHeadCache) {
    let tw = params.tower_ids(kind);
    let st = &params.store;
    let mut h_rows = Array2::zeros((rows.len(), hidden.ncols()));
    for (a, &r) in rows.iter().enumerate() {
        h_rows.row_mut(a).assign(&hidden.row(r));
    }
    let u = linear(&h_rows, st.tensor(tw.out_proj.w), st.tensor(tw.out_proj.b));
    let logits = u.dot(&st.tensor(params.layout.token_emb).t());
    (logits, MlmHeadCache { rows: rows.to_vec(), h_rows, u })
}

pub(crate) fn mlm_logits(
    params: &ModelParams,
    kind: TowerKind,
    hidden: &Array2<f64>,
    rows: &[usize],
) -> Array2<f64> {
    mlm_logits_cached(params, kind, hidden, rows).0
}

/// Raw scores `w·h` of a sigmoid head over every row of `hidden`.
pub(crate) fn score_head(
    params: &ModelParams,
    head: ParamId,
    hidden: &Array2<f64>,
) -> Vec<f64> {
    let w = params.store.tensor(head);
    let wrow = w.row(0);
    hidden.rows().into_iter().map(|r| r.dot(&wrow)).collect()
}
