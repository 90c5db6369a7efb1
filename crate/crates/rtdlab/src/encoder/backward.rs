//! Hand-written backward passes mirroring [`super::forward`].
//!
//! Each routine accumulates parameter gradients into a [`GradStore`] and
//! hands back the gradient with respect to its input, so callers chain them
//! in reverse composition order. Nothing here zeroes a buffer: a parameter
//! that no backward routine touches keeps an exactly zero gradient, which
//! is what the stop-gradient guarantees are stated over.

use ndarray::{s, Array2, Axis};

use super::forward::{BlockCache, MlmHeadCache, NormCache, TowerCache};
use super::{GradStore, LinearIds, ModelParams, NormIds, ParamId, ParamStore, TowerKind};

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// Backward of `y = x·W + b`: accumulates `dW += xᵀ·dy`, `db += Σ_rows dy`,
/// returns `dx = dy·Wᵀ`.
fn linear_backward(
    st: &ParamStore,
    ids: LinearIds,
    x: &Array2<f64>,
    dy: &Array2<f64>,
    grads: &mut GradStore,
) -> Array2<f64> {
    let dw = x.t().dot(dy);
    *grads.tensor_mut(ids.w) += &dw;
    let db = dy.sum_axis(Axis(0));
    let mut brow = grads.tensor_mut(ids.b).row_mut(0);
    brow += &db;
    dy.dot(&st.tensor(ids.w).t())
}

/// Backward of layer norm, using the cached normalized rows and inverse
/// standard deviations.
fn layer_norm_backward(
    st: &ParamStore,
    ids: NormIds,
    cache: &NormCache,
    dy: &Array2<f64>,
    grads: &mut GradStore,
) -> Array2<f64> {
    let gain = st.tensor(ids.gain);
    let (rows, cols) = dy.dim();
    let mut dx = Array2::zeros((rows, cols));
    for i in 0..rows {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..cols {
            let dyij = dy[[i, j]];
            grads.tensor_mut(ids.gain)[[0, j]] += dyij * cache.xhat[[i, j]];
            grads.tensor_mut(ids.bias)[[0, j]] += dyij;
            let dxh = dyij * gain[[0, j]];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * cache.xhat[[i, j]];
        }
        mean_dxhat /= cols as f64;
        mean_dxhat_xhat /= cols as f64;
        let is = cache.inv_std[i];
        for j in 0..cols {
            let dxh = dy[[i, j]] * gain[[0, j]];
            dx[[i, j]] = is * (dxh - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Derivative of the tanh-approximation GELU at `pre`, applied to `dact`.
fn gelu_backward(pre: &Array2<f64>, tanh_u: &Array2<f64>, dact: &Array2<f64>) -> Array2<f64> {
    let mut dpre = Array2::zeros(pre.dim());
    for ((d, (&x, &th)), &da) in dpre
        .iter_mut()
        .zip(pre.iter().zip(tanh_u.iter()))
        .zip(dact.iter())
    {
        let du_dx = GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x);
        let deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du_dx;
        *d = da * deriv;
    }
    dpre
}

/// Backward through scaled dot-product attention for every (sequence, head)
/// slice. Returns gradients for the packed q, k, v matrices.
fn attention_backward(
    block: &BlockCache,
    d_concat: &Array2<f64>,
    batch: usize,
    n: usize,
    heads: usize,
    head_size: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let alpha = 1.0 / (head_size as f64).sqrt();
    let width = heads * head_size;
    let mut dq = Array2::zeros((batch * n, width));
    let mut dk = Array2::zeros((batch * n, width));
    let mut dv = Array2::zeros((batch * n, width));
    for bi in 0..batch {
        let r0 = bi * n;
        for h in 0..heads {
            let c0 = h * head_size;
            let cr = s![r0..r0 + n, c0..c0 + head_size];
            let p = &block.probs[bi * heads + h];
            let dctx = d_concat.slice(cr);
            let qs = block.q.slice(cr);
            let ks = block.k.slice(cr);
            let vs = block.v.slice(cr);

            let dp = dctx.dot(&vs.t());
            dv.slice_mut(cr).assign(&p.t().dot(&dctx));

            let mut dscores = Array2::zeros((n, n));
            for i in 0..n {
                let inner: f64 = (0..n).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                for j in 0..n {
                    dscores[[i, j]] = alpha * p[[i, j]] * (dp[[i, j]] - inner);
                }
            }
            dq.slice_mut(cr).assign(&dscores.dot(&ks));
            dk.slice_mut(cr).assign(&dscores.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}

fn block_backward(
    params: &ModelParams,
    block_ids: &super::BlockIds,
    cache: &BlockCache,
    d_out: &Array2<f64>,
    batch: usize,
    n: usize,
    heads: usize,
    head_size: usize,
    grads: &mut GradStore,
) -> Array2<f64> {
    let st = &params.store;
    let d_sum2 = layer_norm_backward(st, block_ids.ln2, &cache.ln2, d_out, grads);
    let d_act = linear_backward(st, block_ids.ffn_out, &cache.ffn_act, &d_sum2, grads);
    let d_pre = gelu_backward(&cache.ffn_pre, &cache.tanh_u, &d_act);
    let mut d_x_mid = linear_backward(st, block_ids.ffn_in, &cache.x_mid, &d_pre, grads);
    d_x_mid += &d_sum2;
    let d_sum1 = layer_norm_backward(st, block_ids.ln1, &cache.ln1, &d_x_mid, grads);
    let d_concat = linear_backward(st, block_ids.wo, &cache.concat, &d_sum1, grads);
    let (dq, dk, dv) = attention_backward(cache, &d_concat, batch, n, heads, head_size);
    let mut d_x_in = linear_backward(st, block_ids.wq, &cache.x_in, &dq, grads);
    d_x_in += &linear_backward(st, block_ids.wk, &cache.x_in, &dk, grads);
    d_x_in += &linear_backward(st, block_ids.wv, &cache.x_in, &dv, grads);
    d_x_in += &d_sum1;
    d_x_in
}

/// Backward through one tower, from a gradient on its final hidden states
/// down into block weights, the input projection, and the shared token and
/// position embeddings.
pub fn tower_backward(
    params: &ModelParams,
    cache: &TowerCache,
    d_hidden: &Array2<f64>,
    grads: &mut GradStore,
) {
    let tc = params.config.tower(cache.kind);
    let tw = params.tower_ids(cache.kind);
    let mut d = d_hidden.clone();
    for (block_ids, block) in tw.blocks.iter().zip(&cache.blocks).rev() {
        d = block_backward(
            params,
            block_ids,
            block,
            &d,
            cache.batch,
            cache.n,
            tc.heads,
            tc.head_size(),
            grads,
        );
    }
    let d_emb = linear_backward(&params.store, tw.input_proj, &cache.x_emb, &d, grads);
    let d_tok = grads.tensor_mut(params.layout.token_emb);
    for i in 0..cache.batch {
        for t in 0..cache.n {
            let r = i * cache.n + t;
            let id = cache.ids[[i, t]] as usize;
            for j in 0..d_emb.ncols() {
                d_tok[[id, j]] += d_emb[[r, j]];
            }
        }
    }
    let d_pos = grads.tensor_mut(params.layout.pos_emb);
    for i in 0..cache.batch {
        for t in 0..cache.n {
            let r = i * cache.n + t;
            for j in 0..d_emb.ncols() {
                d_pos[[t, j]] += d_emb[[r, j]];
            }
        }
    }
}

/// Backward through the tied-softmax MLM head. Accumulates gradients for
/// the output projection and the shared token embeddings, and adds the
/// hidden-state gradient into `d_hidden` at the cached rows.
pub fn mlm_head_backward(
    params: &ModelParams,
    kind: TowerKind,
    head: &MlmHeadCache,
    dlogits: &Array2<f64>,
    d_hidden: &mut Array2<f64>,
    grads: &mut GradStore,
) {
    let tw = params.tower_ids(kind);
    let st = &params.store;
    let demb = dlogits.t().dot(&head.u);
    *grads.tensor_mut(params.layout.token_emb) += &demb;
    let du = dlogits.dot(st.tensor(params.layout.token_emb));
    let dh_rows = linear_backward(st, tw.out_proj, &head.h_rows, &du, grads);
    for (a, &r) in head.rows.iter().enumerate() {
        let mut row = d_hidden.row_mut(r);
        row += &dh_rows.row(a);
    }
}

/// Backward through a sigmoid score head's raw scores `s_r = w·h_r`.
/// `dscores[r]` is the loss gradient at each raw score.
pub fn score_head_backward(
    params: &ModelParams,
    head: ParamId,
    hidden: &Array2<f64>,
    dscores: &[f64],
    d_hidden: &mut Array2<f64>,
    grads: &mut GradStore,
) {
    let w = params.store.tensor(head);
    for (r, &ds) in dscores.iter().enumerate() {
        if ds == 0.0 {
            continue;
        }
        for j in 0..hidden.ncols() {
            grads.tensor_mut(head)[[0, j]] += ds * hidden[[r, j]];
            d_hidden[[r, j]] += ds * w[[0, j]];
        }
    }
}
