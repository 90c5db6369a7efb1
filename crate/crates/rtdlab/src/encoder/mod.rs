//! Transformer encoder pair with tied token embeddings.
//!
//! One [`ModelParams`] owns both towers. Token and position embeddings have
//! exactly one storage location and are shared; each tower projects the
//! `E`-sized embeddings into its own hidden width, runs `L` post-layer-norm
//! blocks (multi-head self-attention, then a GELU FFN, residuals around
//! both), and exposes heads on top: a tied-softmax MLM head per tower, a
//! sigmoid score head, a copy head, and a baseline head.
//!
//! Everything is differentiated by hand in `f64`. Forward passes record the
//! activations a backward pass needs ([`forward::TowerCache`]); backward
//! passes accumulate into a [`GradStore`] aligned index-for-index with the
//! parameter store, so a parameter a loss never touches keeps an exactly
//! zero gradient.

pub mod backward;
pub mod forward;

use ndarray::Array2;

use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Epsilon inside layer-norm denominators.
pub(crate) const LN_EPS: f64 = 1e-12;

/// Model shape. `hidden`, `ffn`, and `heads` describe the discriminator
/// tower; the generator tower is derived by [`derive_generator_config`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub embed: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Generator multiplier g ∈ (0, 1].
    pub gen_mult: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.ffn == 0 || self.heads == 0
            || self.embed == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab == 0 {
            return Err(Error::Config("vocab size must be positive".into()));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max sequence length must be at least 2".into()));
        }
        if !(self.gen_mult > 0.0 && self.gen_mult <= 1.0) {
            return Err(Error::Config(format!(
                "generator multiplier {} outside (0, 1]",
                self.gen_mult
            )));
        }
        Ok(())
    }

    pub fn generator(&self) -> TowerConfig {
        derive_generator_config(self, self.gen_mult)
    }

    pub fn discriminator(&self) -> TowerConfig {
        TowerConfig {
            layers: self.layers,
            hidden: self.hidden,
            ffn: self.ffn,
            heads: self.heads,
        }
    }

    pub fn tower(&self, kind: TowerKind) -> TowerConfig {
        match kind {
            TowerKind::Generator => self.generator(),
            TowerKind::Discriminator => self.discriminator(),
        }
    }
}

/// Dimensions of one tower. Embedding size and layer count always match the
/// top-level config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TowerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
}

impl TowerConfig {
    pub fn head_size(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Scales hidden/FFN/heads by `g` (rounded, minimum 1); layer count and
/// embedding size stay untouched. When rounding leaves the hidden size
/// indivisible by the head count, the head count is clamped to the hidden
/// size and the hidden size rounded down to a multiple, so derived towers
/// are always valid.
pub fn derive_generator_config(cfg: &ModelConfig, g: f64) -> TowerConfig {
    let round1 = |x: usize| ((g * x as f64).round() as usize).max(1);
    let mut hidden = round1(cfg.hidden);
    let mut heads = round1(cfg.heads);
    if heads > hidden {
        heads = hidden;
    }
    hidden -= hidden % heads;
    TowerConfig {
        layers: cfg.layers,
        hidden,
        ffn: round1(cfg.ffn),
        heads,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerKind {
    Generator,
    Discriminator,
}

/// Who a parameter belongs to. The stop-gradient rule is stated over this:
/// the discriminator loss must produce bitwise-zero gradients for every
/// `Generator` parameter, while `Shared` embeddings collect gradients from
/// both towers' own forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Shared,
    Generator,
    Discriminator,
}

/// What a tensor is, which fixes both its initialization and whether
/// decoupled weight decay applies to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix or embedding table: truncated-normal init, decayed.
    Weight,
    /// Bias vector: zero init, not decayed.
    Bias,
    /// Layer-norm gain: ones init, not decayed.
    Gain,
}

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub owner: Owner,
    pub kind: ParamKind,
}

impl ParamMeta {
    /// Decoupled weight decay applies to weight matrices and embeddings,
    /// never to biases or layer-norm parameters.
    pub fn decay(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// Index of one tensor in the parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat, named tensor storage. Every parameter is an `Array2`; vectors are
/// single-row matrices. The typed [`Layout`] holds ids into this store.
#[derive(Debug, Clone)]
pub struct ParamStore {
    tensors: Vec<Array2<f64>>,
    metas: Vec<ParamMeta>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.metas[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamMeta, &Array2<f64>)> {
        self.tensors
            .iter()
            .zip(&self.metas)
            .enumerate()
            .map(|(i, (t, m))| (ParamId(i), m, t))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.metas.iter().position(|m| m.name == name).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Per-parameter gradient (or moment) accumulators, aligned with a store.
#[derive(Debug, Clone)]
pub struct GradStore {
    pub tensors: Vec<Array2<f64>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> GradStore {
        GradStore {
            tensors: store.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    pub fn tensor(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &GradStore, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.zip_mut_with(b, |x, &y| *x += scale * y);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub wq: LinearIds,
    pub wk: LinearIds,
    pub wv: LinearIds,
    pub wo: LinearIds,
    pub ln1: NormIds,
    pub ffn_in: LinearIds,
    pub ffn_out: LinearIds,
    pub ln2: NormIds,
}

#[derive(Debug, Clone)]
pub struct TowerIds {
    /// E → H_tower, applied right after the embedding sum.
    pub input_proj: LinearIds,
    pub blocks: Vec<BlockIds>,
    /// H_tower → E, the MLM head projection feeding the tied softmax.
    pub out_proj: LinearIds,
}

/// Typed map of every tensor in the model.
#[derive(Debug, Clone)]
pub struct Layout {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub gen: TowerIds,
    pub disc: TowerIds,
    /// Sigmoid score head over discriminator states: real-vs-fake.
    pub disc_score: ParamId,
    /// Sigmoid copy head over discriminator states (all-tokens variant).
    pub copy_score: ParamId,
    /// Sigmoid baseline head over generator states (adversarial training).
    pub baseline: ParamId,
}

/// The full model: config, typed layout, and the flat tensor store.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub store: ParamStore,
}

struct Builder {
    store: ParamStore,
    rng: rand_chacha::ChaCha8Rng,
}

impl Builder {
    fn tensor(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        kind: ParamKind,
        owner: Owner,
    ) -> ParamId {
        let data = match kind {
            ParamKind::Weight => Array2::from_shape_simple_fn((rows, cols), || {
                rng::truncated_normal(&mut self.rng, 0.02)
            }),
            ParamKind::Bias => Array2::zeros((rows, cols)),
            ParamKind::Gain => Array2::ones((rows, cols)),
        };
        self.store.tensors.push(data);
        self.store.metas.push(ParamMeta { name, owner, kind });
        ParamId(self.store.tensors.len() - 1)
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize, owner: Owner) -> LinearIds {
        LinearIds {
            w: self.tensor(format!("{name}.w"), rows, cols, ParamKind::Weight, owner),
            b: self.tensor(format!("{name}.b"), 1, cols, ParamKind::Bias, owner),
        }
    }

    fn norm(&mut self, name: &str, width: usize, owner: Owner) -> NormIds {
        NormIds {
            gain: self.tensor(format!("{name}.gain"), 1, width, ParamKind::Gain, owner),
            bias: self.tensor(format!("{name}.bias"), 1, width, ParamKind::Bias, owner),
        }
    }

    fn tower(&mut self, prefix: &str, embed: usize, tc: &TowerConfig, owner: Owner) -> TowerIds {
        let input_proj = self.linear(&format!("{prefix}.input_proj"), embed, tc.hidden, owner);
        let blocks = (0..tc.layers)
            .map(|l| {
                let p = format!("{prefix}.block{l}");
                BlockIds {
                    wq: self.linear(&format!("{p}.attn.q"), tc.hidden, tc.hidden, owner),
                    wk: self.linear(&format!("{p}.attn.k"), tc.hidden, tc.hidden, owner),
                    wv: self.linear(&format!("{p}.attn.v"), tc.hidden, tc.hidden, owner),
                    wo: self.linear(&format!("{p}.attn.o"), tc.hidden, tc.hidden, owner),
                    ln1: self.norm(&format!("{p}.ln1"), tc.hidden, owner),
                    ffn_in: self.linear(&format!("{p}.ffn.in"), tc.hidden, tc.ffn, owner),
                    ffn_out: self.linear(&format!("{p}.ffn.out"), tc.ffn, tc.hidden, owner),
                    ln2: self.norm(&format!("{p}.ln2"), tc.hidden, owner),
                }
            })
            .collect();
        let out_proj = self.linear(&format!("{prefix}.out_proj"), tc.hidden, embed, owner);
        TowerIds { input_proj, blocks, out_proj }
    }
}

/// Builds and initializes all parameters: weights from a truncated normal
/// (sd 0.02, cut at 2 sd), biases zero, layer-norm gains one. Deterministic
/// given the seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut b = Builder {
        store: ParamStore { tensors: Vec::new(), metas: Vec::new() },
        rng: rng::stream(seed, 0, Purpose::Init),
    };
    let token_emb = b.tensor(
        "emb.token".into(),
        config.vocab,
        config.embed,
        ParamKind::Weight,
        Owner::Shared,
    );
    let pos_emb = b.tensor(
        "emb.pos".into(),
        config.max_seq,
        config.embed,
        ParamKind::Weight,
        Owner::Shared,
    );
    let gen_cfg = config.generator();
    let disc_cfg = config.discriminator();
    let gen = b.tower("gen", config.embed, &gen_cfg, Owner::Generator);
    let disc = b.tower("disc", config.embed, &disc_cfg, Owner::Discriminator);
    let disc_score = b.tensor(
        "disc.score".into(),
        1,
        disc_cfg.hidden,
        ParamKind::Weight,
        Owner::Discriminator,
    );
    let copy_score = b.tensor(
        "disc.copy".into(),
        1,
        disc_cfg.hidden,
        ParamKind::Weight,
        Owner::Discriminator,
    );
    let baseline = b.tensor(
        "gen.baseline".into(),
        1,
        gen_cfg.hidden,
        ParamKind::Weight,
        Owner::Generator,
    );
    Ok(ModelParams {
        config: *config,
        layout: Layout { token_emb, pos_emb, gen, disc, disc_score, copy_score, baseline },
        store: b.store,
    })
}

/// Re-draws every parameter at a larger scale: weights from a truncated
/// normal with standard deviation `weight_sd`, biases at a tenth of that,
/// layer-norm gains centered on 1. The default initialization leaves
/// pre-norm activations nearly constant across a row, which makes layer
/// norm ill-conditioned and finite differences unreliable; gradient probes
/// call this first to put the model in a well-conditioned region.
pub fn randomize_params(params: &mut ModelParams, seed: u64, weight_sd: f64) {
    let mut r = rng::stream(seed, 1, Purpose::Init);
    for i in 0..params.store.len() {
        let id = ParamId(i);
        let kind = params.store.meta(id).kind;
        let t = params.store.tensor_mut(id);
        match kind {
            ParamKind::Weight => {
                t.mapv_inplace(|_| rng::truncated_normal(&mut r, weight_sd));
            }
            ParamKind::Bias => {
                t.mapv_inplace(|_| rng::truncated_normal(&mut r, weight_sd * 0.1));
            }
            ParamKind::Gain => {
                t.mapv_inplace(|_| 1.0 + rng::truncated_normal(&mut r, weight_sd * 0.1));
            }
        }
    }
}

impl ModelParams {
    pub fn tower_ids(&self, kind: TowerKind) -> &TowerIds {
        match kind {
            TowerKind::Generator => &self.layout.gen,
            TowerKind::Discriminator => &self.layout.disc,
        }
    }
}

/// Final hidden states of one tower, flattened to `[batch*n, H_tower]` with
/// row `i*n + t` holding position `t` of sequence `i`.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    pub data: Array2<f64>,
    pub batch: usize,
    pub n: usize,
}

/// Runs one tower over a batch of ids. See [`forward::forward_cached`] for
/// the variant that keeps activations for a backward pass.
pub fn encoder_forward(
    params: &ModelParams,
    tower: TowerKind,
    ids: &Array2<u32>,
) -> Result<HiddenStates> {
    let cache = forward::forward_cached(params, tower, ids)?;
    Ok(HiddenStates {
        data: cache.hidden,
        batch: cache.batch,
        n: cache.n,
    })
}

/// Tied-softmax distribution over the vocabulary at the given flat row
/// indices (`i*n + t`) of the generator's hidden states. Rows sum to 1.
pub fn generator_probs(
    params: &ModelParams,
    hidden: &HiddenStates,
    rows: &[usize],
) -> Array2<f64> {
    let logits = forward::mlm_logits(params, TowerKind::Generator, &hidden.data, rows);
    forward::softmax_rows(&logits)
}

/// Per-position probability that the token is real: `sigmoid(w·h_D)`,
/// shaped `[batch, n]`.
pub fn discriminator_probs(params: &ModelParams, hidden: &HiddenStates) -> Array2<f64> {
    let scores = forward::score_head(params, params.layout.disc_score, &hidden.data);
    let flat: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
    Array2::from_shape_vec((hidden.batch, hidden.n), flat).expect("shape bn")
}

/// Numerically stable sigmoid, clamped to the open interval (0, 1): for
/// inputs so large that the true value rounds to 0.0 or 1.0 in f64, the
/// nearest representable interior value is returned instead. Losses never
/// take logs of these outputs (they work on raw scores), so the clamp only
/// protects downstream consumers.
pub(crate) fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `ln(1 + e^x)` without overflow; `-log_sigmoid(x) = softplus(-x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
