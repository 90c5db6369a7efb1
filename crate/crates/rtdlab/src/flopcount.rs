//! Closed-form FLOP accounting so every run can report compute and quality
//! can be plotted against it.
//!
//! Matrix products count `2·m·k·n` (no fused multiply-add); a dense
//! embedding lookup is priced as a one-hot matmul, `2·V·E` per token. The
//! elementwise constants live in one table below so alternate conventions
//! can re-derive totals; they are deliberately coarse, because matmuls are
//! asserted to dominate (at least 95% of the reference-config total).
//!
//! Bucket convention: `embedding`, `attention`, `ffn`, and `heads` hold
//! matmul FLOPs only, every other operation lands in `elementwise`, and the
//! matmul total is the sum of the four structural buckets. MLM heads are
//! priced over all `n` positions, not just masked ones, which keeps the
//! closed form independent of the mask fraction.

use crate::encoder::{ModelConfig, TowerConfig};
use crate::{Error, Result};

/// Softmax: exp, subtract-max, divide, plus two reduction passes.
pub const SOFTMAX_FLOPS_PER_ELEM: u64 = 5;
/// Attention score scaling by the inverse root of the head size.
pub const SCALE_FLOPS_PER_SCORE: u64 = 1;
/// Layer norm: two statistics passes, normalize, scale and shift.
pub const LAYERNORM_FLOPS_PER_ELEM: u64 = 8;
/// tanh-approximation GELU.
pub const GELU_FLOPS_PER_ELEM: u64 = 9;
/// Sigmoid: negate, exp, add, divide.
pub const SIGMOID_FLOPS_PER_ELEM: u64 = 4;
/// Plain addition (residuals, position-embedding add).
pub const ADD_FLOPS_PER_ELEM: u64 = 1;
/// All-tokens mixture `D·onehot + (1−D)·softmax`, per vocabulary entry.
pub const MIX_FLOPS_PER_VOCAB_ELEM: u64 = 3;

/// `2·m·k·n` for an m×k by k×n product.
pub fn matmul_flops(m: u64, k: u64, n: u64) -> u64 {
    2 * m * k * n
}

/// Dense embedding lookup priced as a one-hot matmul: `2·V·E` per token.
pub fn dense_lookup_flops(n: u64, vocab: u64, embed: u64) -> u64 {
    matmul_flops(n, vocab, embed)
}

/// Disjoint op-class totals; `matmul` is the sum of the four structural
/// buckets and `total` adds `elementwise`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Breakdown {
    pub embedding: u64,
    pub attention: u64,
    pub ffn: u64,
    pub heads: u64,
    pub elementwise: u64,
}

impl Breakdown {
    pub fn matmul(&self) -> u64 {
        self.embedding + self.attention + self.ffn + self.heads
    }

    pub fn total(&self) -> u64 {
        self.matmul() + self.elementwise
    }

    pub fn add(&mut self, other: &Breakdown) {
        self.embedding += other.embedding;
        self.attention += other.attention;
        self.ffn += other.ffn;
        self.heads += other.heads;
        self.elementwise += other.elementwise;
    }

    pub fn scaled(&self, k: u64) -> Breakdown {
        Breakdown {
            embedding: self.embedding * k,
            attention: self.attention * k,
            ffn: self.ffn * k,
            heads: self.heads * k,
            elementwise: self.elementwise * k,
        }
    }
}

/// Which heads a tower runs in a given variant.
#[derive(Debug, Clone, Copy, Default)]
struct HeadSet {
    /// Tied-softmax MLM head (projection, logits, vocab softmax).
    mlm: bool,
    /// Number of sigmoid score heads (real/fake, copy, baseline).
    score_heads: u64,
    /// All-tokens mixture over the vocabulary.
    mixture: bool,
}

/// One tower's per-sequence accounting. `train_step` is `2 × forward`
/// except when a variant runs the tower forward-only.
#[derive(Debug, Clone)]
pub struct TowerFlops {
    pub name: String,
    pub breakdown: Breakdown,
    pub forward: u64,
    pub train_step: u64,
}

/// Full accounting for one variant at a given batch shape. `forward`,
/// `breakdown`, and `train_step` cover the whole batch; `per_seq_forward`
/// divides out the batch; `towers` are per sequence. `cumulative` is zero
/// until a training loop fills it in.
#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub variant: String,
    pub towers: Vec<TowerFlops>,
    pub breakdown: Breakdown,
    pub forward: u64,
    pub per_seq_forward: u64,
    pub train_step: u64,
    pub cumulative: u64,
}

/// Closed-form per-sequence breakdown for one tower plus its heads.
fn tower_breakdown(cfg: &ModelConfig, tower: &TowerConfig, n: u64, heads: HeadSet) -> Breakdown {
    let (h, f, a, l) = (
        tower.hidden as u64,
        tower.ffn as u64,
        tower.heads as u64,
        tower.layers as u64,
    );
    let (e, v) = (cfg.embed as u64, cfg.vocab as u64);
    let mut bd = Breakdown::default();

    bd.embedding = dense_lookup_flops(n, v, e) + matmul_flops(n, e, h);
    bd.elementwise += ADD_FLOPS_PER_ELEM * n * e;

    // Per block: Q/K/V and output projections, score and weighted-sum
    // matmuls; softmax and scaling over A·n² scores; two layer norms, two
    // residual adds, and the GELU.
    bd.attention = l * (4 * matmul_flops(n, h, h) + 2 * matmul_flops(n, n, h));
    bd.ffn = l * 2 * matmul_flops(n, h, f);
    bd.elementwise += l
        * ((SOFTMAX_FLOPS_PER_ELEM + SCALE_FLOPS_PER_SCORE) * a * n * n
            + 2 * LAYERNORM_FLOPS_PER_ELEM * n * h
            + 2 * ADD_FLOPS_PER_ELEM * n * h
            + GELU_FLOPS_PER_ELEM * n * f);

    if heads.mlm {
        bd.heads += matmul_flops(n, h, e) + matmul_flops(n, e, v);
        bd.elementwise += SOFTMAX_FLOPS_PER_ELEM * n * v;
    }
    bd.heads += heads.score_heads * matmul_flops(n, h, 1);
    bd.elementwise += heads.score_heads * SIGMOID_FLOPS_PER_ELEM * n;
    if heads.mixture {
        bd.elementwise += MIX_FLOPS_PER_VOCAB_ELEM * n * v;
    }
    bd
}

fn tower(cfg: &ModelConfig, tc: &TowerConfig, n: u64, name: &str, heads: HeadSet) -> TowerFlops {
    let bd = tower_breakdown(cfg, tc, n, heads);
    let fwd = bd.total();
    TowerFlops {
        name: name.to_string(),
        breakdown: bd,
        forward: fwd,
        train_step: 2 * fwd,
    }
}

fn report(variant: &str, towers: Vec<TowerFlops>, batch: u64) -> FlopsReport {
    let mut bd = Breakdown::default();
    for t in &towers {
        bd.add(&t.breakdown);
    }
    let per_seq: u64 = towers.iter().map(|t| t.forward).sum();
    let step: u64 = towers.iter().map(|t| t.train_step).sum();
    FlopsReport {
        variant: variant.to_string(),
        towers,
        breakdown: bd.scaled(batch),
        forward: per_seq * batch,
        per_seq_forward: per_seq,
        train_step: step * batch,
        cumulative: 0,
    }
}

/// Forward accounting for the default generator+discriminator pairing.
pub fn forward_flops(config: &ModelConfig, n: usize, batch: usize) -> Result<FlopsReport> {
    train_step_flops(config, n, batch, "electra")
}

/// Per-step accounting for a named variant. The backward pass costs the
/// same as the forward pass; a tower a variant never backpropagates
/// through (the two-stage generator in its discriminator phase) counts
/// forward-only.
pub fn train_step_flops(
    config: &ModelConfig,
    n: usize,
    batch: usize,
    variant: &str,
) -> Result<FlopsReport> {
    config.validate()?;
    if n == 0 || n > config.max_seq || batch == 0 {
        return Err(Error::Config(format!(
            "flops accounting needs 0 < n <= {} and a positive batch, got n={n} batch={batch}",
            config.max_seq
        )));
    }
    let nn = n as u64;
    let gen_cfg = config.generator();
    let disc_cfg = config.discriminator();
    let mlm = HeadSet { mlm: true, ..HeadSet::default() };
    let score = HeadSet { score_heads: 1, ..HeadSet::default() };

    let towers = match variant {
        "electra" | "electra15" => vec![
            tower(config, &gen_cfg, nn, "generator", mlm),
            tower(config, &disc_cfg, nn, "discriminator", score),
        ],
        "adversarial" => vec![
            tower(
                config,
                &gen_cfg,
                nn,
                "generator",
                HeadSet { mlm: true, score_heads: 1, mixture: false },
            ),
            tower(config, &disc_cfg, nn, "discriminator", score),
        ],
        // The bert baseline trains the generator tower (run with
        // gen_mult = 1 for a full-size model), so it is priced with the
        // generator dimensions.
        "bert" => vec![tower(config, &gen_cfg, nn, "model", mlm)],
        "replace-mlm" => vec![
            tower(config, &gen_cfg, nn, "generator", mlm),
            tower(config, &disc_cfg, nn, "model", mlm),
        ],
        "all-tokens-mlm" => vec![
            tower(config, &gen_cfg, nn, "generator", mlm),
            tower(
                config,
                &disc_cfg,
                nn,
                "model",
                HeadSet { mlm: true, score_heads: 1, mixture: true },
            ),
        ],
        // The unigram generator is a sampling table, not a network; its
        // draw cost is excluded from model FLOPs.
        "unigram-electra" => vec![tower(config, &disc_cfg, nn, "discriminator", score)],
        "two-stage" => {
            // Discriminator phase: the generator only produces corruption,
            // so it runs forward without a backward pass.
            let mut g = tower(config, &gen_cfg, nn, "generator", mlm);
            g.train_step = g.forward;
            vec![g, tower(config, &disc_cfg, nn, "discriminator", score)]
        }
        other => {
            return Err(Error::Config(format!("unknown variant for flops: {other}")));
        }
    };
    Ok(report(variant, towers, batch as u64))
}

/// Per-step accounting for the first (masked-LM) phase of two-stage
/// training: only the generator tower runs and trains.
pub fn two_stage_phase_one_flops(
    config: &ModelConfig,
    n: usize,
    batch: usize,
) -> Result<FlopsReport> {
    config.validate()?;
    if n == 0 || n > config.max_seq || batch == 0 {
        return Err(Error::Config(format!(
            "flops accounting needs 0 < n <= {} and a positive batch, got n={n} batch={batch}",
            config.max_seq
        )));
    }
    let gen_cfg = config.generator();
    let mlm = HeadSet { mlm: true, ..HeadSet::default() };
    let towers = vec![tower(config, &gen_cfg, n as u64, "generator", mlm)];
    Ok(report("two-stage-phase1", towers, batch as u64))
}

impl FlopsReport {
    /// Aligned text table: one row per bucket, one block per tower, plus
    /// totals. Counts are per sequence for towers and per batch for totals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("variant: {}\n", self.variant));
        for t in &self.towers {
            out.push_str(&format!(
                "{} (per sequence): forward {} train-step {}\n",
                t.name, t.forward, t.train_step
            ));
            let b = &t.breakdown;
            for (label, val) in [
                ("embedding", b.embedding),
                ("attention", b.attention),
                ("ffn", b.ffn),
                ("heads", b.heads),
                ("elementwise", b.elementwise),
            ] {
                out.push_str(&format!("  {label:<12} {val:>16}\n"));
            }
        }
        out.push_str(&format!(
            "batch totals: forward {} train-step {} matmul-share {:.4}\n",
            self.forward,
            self.train_step,
            self.breakdown.matmul() as f64 / self.breakdown.total() as f64
        ));
        out
    }
}
