//! Command-line surface: a flat key=value run configuration, the
//! `pretrain`, `eval`, `flops`, and `curves` subcommands, and the run
//! directory layout they share.
//!
//! A run directory holds everything needed to reproduce and analyze one
//! training run: `config.txt` (every key resolved, reparses to the same
//! run), `vocab.txt`, `metrics.csv` (one row per step), `runinfo.txt`
//! (the milestone schedule), milestone checkpoints, `final.ckpt`, and an
//! append-only `eval.csv`.
//!
//! Precedence for configuration: defaults, then the config file, then the
//! `RTD_SEED` environment variable (seed only), then `--key value`
//! command-line overrides. Unknown keys are rejected by name.
//!
//! The downstream probe reads its task recipe (regime matrices, vocab
//! symbols) from the corpus keys, so it is meaningful for the synthetic
//! corpora; on file corpora its symbols fall back to `[UNK]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::corpus::{
    encode, make_batches, synthetic_corpus, two_regime_corpus, unigram_table, MarkovOrder,
    SyntheticCorpusSpec, TokenBatch, TwoRegimeSpec, Vocab, MASK,
};
use crate::encoder::{ModelConfig, ModelParams, TowerKind};
use crate::evaluation::{
    detection_eval, downstream_probe, electra_mlm_predict, masked_lm_accuracy, render_eval_csv,
    two_regime_probe_task, EvalRow,
};
use crate::flopcount::{train_step_flops, two_stage_phase_one_flops, FlopsReport};
use crate::objectives::{LossSpec, Variant};
use crate::rng::{self, stream, Purpose};
use crate::trainer::{
    adversarial_pretrain, joint_pretrain, load_checkpoint, render_metrics_csv, save_checkpoint,
    two_stage_pretrain, LogRow, OptimizerHp, OptimizerState, TrainConfig, TrainOutcome,
};
use crate::{Error, Result};

/// File name of the end-of-run checkpoint inside a run directory.
pub const FINAL_CKPT: &str = "final.ckpt";

/// Every configuration key, in the order `config.txt` renders them.
pub const KEYS: &[&str] = &[
    // run identity
    "variant",
    "seed",
    "out_dir",
    // model
    "layers",
    "hidden",
    "ffn",
    "heads",
    "embed",
    "max_seq",
    "gen_mult",
    "vocab_cap",
    // training
    "steps",
    "batch",
    "seq_len",
    "peak_lr",
    "warmup",
    "total",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "log_wallclock",
    // objective
    "lambda",
    "mask_frac",
    "bert_mask",
    "bert_random",
    // corpus
    "corpus",
    "corpus_path",
    "corpus_vocab",
    "corpus_order",
    "matrix_seed",
    "corpus_len",
    "segment_len",
    // compute budget and milestones
    "flops_budget",
    "milestones",
    // evaluation
    "probe_train",
    "probe_test",
    "probe_epochs",
    "probe_seq_len",
    "probe_frozen",
    "eval_batches",
];

/// One fully resolved run: model, optimizer, objective, corpus recipe,
/// compute budget, and evaluation settings. Field-per-key; see [`KEYS`]
/// for the serialization order and `default_config` for every default.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: String,
    pub seed: u64,
    /// Empty means `runs/{variant}-seed{seed}`.
    pub out_dir: String,
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub embed: usize,
    pub max_seq: usize,
    pub gen_mult: f64,
    /// Vocabulary size cap handed to the corpus builder (specials included).
    pub vocab_cap: usize,
    pub steps: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub total: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub log_wallclock: bool,
    pub lambda: f64,
    pub mask_frac: f64,
    pub bert_mask: f64,
    pub bert_random: f64,
    /// Corpus kind: `two-regime`, `markov`, or `file`.
    pub corpus: String,
    pub corpus_path: String,
    pub corpus_vocab: usize,
    pub corpus_order: usize,
    pub matrix_seed: u64,
    pub corpus_len: usize,
    pub segment_len: usize,
    /// Nonzero replaces `steps` with `flops_budget / per-step FLOPs`.
    pub flops_budget: u64,
    pub milestones: u64,
    pub probe_train: usize,
    pub probe_test: usize,
    pub probe_epochs: usize,
    pub probe_seq_len: usize,
    pub probe_frozen: bool,
    pub eval_batches: usize,
}

/// All defaults. The model block matches the reference configuration the
/// FLOPs fixture is derived for.
pub fn default_config() -> RunConfig {
    RunConfig {
        variant: "electra".into(),
        seed: 1,
        out_dir: String::new(),
        layers: 2,
        hidden: 64,
        ffn: 256,
        heads: 4,
        embed: 32,
        max_seq: 64,
        gen_mult: 0.25,
        vocab_cap: 512,
        steps: 2000,
        batch: 16,
        seq_len: 64,
        peak_lr: 1e-3,
        warmup: 100,
        total: 0,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-6,
        weight_decay: 0.01,
        log_wallclock: false,
        lambda: 50.0,
        mask_frac: 0.15,
        bert_mask: 0.8,
        bert_random: 0.1,
        corpus: "two-regime".into(),
        corpus_path: String::new(),
        corpus_vocab: 12,
        corpus_order: 1,
        matrix_seed: 7,
        corpus_len: 100_000,
        segment_len: 32,
        flops_budget: 0,
        milestones: 4,
        probe_train: 32,
        probe_test: 64,
        probe_epochs: 20,
        probe_seq_len: 16,
        probe_frozen: false,
        eval_batches: 4,
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("config key `{key}`: cannot parse value `{value}`"))
    })
}

impl RunConfig {
    /// Sets one key from its text value; unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.to_string(),
            "seed" => self.seed = parse_as(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "layers" => self.layers = parse_as(key, value)?,
            "hidden" => self.hidden = parse_as(key, value)?,
            "ffn" => self.ffn = parse_as(key, value)?,
            "heads" => self.heads = parse_as(key, value)?,
            "embed" => self.embed = parse_as(key, value)?,
            "max_seq" => self.max_seq = parse_as(key, value)?,
            "gen_mult" => self.gen_mult = parse_as(key, value)?,
            "vocab_cap" => self.vocab_cap = parse_as(key, value)?,
            "steps" => self.steps = parse_as(key, value)?,
            "batch" => self.batch = parse_as(key, value)?,
            "seq_len" => self.seq_len = parse_as(key, value)?,
            "peak_lr" => self.peak_lr = parse_as(key, value)?,
            "warmup" => self.warmup = parse_as(key, value)?,
            "total" => self.total = parse_as(key, value)?,
            "beta1" => self.beta1 = parse_as(key, value)?,
            "beta2" => self.beta2 = parse_as(key, value)?,
            "eps" => self.eps = parse_as(key, value)?,
            "weight_decay" => self.weight_decay = parse_as(key, value)?,
            "log_wallclock" => self.log_wallclock = parse_as(key, value)?,
            "lambda" => self.lambda = parse_as(key, value)?,
            "mask_frac" => self.mask_frac = parse_as(key, value)?,
            "bert_mask" => self.bert_mask = parse_as(key, value)?,
            "bert_random" => self.bert_random = parse_as(key, value)?,
            "corpus" => self.corpus = value.to_string(),
            "corpus_path" => self.corpus_path = value.to_string(),
            "corpus_vocab" => self.corpus_vocab = parse_as(key, value)?,
            "corpus_order" => self.corpus_order = parse_as(key, value)?,
            "matrix_seed" => self.matrix_seed = parse_as(key, value)?,
            "corpus_len" => self.corpus_len = parse_as(key, value)?,
            "segment_len" => self.segment_len = parse_as(key, value)?,
            "flops_budget" => self.flops_budget = parse_as(key, value)?,
            "milestones" => self.milestones = parse_as(key, value)?,
            "probe_train" => self.probe_train = parse_as(key, value)?,
            "probe_test" => self.probe_test = parse_as(key, value)?,
            "probe_epochs" => self.probe_epochs = parse_as(key, value)?,
            "probe_seq_len" => self.probe_seq_len = parse_as(key, value)?,
            "probe_frozen" => self.probe_frozen = parse_as(key, value)?,
            "eval_batches" => self.eval_batches = parse_as(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Text value of one key, the exact form `set` reparses.
    pub fn get(&self, key: &str) -> String {
        match key {
            "variant" => self.variant.clone(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.clone(),
            "layers" => self.layers.to_string(),
            "hidden" => self.hidden.to_string(),
            "ffn" => self.ffn.to_string(),
            "heads" => self.heads.to_string(),
            "embed" => self.embed.to_string(),
            "max_seq" => self.max_seq.to_string(),
            "gen_mult" => self.gen_mult.to_string(),
            "vocab_cap" => self.vocab_cap.to_string(),
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "peak_lr" => self.peak_lr.to_string(),
            "warmup" => self.warmup.to_string(),
            "total" => self.total.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "log_wallclock" => self.log_wallclock.to_string(),
            "lambda" => self.lambda.to_string(),
            "mask_frac" => self.mask_frac.to_string(),
            "bert_mask" => self.bert_mask.to_string(),
            "bert_random" => self.bert_random.to_string(),
            "corpus" => self.corpus.clone(),
            "corpus_path" => self.corpus_path.clone(),
            "corpus_vocab" => self.corpus_vocab.to_string(),
            "corpus_order" => self.corpus_order.to_string(),
            "matrix_seed" => self.matrix_seed.to_string(),
            "corpus_len" => self.corpus_len.to_string(),
            "segment_len" => self.segment_len.to_string(),
            "flops_budget" => self.flops_budget.to_string(),
            "milestones" => self.milestones.to_string(),
            "probe_train" => self.probe_train.to_string(),
            "probe_test" => self.probe_test.to_string(),
            "probe_epochs" => self.probe_epochs.to_string(),
            "probe_seq_len" => self.probe_seq_len.to_string(),
            "probe_frozen" => self.probe_frozen.to_string(),
            "eval_batches" => self.eval_batches.to_string(),
            _ => unreachable!("get called with a key missing from KEYS"),
        }
    }

    /// Full `key = value` rendering, one line per key in [`KEYS`] order.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key)).expect("string write");
        }
        out
    }

    /// The directory this run writes into.
    pub fn run_dir(&self) -> PathBuf {
        if self.out_dir.is_empty() {
            PathBuf::from(format!("runs/{}-seed{}", self.variant, self.seed))
        } else {
            PathBuf::from(&self.out_dir)
        }
    }

    /// Checks everything checkable before the corpus exists.
    pub fn validate(&self) -> Result<()> {
        parse_variant(&self.variant)?;
        if self.variant == "two-stage" && self.gen_mult != 1.0 {
            return Err(Error::Config(
                "two-stage requires gen_mult = 1 so generator weights fit the discriminator"
                    .into(),
            ));
        }
        match self.corpus.as_str() {
            "two-regime" | "markov" => {}
            "file" => {
                if self.corpus_path.is_empty() {
                    return Err(Error::Config("corpus = file requires corpus_path".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown corpus kind `{other}`; expected two-regime, markov, or file"
                )))
            }
        }
        if !(self.corpus_order == 1 || self.corpus_order == 2) {
            return Err(Error::Config(format!(
                "corpus_order must be 1 or 2, got {}",
                self.corpus_order
            )));
        }
        if self.corpus_vocab == 0 || self.corpus_len == 0 || self.segment_len == 0 {
            return Err(Error::Config("corpus dimensions must be positive".into()));
        }
        if self.milestones == 0 {
            return Err(Error::Config("milestones must be at least 1".into()));
        }
        if self.vocab_cap < 4 {
            return Err(Error::Config("vocab_cap must cover the specials plus one token".into()));
        }
        if self.probe_train == 0
            || self.probe_test == 0
            || self.probe_epochs == 0
            || self.probe_seq_len < 2
        {
            return Err(Error::Config("probe settings must be positive (seq_len >= 2)".into()));
        }
        if self.eval_batches == 0 {
            return Err(Error::Config("eval_batches must be at least 1".into()));
        }
        Ok(())
    }
}

/// Applies a config file's lines: `key = value`, `#` comments, blank lines.
pub fn apply_config_text(cfg: &mut RunConfig, text: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected `key = value`, got `{line}`", i + 1))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(())
}

fn apply_env_and_overrides(
    cfg: &mut RunConfig,
    env_seed: Option<&str>,
    overrides: &[(String, String)],
) -> Result<()> {
    if let Some(s) = env_seed {
        cfg.seed = s
            .parse()
            .map_err(|_| Error::Config(format!("RTD_SEED: cannot parse seed `{s}`")))?;
    }
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()
}

/// Defaults, then the config file, then `RTD_SEED`, then overrides.
pub fn resolve_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let mut cfg = default_config();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        apply_config_text(&mut cfg, &text)?;
    }
    apply_env_and_overrides(&mut cfg, env_seed, overrides)?;
    Ok(cfg)
}

/// Reads a run directory's echoed `config.txt` and layers overrides on top.
pub fn load_run_config(
    dir: &Path,
    overrides: &[(String, String)],
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let path = dir.join("config.txt");
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!("run directory {}: cannot read config.txt: {e}", dir.display()))
    })?;
    let mut cfg = default_config();
    apply_config_text(&mut cfg, &text)?;
    apply_env_and_overrides(&mut cfg, env_seed, overrides)?;
    Ok(cfg)
}

/// Training algorithm implied by the variant name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Algo {
    Joint(Variant),
    TwoStage,
    Adversarial,
}

fn parse_variant(name: &str) -> Result<Algo> {
    Ok(match name {
        "electra" => Algo::Joint(Variant::Electra),
        "bert" => Algo::Joint(Variant::Bert),
        "electra15" => Algo::Joint(Variant::Electra15),
        "replace-mlm" => Algo::Joint(Variant::ReplaceMlm),
        "all-tokens-mlm" => Algo::Joint(Variant::AllTokensMlm),
        "unigram-electra" => Algo::Joint(Variant::UnigramElectra),
        "two-stage" => Algo::TwoStage,
        "adversarial" => Algo::Adversarial,
        other => {
            return Err(Error::Config(format!(
                "unknown variant `{other}`; expected electra, bert, electra15, replace-mlm, \
                 all-tokens-mlm, unigram-electra, two-stage, or adversarial"
            )))
        }
    })
}

/// The loss specification a run trains (two-stage and adversarial run the
/// standard detection objective).
fn algo_loss_variant(algo: Algo) -> Variant {
    match algo {
        Algo::Joint(v) => v,
        Algo::TwoStage | Algo::Adversarial => Variant::Electra,
    }
}

/// The FLOPs-pricing name for a variant.
fn flops_name(cfg: &RunConfig) -> &str {
    &cfg.variant
}

/// The tower a variant actually trains, hence the one the probe reads.
pub fn probe_tower(variant: &str) -> TowerKind {
    if variant == "bert" {
        TowerKind::Generator
    } else {
        TowerKind::Discriminator
    }
}

/// The corpus text a config describes.
pub fn build_corpus_text(cfg: &RunConfig) -> Result<String> {
    match cfg.corpus.as_str() {
        "two-regime" => Ok(two_regime_corpus(&two_regime_spec(cfg), cfg.seed)),
        "markov" => {
            let spec = SyntheticCorpusSpec {
                vocab_size: cfg.corpus_vocab,
                order: if cfg.corpus_order == 1 { MarkovOrder::One } else { MarkovOrder::Two },
                matrix_seed: cfg.matrix_seed,
                length: cfg.corpus_len,
            };
            Ok(synthetic_corpus(&spec, cfg.seed))
        }
        "file" => fs::read_to_string(&cfg.corpus_path).map_err(|e| {
            Error::Corpus(format!("cannot read corpus file {}: {e}", cfg.corpus_path))
        }),
        other => Err(Error::Config(format!("unknown corpus kind `{other}`"))),
    }
}

fn two_regime_spec(cfg: &RunConfig) -> TwoRegimeSpec {
    TwoRegimeSpec {
        vocab_size: cfg.corpus_vocab,
        matrix_seed: cfg.matrix_seed,
        length: cfg.corpus_len,
        segment_len: cfg.segment_len,
    }
}

fn model_config(cfg: &RunConfig, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        layers: cfg.layers,
        hidden: cfg.hidden,
        ffn: cfg.ffn,
        heads: cfg.heads,
        embed: cfg.embed,
        vocab: vocab_size,
        max_seq: cfg.max_seq,
        gen_mult: cfg.gen_mult,
    }
}

fn loss_spec(cfg: &RunConfig, vocab: &Vocab, ids: &[u32]) -> Result<LossSpec> {
    let algo = parse_variant(&cfg.variant)?;
    let mut spec = LossSpec::new(algo_loss_variant(algo));
    spec.lambda = cfg.lambda;
    spec.mask_frac = cfg.mask_frac;
    spec.bert.mask = cfg.bert_mask;
    spec.bert.random = cfg.bert_random;
    if spec.variant == Variant::UnigramElectra {
        spec.unigram = Some(unigram_table(ids, vocab)?);
    }
    Ok(spec)
}

/// Per-step FLOPs of a run: the steady-state cost, plus the phase-1 cost
/// for two-stage runs (equal to the steady cost otherwise).
fn per_step_flops(cfg: &RunConfig, model: &ModelConfig) -> Result<(u64, u64)> {
    let steady = train_step_flops(model, cfg.seq_len, cfg.batch, flops_name(cfg))?.train_step;
    let phase1 = if cfg.variant == "two-stage" {
        two_stage_phase_one_flops(model, cfg.seq_len, cfg.batch)?.train_step
    } else {
        steady
    };
    Ok((steady, phase1))
}

/// Steps per phase after applying a FLOPs budget. Two-stage runs spend a
/// phase-1 and a steady step per unit, everything else one steady step.
fn effective_steps(cfg: &RunConfig, model: &ModelConfig) -> Result<u64> {
    if cfg.flops_budget == 0 {
        return Ok(cfg.steps);
    }
    let (steady, phase1) = per_step_flops(cfg, model)?;
    let per_unit = if cfg.variant == "two-stage" { steady + phase1 } else { steady };
    Ok((cfg.flops_budget / per_unit).max(1))
}

/// Cumulative FLOPs after `k` completed steps, mirroring the training
/// loop's accounting (two-stage spends phase-1 steps first).
fn cumulative_flops_at(cfg: &RunConfig, steady: u64, phase1: u64, phase_steps: u64, k: u64) -> u64 {
    if cfg.variant == "two-stage" {
        let first = k.min(phase_steps);
        first * phase1 + (k - first) * steady
    } else {
        k * steady
    }
}

fn train_config(cfg: &RunConfig, vocab: &Vocab, ids: &[u32]) -> Result<TrainConfig> {
    let model = model_config(cfg, vocab.size());
    let mut tc = TrainConfig::new(model, loss_spec(cfg, vocab, ids)?);
    tc.steps = effective_steps(cfg, &model)?;
    tc.batch = cfg.batch;
    tc.seq_len = cfg.seq_len;
    tc.seed = cfg.seed;
    tc.opt = OptimizerHp {
        peak_lr: cfg.peak_lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
        warmup: cfg.warmup,
        total: cfg.total,
    };
    tc.log_wallclock = cfg.log_wallclock;
    tc.validate()?;
    Ok(tc)
}

/// One checkpointed step of a run, shared by `runinfo.txt` and `curves`.
#[derive(Debug, Clone, PartialEq)]
struct Milestone {
    idx: u64,
    step: u64,
    flops: u64,
    file: String,
}

/// Evenly spaced checkpoint steps: milestone `i` sits at
/// `round(total * i / m)`; duplicates collapse and the last one is the
/// final checkpoint.
fn milestone_schedule(
    cfg: &RunConfig,
    total_steps: u64,
    steady: u64,
    phase1: u64,
    phase_steps: u64,
) -> Vec<Milestone> {
    let m = cfg.milestones;
    let mut steps: Vec<u64> = (1..=m)
        .map(|i| ((total_steps * i) + m / 2) / m)
        .filter(|&s| s >= 1)
        .collect();
    steps.dedup();
    let count = steps.len();
    steps
        .into_iter()
        .enumerate()
        .map(|(i, step)| {
            let idx = i as u64 + 1;
            Milestone {
                idx,
                step,
                flops: cumulative_flops_at(cfg, steady, phase1, phase_steps, step),
                file: if i + 1 == count {
                    FINAL_CKPT.to_string()
                } else {
                    format!("milestone-{idx}.ckpt")
                },
            }
        })
        .collect()
}

fn render_runinfo(cfg: &RunConfig, total_steps: u64, steady: u64, miles: &[Milestone]) -> String {
    let mut out = String::new();
    writeln!(out, "variant {}", cfg.variant).expect("string write");
    writeln!(out, "seed {}", cfg.seed).expect("string write");
    writeln!(out, "total_steps {total_steps}").expect("string write");
    writeln!(out, "train_step_flops {steady}").expect("string write");
    for m in miles {
        writeln!(out, "milestone {} step {} flops {} file {}", m.idx, m.step, m.flops, m.file)
            .expect("string write");
    }
    out
}

#[derive(Debug)]
struct RunInfo {
    variant: String,
    seed: u64,
    milestones: Vec<Milestone>,
}

fn read_runinfo(dir: &Path) -> Result<RunInfo> {
    let path = dir.join("runinfo.txt");
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!("run directory {}: cannot read runinfo.txt: {e}", dir.display()))
    })?;
    let mut info = RunInfo { variant: String::new(), seed: 0, milestones: vec![] };
    let bad = |line: &str| Error::Checkpoint(format!("malformed runinfo line `{line}`"));
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["variant", v] => info.variant = v.to_string(),
            ["seed", s] => info.seed = s.parse().map_err(|_| bad(line))?,
            ["total_steps", _] | ["train_step_flops", _] => {}
            ["milestone", idx, "step", step, "flops", flops, "file", file] => {
                info.milestones.push(Milestone {
                    idx: idx.parse().map_err(|_| bad(line))?,
                    step: step.parse().map_err(|_| bad(line))?,
                    flops: flops.parse().map_err(|_| bad(line))?,
                    file: file.to_string(),
                });
            }
            _ => return Err(bad(line)),
        }
    }
    Ok(info)
}

/// Writes `bytes` via a temporary file renamed into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(Error::Io)?;
    fs::rename(&tmp, path).map_err(Error::Io)?;
    Ok(())
}

/// Runs pre-training for a resolved config: builds the corpus, trains with
/// the variant's algorithm, saves milestone checkpoints as they pass, and
/// leaves `config.txt`, `vocab.txt`, `runinfo.txt`, `metrics.csv`, and
/// `final.ckpt` in the run directory. Returns that directory.
pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(Error::Io)?;

    let text = build_corpus_text(cfg)?;
    let vocab = Vocab::build(&text, cfg.vocab_cap)?;
    let ids = encode(&text, &vocab);
    let tc = train_config(cfg, &vocab, &ids)?;
    let algo = parse_variant(&cfg.variant)?;
    let total_steps = match algo {
        Algo::TwoStage => 2 * tc.steps,
        _ => tc.steps,
    };
    let (steady, phase1) = per_step_flops(cfg, &tc.model)?;
    let miles = milestone_schedule(cfg, total_steps, steady, phase1, tc.steps);

    let mut echoed = cfg.clone();
    echoed.out_dir = dir.display().to_string();
    write_atomic(&dir.join("config.txt"), echoed.to_kv_text().as_bytes())?;
    write_atomic(&dir.join("vocab.txt"), vocab.to_lines().as_bytes())?;
    write_atomic(
        &dir.join("runinfo.txt"),
        render_runinfo(cfg, total_steps, steady, &miles).as_bytes(),
    )?;

    let resume_state = match resume {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let hook_dir = dir.clone();
    let hook_miles = miles.clone();
    let hook = move |row: &LogRow, params: &ModelParams, opt: &OptimizerState| {
        for m in &hook_miles {
            if m.step == row.step + 1 && m.file != FINAL_CKPT {
                save_checkpoint(&hook_dir.join(&m.file), params, opt)?;
            }
        }
        Ok(())
    };
    let outcome: TrainOutcome = match algo {
        Algo::Joint(_) => joint_pretrain(&tc, &ids, &vocab, resume_state, hook)?,
        Algo::TwoStage => two_stage_pretrain(&tc, &ids, &vocab, resume_state, hook)?,
        Algo::Adversarial => adversarial_pretrain(&tc, &ids, &vocab, resume_state, hook)?,
    };
    save_checkpoint(&dir.join(FINAL_CKPT), &outcome.params, &outcome.opt)?;
    write_atomic(&dir.join("metrics.csv"), render_metrics_csv(&outcome.log).as_bytes())?;
    Ok(dir)
}

/// The deterministic evaluation slice of a corpus: the trailing batches of
/// the run's data order.
fn eval_batches(cfg: &RunConfig, ids: &[u32]) -> Result<Vec<TokenBatch>> {
    let all = make_batches(ids, cfg.seq_len, cfg.batch, cfg.seed)?;
    let skip = all.len().saturating_sub(cfg.eval_batches);
    Ok(all.into_iter().skip(skip).collect())
}

fn probe_rows(cfg: &RunConfig, params: &ModelParams, vocab: &Vocab, step: u64) -> Result<Vec<EvalRow>> {
    let task = two_regime_probe_task(
        &two_regime_spec(cfg),
        vocab,
        cfg.probe_train,
        cfg.probe_test,
        cfg.probe_seq_len,
        cfg.probe_frozen,
        cfg.seed,
    )?;
    let out = downstream_probe(params, probe_tower(&cfg.variant), &task, cfg.probe_epochs, cfg.seed)?;
    Ok(vec![
        EvalRow { step, metric: "probe_train_accuracy".into(), value: out.train_accuracy },
        EvalRow { step, metric: "probe_accuracy".into(), value: out.test_accuracy },
    ])
}

fn electra_mlm_rows(
    cfg: &RunConfig,
    params: &ModelParams,
    vocab: &Vocab,
    batches: &[TokenBatch],
    step: u64,
) -> Result<Vec<EvalRow>> {
    let mut rng = stream(cfg.seed, 2, Purpose::Eval);
    let mut hits = 0usize;
    let mut total = 0usize;
    'outer: for batch in batches {
        let n = batch.seq_len();
        for r in 0..batch.batch() {
            if total >= 64 {
                break 'outer;
            }
            let row = batch.ids.row(r);
            let maskable: Vec<usize> =
                (0..n).filter(|&t| !vocab.is_special(row[t])).collect();
            if maskable.is_empty() {
                continue;
            }
            let t = maskable[rng::uniform_below(&mut rng, maskable.len())];
            let original = row[t];
            let mut context = Array2::zeros((1, n));
            context.row_mut(0).assign(&row);
            context[[0, t]] = MASK;
            let predicted =
                electra_mlm_predict(params, &TokenBatch { ids: context }, cfg.mask_frac)?;
            hits += (predicted == original) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Corpus("no maskable positions for combined prediction".into()));
    }
    Ok(vec![EvalRow {
        step,
        metric: "electra_mlm_accuracy".into(),
        value: hits as f64 / total as f64,
    }])
}

fn append_eval_rows(path: &Path, rows: &[EvalRow]) -> Result<()> {
    use std::io::Write as _;
    let fresh = !path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::Io)?;
    let rendered = render_eval_csv(rows);
    let body = rendered.split_once('\n').map(|(_, b)| b).unwrap_or("");
    if fresh {
        file.write_all(b"step,metric,value\n").map_err(Error::Io)?;
    }
    file.write_all(body.as_bytes()).map_err(Error::Io)?;
    Ok(())
}

/// Evaluates one checkpoint of a run (default: its final checkpoint) and
/// appends the resulting rows to the run's `eval.csv`. `what` selects the
/// metric family: `mlm`, `rtd`, `probe`, or `electra-mlm`.
pub fn cmd_eval(
    cfg: &RunConfig,
    dir: &Path,
    what: &str,
    checkpoint: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    let vocab_text = fs::read_to_string(dir.join("vocab.txt")).map_err(|e| {
        Error::Config(format!("run directory {}: cannot read vocab.txt: {e}", dir.display()))
    })?;
    let vocab = Vocab::from_lines(&vocab_text)?;
    let default_ckpt = dir.join(FINAL_CKPT);
    let ckpt_path = checkpoint.unwrap_or(&default_ckpt);
    let (params, opt) = load_checkpoint(ckpt_path)?;
    let step = opt.step;

    let rows = match what {
        "probe" => probe_rows(cfg, &params, &vocab, step)?,
        "mlm" | "rtd" | "electra-mlm" => {
            let text = build_corpus_text(cfg)?;
            let ids = encode(&text, &vocab);
            let batches = eval_batches(cfg, &ids)?;
            match what {
                "mlm" => {
                    let mut rng = stream(cfg.seed, 0, Purpose::Eval);
                    let value =
                        masked_lm_accuracy(&params, &batches, cfg.mask_frac, &vocab, &mut rng)?;
                    vec![EvalRow { step, metric: "masked_lm_accuracy".into(), value }]
                }
                "rtd" => {
                    let spec = loss_spec(cfg, &vocab, &ids)?;
                    let mut rng = stream(cfg.seed, 1, Purpose::Eval);
                    let m = detection_eval(&spec, &params, &batches, &vocab, &mut rng)?;
                    vec![
                        EvalRow { step, metric: "rtd_accuracy".into(), value: m.accuracy },
                        EvalRow { step, metric: "rtd_precision".into(), value: m.precision },
                        EvalRow { step, metric: "rtd_recall".into(), value: m.recall },
                    ]
                }
                _ => electra_mlm_rows(cfg, &params, &vocab, &batches, step)?,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown metric name `{other}`; expected mlm, rtd, probe, or electra-mlm"
            )))
        }
    };
    append_eval_rows(&dir.join("eval.csv"), &rows)?;
    Ok(rows)
}

/// FLOPs accounting for a resolved config, priced at its variant, batch,
/// and sequence length. The vocabulary comes from the config's corpus.
pub fn cmd_flops(cfg: &RunConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let text = build_corpus_text(cfg)?;
    let vocab = Vocab::build(&text, cfg.vocab_cap)?;
    let model = model_config(cfg, vocab.size());
    train_step_flops(&model, cfg.seq_len, cfg.batch, flops_name(cfg))
}

/// CSV rendering of a FLOPs report: `section,label,flops`, per-sequence
/// tower buckets followed by whole-batch totals.
pub fn flops_csv(report: &FlopsReport) -> String {
    let mut out = String::from("section,label,flops\n");
    for tower in &report.towers {
        let b = &tower.breakdown;
        for (label, value) in [
            ("embedding", b.embedding),
            ("attention", b.attention),
            ("ffn", b.ffn),
            ("heads", b.heads),
            ("elementwise", b.elementwise),
            ("forward", tower.forward),
            ("train_step", tower.train_step),
        ] {
            writeln!(out, "{},{label},{value}", tower.name).expect("string write");
        }
    }
    for (label, value) in [
        ("forward", report.forward),
        ("per_seq_forward", report.per_seq_forward),
        ("train_step", report.train_step),
    ] {
        writeln!(out, "total,{label},{value}").expect("string write");
    }
    out
}

/// Step, MLM loss, detection loss, and cumulative FLOPs of one metrics row.
struct MetricsRow {
    step: u64,
    mlm: f64,
    disc: f64,
    flops: u64,
}

fn read_metrics(dir: &Path) -> Result<Vec<MetricsRow>> {
    let path = dir.join("metrics.csv");
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!("run directory {}: cannot read metrics.csv: {e}", dir.display()))
    })?;
    let bad = |line: &str| Error::Checkpoint(format!("malformed metrics row `{line}`"));
    let mut rows = vec![];
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(line));
        }
        rows.push(MetricsRow {
            step: fields[0].parse().map_err(|_| bad(line))?,
            mlm: fields[1].parse().map_err(|_| bad(line))?,
            disc: fields[2].parse().map_err(|_| bad(line))?,
            flops: fields[5].parse().map_err(|_| bad(line))?,
        });
    }
    Ok(rows)
}

/// Steps a loss summary averages over, counted back from each milestone.
const CURVE_WINDOW: u64 = 25;

/// Trailing-window mean losses at a milestone step.
fn window_losses(rows: &[MetricsRow], milestone_step: u64) -> Result<(f64, f64)> {
    let lo = milestone_step.saturating_sub(CURVE_WINDOW);
    let picked: Vec<&MetricsRow> =
        rows.iter().filter(|r| r.step >= lo && r.step < milestone_step).collect();
    if picked.is_empty() {
        return Err(Error::Checkpoint(format!(
            "metrics.csv has no rows before step {milestone_step}"
        )));
    }
    let count = picked.len() as f64;
    Ok((
        picked.iter().map(|r| r.mlm).sum::<f64>() / count,
        picked.iter().map(|r| r.disc).sum::<f64>() / count,
    ))
}

/// Largest relative spread the shared FLOPs grid tolerates per milestone.
const GRID_TOLERANCE: f64 = 0.10;

/// Joins several runs into `curves.csv`: one row per (run, milestone) with
/// probe accuracy evaluated on the milestone checkpoint and trailing-mean
/// losses from the run's metrics. All runs must share the milestone index
/// grid at matching cumulative FLOPs; offenders are listed by name.
/// Returns the number of data rows written.
pub fn cmd_curves(run_dirs: &[PathBuf], out: &Path, overrides: &[(String, String)]) -> Result<usize> {
    if run_dirs.is_empty() {
        return Err(Error::Config("curves needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        let cfg = load_run_config(dir, overrides, None)?;
        let info = read_runinfo(dir)?;
        runs.push((dir.clone(), cfg, info));
    }

    let grid: Vec<u64> = runs[0].2.milestones.iter().map(|m| m.idx).collect();
    let mut offenders: Vec<String> = vec![];
    for (dir, _, info) in &runs {
        let indices: Vec<u64> = info.milestones.iter().map(|m| m.idx).collect();
        if indices != grid {
            offenders.push(format!("{} has milestones {indices:?}", dir.display()));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Config(format!(
            "mismatched milestones: expected {grid:?} as in {}; {}",
            runs[0].0.display(),
            offenders.join("; ")
        )));
    }
    for &idx in &grid {
        let mut flops: Vec<(&Path, u64)> = vec![];
        for (dir, _, info) in &runs {
            let m = info.milestones.iter().find(|m| m.idx == idx).expect("index checked");
            flops.push((dir, m.flops));
        }
        let mut sorted: Vec<u64> = flops.iter().map(|(_, f)| *f).collect();
        sorted.sort_unstable();
        let median = sorted[sorted.len() / 2] as f64;
        for (dir, f) in flops {
            if (f as f64 - median).abs() > GRID_TOLERANCE * median {
                offenders.push(format!(
                    "{} milestone {idx} at {f} FLOPs vs grid median {median}",
                    dir.display()
                ));
            }
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Config(format!("mismatched milestones: {}", offenders.join("; "))));
    }

    let mut out_rows: Vec<(String, u64, u64, f64, f64, f64)> = vec![];
    for (dir, cfg, info) in &runs {
        let vocab_text = fs::read_to_string(dir.join("vocab.txt")).map_err(|e| {
            Error::Config(format!("run directory {}: cannot read vocab.txt: {e}", dir.display()))
        })?;
        let vocab = Vocab::from_lines(&vocab_text)?;
        let metrics = read_metrics(dir)?;
        for m in &info.milestones {
            let ckpt = dir.join(&m.file);
            if !ckpt.exists() {
                return Err(Error::Checkpoint(format!(
                    "run {} lacks milestone checkpoint {}",
                    dir.display(),
                    m.file
                )));
            }
            // The step's metrics row must agree with the recorded schedule.
            if let Some(row) = metrics.iter().find(|r| r.step + 1 == m.step) {
                if row.flops != m.flops {
                    return Err(Error::Checkpoint(format!(
                        "run {}: milestone {} at {} FLOPs disagrees with metrics.csv ({})",
                        dir.display(),
                        m.idx,
                        m.flops,
                        row.flops
                    )));
                }
            }
            let (params, _) = load_checkpoint(&ckpt)?;
            let rows = probe_rows(cfg, &params, &vocab, m.step)?;
            let probe_accuracy = rows
                .iter()
                .find(|r| r.metric == "probe_accuracy")
                .expect("probe rows include test accuracy")
                .value;
            let (mlm, disc) = window_losses(&metrics, m.step)?;
            out_rows.push((info.variant.clone(), info.seed, m.flops, probe_accuracy, disc, mlm));
        }
    }
    out_rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut csv = String::from("variant,seed,cumulative_flops,probe_accuracy,disc_loss,mlm_loss\n");
    for (variant, seed, flops, probe, disc, mlm) in &out_rows {
        writeln!(csv, "{variant},{seed},{flops},{probe:.5e},{disc:.5e},{mlm:.5e}")
            .expect("string write");
    }
    write_atomic(out, csv.as_bytes())?;
    Ok(out_rows.len())
}

fn usage() -> String {
    let mut out = String::from(
        "rtdlab: replaced-token-detection pre-training laboratory\n\
         \n\
         usage:\n\
         \x20 rtdlab pretrain [CONFIG_FILE] [--key value]... [--resume CKPT]\n\
         \x20 rtdlab eval RUN_DIR --what mlm|rtd|probe|electra-mlm [--checkpoint FILE] [--key value]...\n\
         \x20 rtdlab flops [CONFIG_FILE] [--csv] [--key value]...\n\
         \x20 rtdlab curves RUN_DIR... [--out FILE] [--key value]...\n\
         \x20 rtdlab help\n\
         \n\
         The RTD_SEED environment variable overrides the config seed;\n\
         explicit --seed flags override both.\n\
         \n\
         config keys and defaults:\n",
    );
    let defaults = default_config();
    for key in KEYS {
        let value = defaults.get(key);
        let shown = if value.is_empty() { "(empty)" } else { &value };
        writeln!(out, "  {key} = {shown}").expect("string write");
    }
    out
}

fn normalize_key(key: &str) -> String {
    key.replace('-', "_")
}

/// Splits arguments into positionals and `--key value` flags. Keys listed
/// in `bool_flags` take no value; `--key=value` is accepted everywhere.
fn parse_flags(
    args: &[String],
    bool_flags: &[&str],
) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut positionals = vec![];
    let mut flags = vec![];
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if let Some(raw) = arg.strip_prefix("--") {
            if let Some((key, value)) = raw.split_once('=') {
                flags.push((normalize_key(key), value.to_string()));
            } else {
                let key = normalize_key(raw);
                if bool_flags.contains(&key.as_str()) {
                    flags.push((key, "true".to_string()));
                } else {
                    i += 1;
                    let value = args.get(i).ok_or_else(|| {
                        Error::Config(format!("flag --{raw} needs a value"))
                    })?;
                    flags.push((key, value.clone()));
                }
            }
        } else {
            positionals.push(arg.clone());
        }
        i += 1;
    }
    Ok((positionals, flags))
}

fn dispatch(args: &[String], env_seed: Option<&str>) -> Result<()> {
    let sub = args.first().map(String::as_str).unwrap_or("help");
    match sub {
        "pretrain" => {
            let (pos, flags) = parse_flags(&args[1..], &[])?;
            if pos.len() > 1 {
                return Err(Error::Config("pretrain takes at most one config file".into()));
            }
            let mut overrides = vec![];
            let mut resume: Option<PathBuf> = None;
            for (key, value) in flags {
                if key == "resume" {
                    resume = Some(PathBuf::from(value));
                } else {
                    overrides.push((key, value));
                }
            }
            let cfg = resolve_config(pos.first().map(Path::new), &overrides, env_seed)?;
            let dir = cmd_pretrain(&cfg, resume.as_deref())?;
            println!("run complete: {}", dir.display());
            Ok(())
        }
        "eval" => {
            let (pos, flags) = parse_flags(&args[1..], &[])?;
            let dir = pos
                .first()
                .ok_or_else(|| Error::Config("eval needs a run directory".into()))?;
            let dir = Path::new(dir);
            let mut what = None;
            let mut checkpoint: Option<PathBuf> = None;
            let mut overrides = vec![];
            for (key, value) in flags {
                match key.as_str() {
                    "what" => what = Some(value),
                    "checkpoint" => checkpoint = Some(PathBuf::from(value)),
                    _ => overrides.push((key, value)),
                }
            }
            let what = what.ok_or_else(|| {
                Error::Config("eval requires --what mlm|rtd|probe|electra-mlm".into())
            })?;
            let cfg = load_run_config(dir, &overrides, env_seed)?;
            let rows = cmd_eval(&cfg, dir, &what, checkpoint.as_deref())?;
            for row in &rows {
                println!("{} {} {:.5e}", row.step, row.metric, row.value);
            }
            Ok(())
        }
        "flops" => {
            let (pos, flags) = parse_flags(&args[1..], &["csv"])?;
            if pos.len() > 1 {
                return Err(Error::Config("flops takes at most one config file".into()));
            }
            let mut csv = false;
            let mut overrides = vec![];
            for (key, value) in flags {
                if key == "csv" {
                    csv = true;
                } else {
                    overrides.push((key, value));
                }
            }
            let cfg = resolve_config(pos.first().map(Path::new), &overrides, env_seed)?;
            let report = cmd_flops(&cfg)?;
            if csv {
                print!("{}", flops_csv(&report));
            } else {
                print!("{}", report.render_text());
            }
            Ok(())
        }
        "curves" => {
            let (pos, flags) = parse_flags(&args[1..], &[])?;
            if pos.is_empty() {
                return Err(Error::Config("curves needs at least one run directory".into()));
            }
            let mut out = PathBuf::from("curves.csv");
            let mut overrides = vec![];
            for (key, value) in flags {
                if key == "out" {
                    out = PathBuf::from(value);
                } else {
                    overrides.push((key, value));
                }
            }
            let dirs: Vec<PathBuf> = pos.iter().map(PathBuf::from).collect();
            let rows = cmd_curves(&dirs, &out, &overrides)?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(())
        }
        "help" | "--help" | "-h" => {
            print!("{}", usage());
            Ok(())
        }
        other => Err(Error::Config(format!(
            "unknown subcommand `{other}`; expected pretrain, eval, flops, curves, or help"
        ))),
    }
}

/// Full command-line entry: returns the process exit code (0 success,
/// 2 usage or configuration error, 1 runtime failure).
pub fn run(args: &[String]) -> i32 {
    let env_seed = std::env::var("RTD_SEED").ok();
    match dispatch(args, env_seed.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// Overrides shrinking the default run to a fraction of a second.
    fn tiny_overrides(dir: &Path, extra: &[(&str, &str)]) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = [
            ("out_dir", dir.to_str().unwrap()),
            ("layers", "1"),
            ("hidden", "6"),
            ("ffn", "6"),
            ("heads", "2"),
            ("embed", "3"),
            ("max_seq", "16"),
            ("gen_mult", "0.5"),
            ("vocab_cap", "16"),
            ("steps", "4"),
            ("batch", "2"),
            ("seq_len", "8"),
            ("warmup", "2"),
            ("corpus_vocab", "8"),
            ("corpus_len", "2000"),
            ("milestones", "2"),
            ("eval_batches", "2"),
            ("probe_train", "4"),
            ("probe_test", "4"),
            ("probe_epochs", "3"),
            ("probe_seq_len", "8"),
            ("probe_frozen", "true"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        kv.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        kv
    }

    #[test]
    fn defaults_render_and_reparse_to_the_same_config() {
        let cfg = default_config();
        let text = cfg.to_kv_text();
        let mut back = default_config();
        back.seed = 999;
        apply_config_text(&mut back, &text).unwrap();
        assert_eq!(cfg, back);
        // Every key renders exactly once.
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut cfg = default_config();
        let err = cfg.set("bogus_knob", "3").unwrap_err();
        assert!(matches!(&err, Error::Config(msg) if msg.contains("bogus_knob")), "{err}");
        let err = apply_config_text(&mut cfg, "layers = 2\nbogus_knob = 1\n").unwrap_err();
        assert!(matches!(&err, Error::Config(msg) if msg.contains("bogus_knob")), "{err}");
        let err = cfg.set("steps", "abc").unwrap_err();
        assert!(matches!(&err, Error::Config(msg) if msg.contains("steps")), "{err}");
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let dir = tempdir().unwrap();
        let file = dir.path().join("run.conf");
        fs::write(&file, "seed = 5\nsteps = 7\n").unwrap();
        let from_file = resolve_config(Some(&file), &[], None).unwrap();
        assert_eq!((from_file.seed, from_file.steps), (5, 7));
        let with_env = resolve_config(Some(&file), &[], Some("9")).unwrap();
        assert_eq!(with_env.seed, 9);
        let flags = vec![("seed".to_string(), "12".to_string())];
        let with_flag = resolve_config(Some(&file), &flags, Some("9")).unwrap();
        assert_eq!(with_flag.seed, 12);
        assert!(matches!(resolve_config(Some(&file), &[], Some("x")), Err(Error::Config(_))));
    }

    #[test]
    fn variant_and_corpus_names_are_validated() {
        let mut cfg = default_config();
        cfg.variant = "nosuch".into();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(&err, Error::Config(msg) if msg.contains("nosuch")), "{err}");
        cfg.variant = "two-stage".into();
        assert!(cfg.validate().is_err(), "two-stage needs gen_mult = 1");
        cfg.gen_mult = 1.0;
        cfg.validate().unwrap();
        cfg.corpus = "tarball".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_variant_exits_with_usage_code() {
        let dir = tempdir().unwrap();
        let mut args = vec!["pretrain".to_string()];
        for (k, v) in tiny_overrides(dir.path(), &[("variant", "nosuch")]) {
            args.push(format!("--{k}"));
            args.push(v);
        }
        assert_eq!(run(&args), 2);
        assert_eq!(run(&["frobnicate".to_string()]), 2);
    }

    #[test]
    fn zero_step_run_writes_init_checkpoint_and_header_only_metrics() {
        let dir = tempdir().unwrap();
        let overrides = tiny_overrides(dir.path(), &[("steps", "0")]);
        let cfg = resolve_config(None, &overrides, None).unwrap();
        let run_dir = cmd_pretrain(&cfg, None).unwrap();
        let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
        assert_eq!(metrics, "step,mlm_loss,disc_loss,combined,lr,cumulative_flops,wallclock_s\n");
        let (params, opt) = load_checkpoint(&run_dir.join(FINAL_CKPT)).unwrap();
        assert_eq!(opt.step, 0);
        assert_eq!(params.config.layers, 1);
        // The echoed config names the run directory and reparses cleanly.
        let echoed = load_run_config(&run_dir, &[], None).unwrap();
        assert_eq!(echoed.out_dir, run_dir.display().to_string());
        assert_eq!(echoed.steps, 0);
        let vocab = Vocab::from_lines(&fs::read_to_string(run_dir.join("vocab.txt")).unwrap())
            .unwrap();
        assert!(vocab.size() >= 4);
    }

    #[test]
    fn same_config_and_seed_reproduce_byte_identical_metrics() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let cfg_a =
            resolve_config(None, &tiny_overrides(dir_a.path(), &[]), None).unwrap();
        let cfg_b =
            resolve_config(None, &tiny_overrides(dir_b.path(), &[]), None).unwrap();
        let run_a = cmd_pretrain(&cfg_a, None).unwrap();
        let run_b = cmd_pretrain(&cfg_b, None).unwrap();
        let bytes_a = fs::read(run_a.join("metrics.csv")).unwrap();
        let bytes_b = fs::read(run_b.join("metrics.csv")).unwrap();
        assert!(!bytes_a.is_empty());
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn milestones_match_the_training_log_exactly() {
        let dir = tempdir().unwrap();
        let cfg = resolve_config(None, &tiny_overrides(dir.path(), &[]), None).unwrap();
        let run_dir = cmd_pretrain(&cfg, None).unwrap();
        let info = read_runinfo(&run_dir).unwrap();
        assert_eq!(info.variant, "electra");
        assert_eq!(info.milestones.len(), 2);
        assert_eq!(info.milestones[0].step, 2);
        assert_eq!(info.milestones[1].step, 4);
        assert_eq!(info.milestones[1].file, FINAL_CKPT);
        assert!(run_dir.join("milestone-1.ckpt").exists());
        let metrics = read_metrics(&run_dir).unwrap();
        for m in &info.milestones {
            let row = metrics.iter().find(|r| r.step == m.step - 1).unwrap();
            assert_eq!(row.flops, m.flops, "milestone {} flops", m.idx);
        }
        // Milestone checkpoints carry the optimizer step they were saved at.
        let (_, opt) = load_checkpoint(&run_dir.join("milestone-1.ckpt")).unwrap();
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn resumed_run_matches_the_uninterrupted_checkpoint_bytes() {
        let full_dir = tempdir().unwrap();
        let half_dir = tempdir().unwrap();
        // The interrupted run must anneal toward the same horizon, so the
        // schedule total is pinned in both configs.
        let full_cfg = resolve_config(
            None,
            &tiny_overrides(full_dir.path(), &[("steps", "6"), ("total", "6")]),
            None,
        )
        .unwrap();
        let full_run = cmd_pretrain(&full_cfg, None).unwrap();

        let half_cfg = resolve_config(
            None,
            &tiny_overrides(half_dir.path(), &[("steps", "3"), ("total", "6")]),
            None,
        )
        .unwrap();
        let half_run = cmd_pretrain(&half_cfg, None).unwrap();
        let resumed_cfg = resolve_config(
            None,
            &tiny_overrides(half_dir.path(), &[("steps", "6"), ("total", "6")]),
            None,
        )
        .unwrap();
        let resumed_run =
            cmd_pretrain(&resumed_cfg, Some(&half_run.join(FINAL_CKPT))).unwrap();
        let full_bytes = fs::read(full_run.join(FINAL_CKPT)).unwrap();
        let resumed_bytes = fs::read(resumed_run.join(FINAL_CKPT)).unwrap();
        assert_eq!(full_bytes, resumed_bytes);
    }

    #[test]
    fn eval_appends_deterministic_rows_and_rejects_unknown_metrics() {
        let dir = tempdir().unwrap();
        let cfg = resolve_config(None, &tiny_overrides(dir.path(), &[]), None).unwrap();
        let run_dir = cmd_pretrain(&cfg, None).unwrap();
        let loaded = load_run_config(&run_dir, &[], None).unwrap();
        let first = cmd_eval(&loaded, &run_dir, "mlm", None).unwrap();
        let second = cmd_eval(&loaded, &run_dir, "mlm", None).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].metric, "masked_lm_accuracy");
        assert_eq!(first[0].step, 4);
        let eval_text = fs::read_to_string(run_dir.join("eval.csv")).unwrap();
        let lines: Vec<&str> = eval_text.lines().collect();
        assert_eq!(lines.len(), 3, "header plus two appended rows");
        assert_eq!(lines[0], "step,metric,value");
        assert_eq!(lines[1], lines[2]);
        let err = cmd_eval(&loaded, &run_dir, "nosuch", None).unwrap_err();
        assert!(matches!(&err, Error::Config(msg) if msg.contains("nosuch")), "{err}");
    }

    #[test]
    fn rtd_probe_and_combined_prediction_metrics_are_in_range() {
        let dir = tempdir().unwrap();
        let cfg = resolve_config(None, &tiny_overrides(dir.path(), &[]), None).unwrap();
        let run_dir = cmd_pretrain(&cfg, None).unwrap();
        let loaded = load_run_config(&run_dir, &[], None).unwrap();
        let rtd = cmd_eval(&loaded, &run_dir, "rtd", None).unwrap();
        assert_eq!(rtd.len(), 3);
        let probe = cmd_eval(&loaded, &run_dir, "probe", None).unwrap();
        assert_eq!(probe.len(), 2);
        let combined = cmd_eval(&loaded, &run_dir, "electra-mlm", None).unwrap();
        assert_eq!(combined.len(), 1);
        for row in rtd.iter().chain(&probe).chain(&combined) {
            assert!((0.0..=1.0).contains(&row.value), "{}: {}", row.metric, row.value);
        }
    }

    #[test]
    fn curves_joins_runs_on_a_shared_milestone_grid() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let cfg_a = resolve_config(None, &tiny_overrides(dir_a.path(), &[]), None).unwrap();
        let cfg_b =
            resolve_config(None, &tiny_overrides(dir_b.path(), &[("seed", "2")]), None).unwrap();
        let run_a = cmd_pretrain(&cfg_a, None).unwrap();
        let run_b = cmd_pretrain(&cfg_b, None).unwrap();
        let out = dir_a.path().join("curves.csv");
        let rows = cmd_curves(&[run_a.clone(), run_b.clone()], &out, &[]).unwrap();
        assert_eq!(rows, 4);
        let text = fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "variant,seed,cumulative_flops,probe_accuracy,disc_loss,mlm_loss");
        assert_eq!(lines.len(), 5);
        // Per run, milestones appear in increasing-FLOPs order.
        let fields: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
        assert!(fields.iter().all(|f| f.len() == 6));
        assert_eq!(fields[0][1], "1");
        assert_eq!(fields[2][1], "2");
        assert!(fields[0][2].parse::<u64>().unwrap() < fields[1][2].parse::<u64>().unwrap());
    }

    #[test]
    fn curves_rejects_mismatched_milestone_grids() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let cfg_a = resolve_config(None, &tiny_overrides(dir_a.path(), &[]), None).unwrap();
        let cfg_b = resolve_config(
            None,
            &tiny_overrides(dir_b.path(), &[("milestones", "4"), ("seed", "2")]),
            None,
        )
        .unwrap();
        let run_a = cmd_pretrain(&cfg_a, None).unwrap();
        let run_b = cmd_pretrain(&cfg_b, None).unwrap();
        let out = dir_a.path().join("curves.csv");
        let err = cmd_curves(&[run_a.clone(), run_b.clone()], &out, &[]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("mismatched milestones"), "{msg}");
        assert!(msg.contains(&run_b.display().to_string()), "{msg}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn curves_reports_a_missing_milestone_checkpoint() {
        let dir = tempdir().unwrap();
        let cfg = resolve_config(None, &tiny_overrides(dir.path(), &[]), None).unwrap();
        let run_dir = cmd_pretrain(&cfg, None).unwrap();
        fs::remove_file(run_dir.join("milestone-1.ckpt")).unwrap();
        let out = dir.path().join("curves.csv");
        let err = cmd_curves(&[run_dir.clone()], &out, &[]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("milestone-1.ckpt"), "{msg}");
    }

    #[test]
    fn flops_report_renders_text_and_csv() {
        let dir = tempdir().unwrap();
        let cfg = resolve_config(None, &tiny_overrides(dir.path(), &[]), None).unwrap();
        let report = cmd_flops(&cfg).unwrap();
        assert_eq!(report.variant, "electra");
        let text = report.render_text();
        assert!(text.contains("matmul-share"));
        let csv = flops_csv(&report);
        assert!(csv.starts_with("section,label,flops\n"));
        assert!(csv.lines().any(|l| l.starts_with("total,train_step,")));
    }

    #[test]
    fn flag_parser_handles_values_equals_and_booleans() {
        let args: Vec<String> = ["runs/a", "--what", "mlm", "--probe-epochs=5", "--csv"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (pos, flags) = parse_flags(&args, &["csv"]).unwrap();
        assert_eq!(pos, vec!["runs/a"]);
        assert_eq!(
            flags,
            vec![
                ("what".to_string(), "mlm".to_string()),
                ("probe_epochs".to_string(), "5".to_string()),
                ("csv".to_string(), "true".to_string()),
            ]
        );
        let dangling: Vec<String> = ["--steps".to_string()].to_vec();
        assert!(matches!(parse_flags(&dangling, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn two_stage_and_adversarial_runs_produce_artifacts() {
        for (variant, extra) in [
            ("two-stage", vec![("variant", "two-stage"), ("gen_mult", "1"), ("steps", "2")]),
            ("adversarial", vec![("variant", "adversarial"), ("steps", "2")]),
        ] {
            let dir = tempdir().unwrap();
            let cfg = resolve_config(None, &tiny_overrides(dir.path(), &extra), None).unwrap();
            let run_dir = cmd_pretrain(&cfg, None).unwrap();
            let info = read_runinfo(&run_dir).unwrap();
            assert_eq!(info.variant, variant);
            let metrics = read_metrics(&run_dir).unwrap();
            let expected = if variant == "two-stage" { 4 } else { 2 };
            assert_eq!(metrics.len(), expected);
            assert!(run_dir.join(FINAL_CKPT).exists());
        }
    }
}
