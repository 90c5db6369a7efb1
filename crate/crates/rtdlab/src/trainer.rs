//! Optimization and the training algorithms: the joint loop over the
//! combined objective, the two-stage procedure (generator first, weight
//! copy, then frozen-generator detection training), and adversarial
//! REINFORCE generator training; plus checkpointing and the metrics log.
//!
//! Determinism contract: every stochastic decision of step `s` is drawn
//! from the counter-based stream `(seed, s, purpose)`, and batch order is
//! fixed up front, so a run can be stopped, checkpointed, resumed, and
//! still produce bit-identical parameters and logs.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;

use crate::corpus::{make_batches, Vocab};
use crate::corruption::{apply_mask, sample_mask_positions, CorruptionRecord};
use crate::encoder::backward::{mlm_head_backward, score_head_backward, tower_backward};
use crate::encoder::forward::{forward_cached, mlm_logits_cached, score_head};
use crate::encoder::{
    init_params, sigmoid, softplus, GradStore, ModelConfig, ModelParams, ParamId, ParamMeta,
    Owner, TowerKind,
};
use crate::flopcount::{train_step_flops, two_stage_phase_one_flops};
use crate::objectives::{
    build_step_record, disc_term, loss_gradients, mask_rows, mlm_loss, LossReport, LossSpec,
    Variant,
};
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

/// Optimizer hyperparameters. `total = 0` means "derive from the run
/// length" when the training loop constructs its optimizer state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerHp {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear learning-rate warmup from zero to `peak_lr`.
    pub warmup: u64,
    /// Step at which the linear decay reaches zero.
    pub total: u64,
}

impl Default for OptimizerHp {
    fn default() -> Self {
        OptimizerHp {
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup: 100,
            total: 0,
        }
    }
}

impl OptimizerHp {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr.is_finite()
            && self.peak_lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Adam moments plus the step counter and schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: GradStore,
    pub v: GradStore,
    /// Completed optimizer steps; the next step is `step + 1`.
    pub step: u64,
    pub hp: OptimizerHp,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, hp: OptimizerHp) -> OptimizerState {
        OptimizerState {
            m: GradStore::zeros_like(&params.store),
            v: GradStore::zeros_like(&params.store),
            step: 0,
            hp,
        }
    }
}

/// Piecewise-linear schedule with knots at 0, `warmup`, and `total`:
/// `peak * min(step / warmup, 1 - (step - warmup) / (total - warmup))`,
/// clamped to [0, peak].
pub fn learning_rate(hp: &OptimizerHp, step: u64) -> f64 {
    let s = step as f64;
    let ramp = if hp.warmup == 0 { 1.0 } else { (s / hp.warmup as f64).min(1.0) };
    let decay = if hp.total <= hp.warmup {
        1.0
    } else {
        1.0 - (s - hp.warmup as f64) / (hp.total - hp.warmup) as f64
    };
    hp.peak_lr * ramp.min(decay).clamp(0.0, 1.0)
}

/// One Adam step with decoupled weight decay over every parameter the
/// filter admits. Decay applies only to `ParamKind::Weight` tensors.
/// Returns the learning rate used. A non-finite gradient aborts with a
/// diagnostic naming the parameter, before anything is mutated.
pub fn optimizer_step_filtered(
    params: &mut ModelParams,
    grads: &GradStore,
    state: &mut OptimizerState,
    train: impl Fn(ParamId, &ParamMeta) -> bool,
) -> Result<f64> {
    let plan: Vec<(ParamId, bool)> = params
        .store
        .iter()
        .filter(|(id, meta, _)| train(*id, meta))
        .map(|(id, meta, _)| (id, meta.decay()))
        .collect();
    for (id, _) in &plan {
        if let Some(bad) = grads.tensor(*id).iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {bad} in parameter {}",
                params.store.meta(*id).name
            )));
        }
    }
    let hp = state.hp;
    let t = state.step + 1;
    let lr = learning_rate(&hp, t);
    let bc1 = 1.0 - hp.beta1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - hp.beta2.powi(t.min(i32::MAX as u64) as i32);
    for (id, decay) in plan {
        let g = grads.tensor(id);
        state.m.tensor_mut(id).zip_mut_with(g, |m, &g| *m = hp.beta1 * *m + (1.0 - hp.beta1) * g);
        state
            .v
            .tensor_mut(id)
            .zip_mut_with(g, |v, &g| *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g);
        let m = state.m.tensor(id);
        let v = state.v.tensor(id);
        let w = params.store.tensor_mut(id);
        for ((i, j), wv) in w.indexed_iter_mut() {
            let mhat = m[[i, j]] / bc1;
            let vhat = v[[i, j]] / bc2;
            let mut update = mhat / (vhat.sqrt() + hp.eps);
            if decay {
                update += hp.weight_decay * *wv;
            }
            *wv -= lr * update;
        }
    }
    state.step = t;
    Ok(lr)
}

/// [`optimizer_step_filtered`] over every parameter.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &GradStore,
    state: &mut OptimizerState,
) -> Result<f64> {
    optimizer_step_filtered(params, grads, state, |_, _| true)
}

/// Everything one pretraining run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossSpec,
    /// Optimizer steps; the two-stage algorithm runs this many per phase.
    pub steps: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub opt: OptimizerHp,
    /// Record wall-clock seconds per step. Off by default so logs are
    /// bit-reproducible across machines.
    pub log_wallclock: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, loss: LossSpec) -> TrainConfig {
        TrainConfig {
            model,
            loss,
            steps: 2000,
            batch: 16,
            seq_len: 64,
            seed: 0,
            opt: OptimizerHp::default(),
            log_wallclock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.opt.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.seq_len < 2 || self.seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "sequence length {} outside 2..={}",
                self.seq_len, self.model.max_seq
            )));
        }
        if !(self.loss.mask_frac > 0.0 && self.loss.mask_frac < 1.0) {
            return Err(Error::Config(format!(
                "mask fraction must lie strictly between 0 and 1, got {}",
                self.loss.mask_frac
            )));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub report: LossReport,
    pub lr: f64,
    pub cumulative_flops: u64,
    pub wallclock_s: f64,
}

/// Per-step records of one run, with the run identity needed to plot it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunLog {
    pub variant: String,
    pub seed: u64,
    pub rows: Vec<LogRow>,
}

/// The metrics CSV: six-significant-digit scientific notation so logs are
/// comparable across platforms at the recorded precision.
pub fn render_metrics_csv(log: &TrainRunLog) -> String {
    use std::fmt::Write;
    let mut out = String::from("step,mlm_loss,disc_loss,combined,lr,cumulative_flops,wallclock_s\n");
    for row in &log.rows {
        writeln!(
            out,
            "{},{:.5e},{:.5e},{:.5e},{:.5e},{},{:.5e}",
            row.step,
            row.report.mlm_loss,
            row.report.disc_loss,
            row.report.combined,
            row.lr,
            row.cumulative_flops,
            row.wallclock_s
        )
        .expect("string write");
    }
    out
}

/// Final state and log of a pretraining run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub log: TrainRunLog,
}

/// Copies every structurally shared tensor of the generator tower onto the
/// discriminator tower: input projection, all blocks, output projection.
/// Requires equal tower sizes.
pub fn copy_generator_to_discriminator(params: &mut ModelParams) -> Result<()> {
    if params.config.gen_mult != 1.0 {
        return Err(Error::Config(
            "two-stage requires equal sizes: weight copy needs gen_mult = 1".into(),
        ));
    }
    let gen = params.tower_ids(TowerKind::Generator).clone();
    let disc = params.tower_ids(TowerKind::Discriminator).clone();
    let mut pairs: Vec<(ParamId, ParamId)> = vec![
        (gen.input_proj.w, disc.input_proj.w),
        (gen.input_proj.b, disc.input_proj.b),
        (gen.out_proj.w, disc.out_proj.w),
        (gen.out_proj.b, disc.out_proj.b),
    ];
    for (gb, db) in gen.blocks.iter().zip(&disc.blocks) {
        pairs.extend([
            (gb.wq.w, db.wq.w),
            (gb.wq.b, db.wq.b),
            (gb.wk.w, db.wk.w),
            (gb.wk.b, db.wk.b),
            (gb.wv.w, db.wv.w),
            (gb.wv.b, db.wv.b),
            (gb.wo.w, db.wo.w),
            (gb.wo.b, db.wo.b),
            (gb.ln1.gain, db.ln1.gain),
            (gb.ln1.bias, db.ln1.bias),
            (gb.ffn_in.w, db.ffn_in.w),
            (gb.ffn_in.b, db.ffn_in.b),
            (gb.ffn_out.w, db.ffn_out.w),
            (gb.ffn_out.b, db.ffn_out.b),
            (gb.ln2.gain, db.ln2.gain),
            (gb.ln2.bias, db.ln2.bias),
        ]);
    }
    for (src, dst) in pairs.drain(..) {
        let tensor = params.store.tensor(src).clone();
        params.store.tensor_mut(dst).assign(&tensor);
    }
    Ok(())
}

/// Rewards and learned-baseline values at each masked position of one
/// adversarial step, batch-major with positions ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialState {
    /// `-log D` where the sample equals the original, `-log(1 - D)`
    /// otherwise.
    pub rewards: Vec<f64>,
    pub baselines: Vec<f64>,
}

impl AdversarialState {
    pub fn advantages(&self) -> Vec<f64> {
        self.rewards.iter().zip(&self.baselines).map(|(r, b)| r - b).collect()
    }
}

/// REINFORCE generator term: descent gradient of
/// `-(1/k) Σ (R - b) log p_G(sample)` with the reward and baseline treated
/// as constants, plus the baseline's own cross-entropy toward `e^{-R}`
/// (gradient confined to the baseline vector; the trunk is severed).
/// Returns the diagnostic generator cross-entropy against the original
/// tokens, the masked-position count, and the reward/baseline values. The
/// diagnostic's gradient is not taken: the generator learns from rewards
/// only.
pub(crate) fn reinforce_term(
    params: &ModelParams,
    record: &CorruptionRecord,
    weight: f64,
    grads: &mut GradStore,
) -> Result<(f64, usize, AdversarialState)> {
    let gen = forward_cached(params, TowerKind::Generator, &record.masked.ids)?;
    let n = gen.n;
    let rows = mask_rows(&record.mask, n);
    let count = rows.len();
    if count == 0 {
        return Err(Error::Shape("adversarial step needs at least one masked position".into()));
    }
    let (logits, head) = mlm_logits_cached(params, TowerKind::Generator, &gen.hidden, &rows);
    let disc = forward_cached(params, TowerKind::Discriminator, &record.corrupt.ids)?;
    let disc_scores = score_head(params, params.layout.disc_score, &disc.hidden);
    let base_scores = score_head(params, params.layout.baseline, &gen.hidden);

    let inv = weight / count as f64;
    let mut dlogits = Array2::zeros(logits.dim());
    let mut d_base = vec![0.0; gen.hidden.nrows()];
    let mut rewards = Vec::with_capacity(count);
    let mut baselines = Vec::with_capacity(count);
    let mut diagnostic = 0.0;
    for (a, &r) in rows.iter().enumerate() {
        let (i, t) = (r / n, r % n);
        let sampled = record.corrupt.ids[[i, t]];
        let original = record.originals.ids[[i, t]];
        let s = disc_scores[r];
        let reward = if sampled == original { softplus(-s) } else { softplus(s) };
        let baseline = softplus(-base_scores[r]);
        let advantage = reward - baseline;
        let row = logits.row(a);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        diagnostic += lse - row[original as usize];
        for v in 0..row.len() {
            let one_hot = if v == sampled as usize { 1.0 } else { 0.0 };
            dlogits[[a, v]] = advantage * ((row[v] - lse).exp() - one_hot) * inv;
        }
        // Baseline cross-entropy toward e^{-R}; optimal where b equals R.
        // The reward is a constant here (no gradient into the
        // discriminator from this term).
        d_base[r] = (sigmoid(base_scores[r]) - (-reward).exp()) * inv;
        rewards.push(reward);
        baselines.push(baseline);
    }
    let mut d_hidden = Array2::zeros(gen.hidden.dim());
    mlm_head_backward(params, TowerKind::Generator, &head, &dlogits, &mut d_hidden, grads);
    // The baseline head trains alone: its hidden-state gradient lands in a
    // scratch buffer so the generator trunk never learns from it.
    let mut severed = Array2::zeros(gen.hidden.dim());
    score_head_backward(
        params,
        params.layout.baseline,
        &gen.hidden,
        &d_base,
        &mut severed,
        grads,
    );
    tower_backward(params, &gen, &d_hidden, grads);
    Ok((diagnostic / count as f64, count, AdversarialState { rewards, baselines }))
}

/// One adversarial training step on a fixed record: REINFORCE generator
/// gradient plus λ times the standard detection loss for the
/// discriminator. The report's `mlm_loss` is the diagnostic generator
/// cross-entropy (logged, never differentiated).
pub fn adversarial_step(
    params: &ModelParams,
    record: &CorruptionRecord,
    lambda: f64,
) -> Result<(LossReport, GradStore, AdversarialState)> {
    let mut grads = GradStore::zeros_like(&params.store);
    let (diag, k, state) = reinforce_term(params, record, 1.0, &mut grads)?;
    let (d, dk) = disc_term(params, record, crate::objectives::DiscScope::All, lambda, &mut grads)?;
    let report = LossReport {
        mlm_loss: diag,
        disc_loss: d,
        combined: diag + lambda * d,
        lambda,
        mlm_count: k,
        disc_count: dk,
        scored_count: dk,
    };
    Ok((report, grads, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Algo {
    Joint,
    TwoStage,
    Adversarial,
}

fn algo_name(algo: Algo, loss: &LossSpec) -> String {
    match algo {
        Algo::Joint => loss.variant.name().to_string(),
        Algo::TwoStage => "two-stage".to_string(),
        Algo::Adversarial => "adversarial".to_string(),
    }
}

fn run_training(
    cfg: &TrainConfig,
    algo: Algo,
    ids: &[u32],
    vocab: &Vocab,
    resume: Option<(ModelParams, OptimizerState)>,
    mut hook: impl FnMut(&LogRow, &ModelParams, &OptimizerState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if vocab.size() != cfg.model.vocab {
        return Err(Error::Config(format!(
            "vocabulary of size {} does not match the model's configured vocab {}",
            vocab.size(),
            cfg.model.vocab
        )));
    }
    let total_steps = match algo {
        Algo::TwoStage => {
            if cfg.model.gen_mult != 1.0 {
                return Err(Error::Config(
                    "two-stage requires equal sizes: set gen_mult = 1 so the generator \
                     weights can be copied onto the discriminator"
                        .into(),
                ));
            }
            2 * cfg.steps
        }
        _ => cfg.steps,
    };
    let (mut params, mut opt) = match resume {
        Some((p, o)) => {
            if p.config != cfg.model {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different model configuration".into(),
                ));
            }
            (p, o)
        }
        None => {
            let params = init_params(&cfg.model, cfg.seed)?;
            let mut hp = cfg.opt;
            if hp.total == 0 {
                hp.total = total_steps.max(1);
            }
            let opt = OptimizerState::new(&params, hp);
            (params, opt)
        }
    };
    let batches = make_batches(ids, cfg.seq_len, cfg.batch, cfg.seed)?;
    if batches.is_empty() {
        return Err(Error::Corpus(format!(
            "corpus of {} tokens yields no full {}x{} batch",
            ids.len(),
            cfg.batch,
            cfg.seq_len
        )));
    }
    // Per-step FLOPs are constant within a phase; closed forms keep
    // cumulative counts resume-consistent.
    let n = cfg.seq_len;
    let joint_flops = match algo {
        Algo::Joint => train_step_flops(&cfg.model, n, cfg.batch, cfg.loss.variant.name())?,
        Algo::Adversarial => train_step_flops(&cfg.model, n, cfg.batch, "adversarial")?,
        Algo::TwoStage => train_step_flops(&cfg.model, n, cfg.batch, "two-stage")?,
    }
    .train_step;
    let phase1_flops = two_stage_phase_one_flops(&cfg.model, n, cfg.batch)?.train_step;

    let mut log = TrainRunLog { variant: algo_name(algo, &cfg.loss), seed: cfg.seed, rows: vec![] };
    let electra_record_spec = || {
        let mut spec = cfg.loss.clone();
        spec.variant = Variant::Electra;
        spec
    };
    for step in opt.step..total_steps {
        let started = Instant::now();
        let batch = &batches[(step % batches.len() as u64) as usize];
        let mut rng = stream(cfg.seed, step, Purpose::MaskPositions);
        let phase_two = algo == Algo::TwoStage && step >= cfg.steps;
        if algo == Algo::TwoStage && step == cfg.steps {
            copy_generator_to_discriminator(&mut params)?;
        }
        let (report, grads) = match algo {
            Algo::Joint => loss_gradients(&cfg.loss, &params, batch, vocab, &mut rng)?,
            Algo::Adversarial => {
                let record =
                    build_step_record(&electra_record_spec(), &params, batch, vocab, &mut rng)?;
                let (report, grads, _) = adversarial_step(&params, &record, cfg.loss.lambda)?;
                (report, grads)
            }
            Algo::TwoStage if !phase_two => {
                let mask =
                    sample_mask_positions(batch.batch(), cfg.seq_len, cfg.loss.mask_frac, &mut rng);
                let masked = apply_mask(batch, &mask, vocab)?;
                let (loss, count, grads) =
                    mlm_loss(&params, TowerKind::Generator, &masked, &mask, batch)?;
                let report = LossReport {
                    mlm_loss: loss,
                    disc_loss: 0.0,
                    combined: loss,
                    lambda: cfg.loss.lambda,
                    mlm_count: count,
                    disc_count: 0,
                    scored_count: count,
                };
                (report, grads)
            }
            Algo::TwoStage => {
                let record =
                    build_step_record(&electra_record_spec(), &params, batch, vocab, &mut rng)?;
                let mut grads = GradStore::zeros_like(&params.store);
                let (d, dk) = disc_term(
                    &params,
                    &record,
                    crate::objectives::DiscScope::All,
                    cfg.loss.lambda,
                    &mut grads,
                )?;
                let report = LossReport {
                    mlm_loss: 0.0,
                    disc_loss: d,
                    combined: cfg.loss.lambda * d,
                    lambda: cfg.loss.lambda,
                    mlm_count: 0,
                    disc_count: dk,
                    scored_count: dk,
                };
                (report, grads)
            }
        };
        let lr = if phase_two {
            // Generator-exclusive parameters are frozen in phase two; the
            // shared embeddings keep training through the discriminator.
            optimizer_step_filtered(&mut params, &grads, &mut opt, |_, meta| {
                meta.owner != Owner::Generator
            })?
        } else {
            optimizer_step(&mut params, &grads, &mut opt)?
        };
        let cumulative_flops = match algo {
            Algo::TwoStage => {
                let p1_steps = (step + 1).min(cfg.steps);
                let p2_steps = (step + 1).saturating_sub(cfg.steps);
                p1_steps * phase1_flops + p2_steps * joint_flops
            }
            _ => (step + 1) * joint_flops,
        };
        let wallclock_s =
            if cfg.log_wallclock { started.elapsed().as_secs_f64() } else { 0.0 };
        let row = LogRow { step, report, lr, cumulative_flops, wallclock_s };
        hook(&row, &params, &opt)?;
        log.rows.push(row);
    }
    Ok(TrainOutcome { params, opt, log })
}

/// Joint pretraining: per step, fresh masks, generator forward, sampling,
/// corruption, the variant's loss, one optimizer step over all parameters.
/// Pass a resume pair to continue a checkpointed run; the hook sees every
/// logged row as it is produced.
pub fn joint_pretrain(
    cfg: &TrainConfig,
    ids: &[u32],
    vocab: &Vocab,
    resume: Option<(ModelParams, OptimizerState)>,
    hook: impl FnMut(&LogRow, &ModelParams, &OptimizerState) -> Result<()>,
) -> Result<TrainOutcome> {
    run_training(cfg, Algo::Joint, ids, vocab, resume, hook)
}

/// Two-stage pretraining at equal tower sizes: `steps` of generator MLM,
/// an exact weight copy onto the discriminator, then `steps` of detection
/// training with every generator-exclusive parameter frozen.
pub fn two_stage_pretrain(
    cfg: &TrainConfig,
    ids: &[u32],
    vocab: &Vocab,
    resume: Option<(ModelParams, OptimizerState)>,
    hook: impl FnMut(&LogRow, &ModelParams, &OptimizerState) -> Result<()>,
) -> Result<TrainOutcome> {
    run_training(cfg, Algo::TwoStage, ids, vocab, resume, hook)
}

/// Adversarial pretraining: the joint loop with the generator's MLM
/// gradient replaced by the REINFORCE term of [`adversarial_step`].
pub fn adversarial_pretrain(
    cfg: &TrainConfig,
    ids: &[u32],
    vocab: &Vocab,
    resume: Option<(ModelParams, OptimizerState)>,
    hook: impl FnMut(&LogRow, &ModelParams, &OptimizerState) -> Result<()>,
) -> Result<TrainOutcome> {
    run_training(cfg, Algo::Adversarial, ids, vocab, resume, hook)
}

const CHECKPOINT_MAGIC: &str = "rtdlab-checkpoint v1";

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e)
}

/// Writes parameters and optimizer state as a versioned container: a text
/// manifest (name, shape, element type, byte offset) followed by raw
/// little-endian IEEE-754 arrays. The write is atomic: a temporary file in
/// the same directory is renamed into place.
pub fn save_checkpoint(path: &Path, params: &ModelParams, opt: &OptimizerState) -> Result<()> {
    use std::fmt::Write;
    let c = &params.config;
    let mut header = format!("{CHECKPOINT_MAGIC}\n");
    writeln!(
        header,
        "config layers={} hidden={} ffn={} heads={} embed={} vocab={} max_seq={} gen_mult={}",
        c.layers, c.hidden, c.ffn, c.heads, c.embed, c.vocab, c.max_seq, c.gen_mult
    )
    .expect("string write");
    let hp = &opt.hp;
    writeln!(
        header,
        "opt step={} peak_lr={} beta1={} beta2={} eps={} weight_decay={} warmup={} total={}",
        opt.step, hp.peak_lr, hp.beta1, hp.beta2, hp.eps, hp.weight_decay, hp.warmup, hp.total
    )
    .expect("string write");

    let mut entries: Vec<(String, &Array2<f64>)> = Vec::new();
    for (id, meta, tensor) in params.store.iter() {
        entries.push((meta.name.clone(), tensor));
        entries.push((format!("adam.m.{}", meta.name), opt.m.tensor(id)));
        entries.push((format!("adam.v.{}", meta.name), opt.v.tensor(id)));
    }
    writeln!(header, "tensors {}", entries.len()).expect("string write");
    let mut offset = 0u64;
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in &entries {
        let (rows, cols) = tensor.dim();
        writeln!(header, "{name} {rows} {cols} f64 {offset}").expect("string write");
        for &x in tensor.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        offset += (rows * cols * 8) as u64;
    }
    writeln!(header, "payload {}", payload.len()).expect("string write");

    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = path.file_name().map(|f| f.to_os_string()).ok_or_else(|| {
        Error::Checkpoint(format!("checkpoint path {} has no file name", path.display()))
    })?;
    tmp.push(".tmp");
    let tmp_path = dir.join(tmp);
    std::fs::write(&tmp_path, &bytes).map_err(io_err)?;
    std::fs::rename(&tmp_path, path).map_err(io_err)?;
    Ok(())
}

fn bad_ckpt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_kv<'a>(line: &'a str, prefix: &str) -> Result<Vec<(&'a str, &'a str)>> {
    let rest = line
        .strip_prefix(prefix)
        .ok_or_else(|| bad_ckpt(format!("expected a {prefix:?} line, got {line:?}")))?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| bad_ckpt(format!("malformed key=value pair {kv:?}")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| bad_ckpt(format!("cannot parse {key}={value}")))
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = bytes.get(*pos..).ok_or_else(|| bad_ckpt("truncated header"))?;
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad_ckpt("truncated header"))?;
    let line =
        std::str::from_utf8(&rest[..end]).map_err(|_| bad_ckpt("header is not valid text"))?;
    *pos += end + 1;
    Ok(line)
}

/// Reads a checkpoint written by [`save_checkpoint`]. Any malformed or
/// truncated content produces an error and nothing is returned partially
/// loaded.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, OptimizerState)> {
    let bytes = std::fs::read(path).map_err(io_err)?;
    let mut pos = 0usize;

    if next_line(&bytes, &mut pos)? != CHECKPOINT_MAGIC {
        return Err(bad_ckpt("unrecognized checkpoint magic or version"));
    }
    let mut config = ModelConfig {
        layers: 0,
        hidden: 0,
        ffn: 0,
        heads: 0,
        embed: 0,
        vocab: 0,
        max_seq: 0,
        gen_mult: 0.0,
    };
    for (k, v) in parse_kv(next_line(&bytes, &mut pos)?, "config ")? {
        match k {
            "layers" => config.layers = parse_num(k, v)?,
            "hidden" => config.hidden = parse_num(k, v)?,
            "ffn" => config.ffn = parse_num(k, v)?,
            "heads" => config.heads = parse_num(k, v)?,
            "embed" => config.embed = parse_num(k, v)?,
            "vocab" => config.vocab = parse_num(k, v)?,
            "max_seq" => config.max_seq = parse_num(k, v)?,
            "gen_mult" => config.gen_mult = parse_num(k, v)?,
            _ => return Err(bad_ckpt(format!("unknown config key {k}"))),
        }
    }
    let mut step = 0u64;
    let mut hp = OptimizerHp::default();
    for (k, v) in parse_kv(next_line(&bytes, &mut pos)?, "opt ")? {
        match k {
            "step" => step = parse_num(k, v)?,
            "peak_lr" => hp.peak_lr = parse_num(k, v)?,
            "beta1" => hp.beta1 = parse_num(k, v)?,
            "beta2" => hp.beta2 = parse_num(k, v)?,
            "eps" => hp.eps = parse_num(k, v)?,
            "weight_decay" => hp.weight_decay = parse_num(k, v)?,
            "warmup" => hp.warmup = parse_num(k, v)?,
            "total" => hp.total = parse_num(k, v)?,
            _ => return Err(bad_ckpt(format!("unknown opt key {k}"))),
        }
    }
    let count: usize = {
        let line = next_line(&bytes, &mut pos)?;
        let rest =
            line.strip_prefix("tensors ").ok_or_else(|| bad_ckpt("missing tensors line"))?;
        parse_num("tensors", rest)?
    };
    let mut manifest = std::collections::HashMap::new();
    for _ in 0..count {
        let line = next_line(&bytes, &mut pos)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 || parts[3] != "f64" {
            return Err(bad_ckpt(format!("malformed tensor entry {line:?}")));
        }
        let rows: usize = parse_num("rows", parts[1])?;
        let cols: usize = parse_num("cols", parts[2])?;
        let offset: u64 = parse_num("offset", parts[4])?;
        if manifest.insert(parts[0].to_string(), (rows, cols, offset)).is_some() {
            return Err(bad_ckpt(format!("duplicate tensor entry {:?}", parts[0])));
        }
    }
    let payload_len: usize = {
        let line = next_line(&bytes, &mut pos)?;
        let rest =
            line.strip_prefix("payload ").ok_or_else(|| bad_ckpt("missing payload line"))?;
        parse_num("payload", rest)?
    };
    let payload = bytes.get(pos..).ok_or_else(|| bad_ckpt("truncated payload"))?;
    if payload.len() != payload_len {
        return Err(bad_ckpt(format!(
            "payload is {} bytes, header promises {payload_len}",
            payload.len()
        )));
    }

    let read_tensor = |name: &str, expect: (usize, usize)| -> Result<Array2<f64>> {
        let &(rows, cols, offset) = manifest
            .get(name)
            .ok_or_else(|| bad_ckpt(format!("checkpoint is missing tensor {name}")))?;
        if (rows, cols) != expect {
            return Err(bad_ckpt(format!(
                "tensor {name} has shape {rows}x{cols}, model expects {}x{}",
                expect.0, expect.1
            )));
        }
        let start = offset as usize;
        let len = rows * cols * 8;
        let raw = payload
            .get(start..start + len)
            .ok_or_else(|| bad_ckpt(format!("tensor {name} runs past the payload")))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|_| bad_ckpt(format!("tensor {name} shape mismatch")))
    };

    let mut params = init_params(&config, 0)?;
    let mut opt = OptimizerState::new(&params, hp);
    opt.step = step;
    let names: Vec<(ParamId, String, (usize, usize))> = params
        .store
        .iter()
        .map(|(id, meta, t)| (id, meta.name.clone(), t.dim()))
        .collect();
    for (id, name, dim) in names {
        params.store.tensor_mut(id).assign(&read_tensor(&name, dim)?);
        opt.m.tensor_mut(id).assign(&read_tensor(&format!("adam.m.{name}"), dim)?);
        opt.v.tensor_mut(id).assign(&read_tensor(&format!("adam.v.{name}"), dim)?);
    }
    Ok((params, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_corpus, encode, MarkovOrder, SyntheticCorpusSpec, TokenBatch};
    use crate::corruption::build_corruption;
    use crate::corruption::MaskSpec;
    use crate::encoder::{generator_probs, randomize_params, encoder_forward};
    use crate::objectives::loss_for_record;
    use ndarray::Array2;

    // Generator width stays >= 3: layer norm over a 2-vector keeps only
    // the sign of its input and starves the tower of gradients.
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

    fn tiny_corpus() -> (Vec<u32>, Vocab) {
        let spec = SyntheticCorpusSpec {
            vocab_size: 8,
            order: MarkovOrder::One,
            matrix_seed: 5,
            length: 4000,
        };
        let text = synthetic_corpus(&spec, 7);
        let vocab = Vocab::build(&text, 11).unwrap();
        let ids = encode(&text, &vocab);
        (ids, vocab)
    }

    fn tiny_train_config(steps: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(tiny(), LossSpec::new(Variant::Electra));
        cfg.steps = steps;
        cfg.batch = 2;
        cfg.seq_len = 8;
        cfg.seed = 3;
        cfg.opt.warmup = 10;
        cfg
    }

    fn no_hook(_: &LogRow, _: &ModelParams, _: &OptimizerState) -> Result<()> {
        Ok(())
    }

    #[test]
    fn schedule_is_piecewise_linear_with_exact_knots() {
        let hp = OptimizerHp { peak_lr: 0.5, warmup: 100, total: 500, ..OptimizerHp::default() };
        assert_eq!(learning_rate(&hp, 0), 0.0);
        assert_eq!(learning_rate(&hp, 100), 0.5);
        assert_eq!(learning_rate(&hp, 500), 0.0);
        assert!((learning_rate(&hp, 50) - 0.25).abs() < 1e-15);
        assert!((learning_rate(&hp, 300) - 0.25).abs() < 1e-15);
        assert_eq!(learning_rate(&hp, 600), 0.0);
        let no_warmup = OptimizerHp { warmup: 0, ..hp };
        assert_eq!(learning_rate(&no_warmup, 0), 0.5);
    }

    #[test]
    fn first_step_is_signed_lr_within_epsilon() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 1).unwrap();
        let mut opt = OptimizerState::new(
            &params,
            OptimizerHp { weight_decay: 0.0, warmup: 1, total: 10, ..OptimizerHp::default() },
        );
        let id = params.store.id_by_name("disc.score").unwrap();
        let before = params.store.tensor(id).clone();
        let mut grads = GradStore::zeros_like(&params.store);
        grads.tensor_mut(id).fill(0.3);
        let lr = optimizer_step(&mut params, &grads, &mut opt).unwrap();
        assert_eq!(lr, opt.hp.peak_lr);
        let expected = -lr * 0.3 / (0.3 + opt.hp.eps);
        for (after, b) in params.store.tensor(id).iter().zip(before.iter()) {
            assert!((after - b - expected).abs() < 1e-15);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn nan_gradient_aborts_naming_the_parameter() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 2).unwrap();
        let mut opt = OptimizerState::new(&params, OptimizerHp::default());
        let id = params.store.id_by_name("disc.score").unwrap();
        let before = params.store.tensor(id).clone();
        let mut grads = GradStore::zeros_like(&params.store);
        grads.tensor_mut(id)[[0, 0]] = f64::NAN;
        let err = optimizer_step(&mut params, &grads, &mut opt).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("disc.score"), "{msg}"),
            other => panic!("expected a numeric error, got {other:?}"),
        }
        // Nothing was mutated before the abort.
        assert_eq!(params.store.tensor(id), &before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn weight_decay_touches_weights_only() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 4).unwrap();
        let snapshot: Vec<Array2<f64>> =
            params.store.iter().map(|(_, _, t)| t.clone()).collect();
        let mut opt = OptimizerState::new(
            &params,
            OptimizerHp { warmup: 1, total: 10, ..OptimizerHp::default() },
        );
        let grads = GradStore::zeros_like(&params.store);
        let lr = optimizer_step(&mut params, &grads, &mut opt).unwrap();
        let wd = opt.hp.weight_decay;
        let metas: Vec<_> = params.store.iter().map(|(id, m, _)| (id, m.decay())).collect();
        for (id, decays) in metas {
            let now = params.store.tensor(id);
            let was = &snapshot[id.0];
            if decays {
                for (a, b) in now.iter().zip(was.iter()) {
                    assert_eq!(*a, b - lr * (wd * b));
                }
            } else {
                assert_eq!(now, was);
            }
        }
    }

    #[test]
    fn zero_steps_leaves_initialization_untouched() {
        let (ids, vocab) = tiny_corpus();
        let cfg = tiny_train_config(0);
        let out = joint_pretrain(&cfg, &ids, &vocab, None, no_hook).unwrap();
        let fresh = init_params(&cfg.model, cfg.seed).unwrap();
        for (id, _, t) in fresh.store.iter() {
            assert_eq!(out.params.store.tensor(id), t);
        }
        assert!(out.log.rows.is_empty());
        let csv = render_metrics_csv(&out.log);
        assert_eq!(csv, "step,mlm_loss,disc_loss,combined,lr,cumulative_flops,wallclock_s\n");
    }

    #[test]
    fn same_seed_gives_bit_identical_runs() {
        let (ids, vocab) = tiny_corpus();
        let cfg = tiny_train_config(12);
        let a = joint_pretrain(&cfg, &ids, &vocab, None, no_hook).unwrap();
        let b = joint_pretrain(&cfg, &ids, &vocab, None, no_hook).unwrap();
        assert_eq!(a.log, b.log);
        for (id, _, _) in a.params.store.iter() {
            assert_eq!(a.params.store.tensor(id), b.params.store.tensor(id));
        }
        assert_eq!(render_metrics_csv(&a.log), render_metrics_csv(&b.log));
    }

    #[test]
    fn flops_strictly_increase_and_loss_decreases_on_synthetic_chain() {
        let (ids, vocab) = tiny_corpus();
        let mut cfg = tiny_train_config(300);
        cfg.opt.warmup = 20;
        let out = joint_pretrain(&cfg, &ids, &vocab, None, no_hook).unwrap();
        assert_eq!(out.log.rows.len(), 300);
        for pair in out.log.rows.windows(2) {
            assert!(pair[1].cumulative_flops > pair[0].cumulative_flops);
            assert_eq!(pair[1].step, pair[0].step + 1);
        }
        let first: f64 =
            out.log.rows[..5].iter().map(|r| r.report.combined).sum::<f64>() / 5.0;
        let last: f64 =
            out.log.rows[295..].iter().map(|r| r.report.combined).sum::<f64>() / 5.0;
        assert!(last < first, "combined loss went from {first} to {last}");
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_match_uninterrupted_run() {
        let (ids, vocab) = tiny_corpus();
        let full_cfg = tiny_train_config(12);
        let full = joint_pretrain(&full_cfg, &ids, &vocab, None, no_hook).unwrap();

        // The interrupted run must anneal toward the same horizon, so the
        // schedule total is pinned rather than derived from its 6 steps.
        let mut half_cfg = tiny_train_config(6);
        half_cfg.opt.total = 12;
        let half = joint_pretrain(&half_cfg, &ids, &vocab, None, no_hook).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&path, &half.params, &half.opt).unwrap();
        let (params, opt) = load_checkpoint(&path).unwrap();
        for (id, _, t) in half.params.store.iter() {
            assert_eq!(params.store.tensor(id), t);
            assert_eq!(opt.m.tensor(id), half.opt.m.tensor(id));
            assert_eq!(opt.v.tensor(id), half.opt.v.tensor(id));
        }
        assert_eq!(opt.step, 6);
        assert_eq!(opt.hp, half.opt.hp);

        let resumed =
            joint_pretrain(&full_cfg, &ids, &vocab, Some((params, opt)), no_hook).unwrap();
        for (id, _, t) in full.params.store.iter() {
            assert_eq!(resumed.params.store.tensor(id), t);
        }
        assert_eq!(resumed.log.rows, full.log.rows[6..].to_vec());
    }

    #[test]
    fn corrupted_or_truncated_checkpoints_error_cleanly() {
        let (_, _) = tiny_corpus();
        let cfg = tiny();
        let params = init_params(&cfg, 8).unwrap();
        let opt = OptimizerState::new(&params, OptimizerHp::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &params, &opt).unwrap();

        let good = std::fs::read(&path).unwrap();
        let garbled = path.with_extension("bad");
        let mut broken = good.clone();
        broken[0] = b'X';
        std::fs::write(&garbled, &broken).unwrap();
        assert!(matches!(load_checkpoint(&garbled), Err(Error::Checkpoint(_))));

        let truncated = path.with_extension("short");
        std::fs::write(&truncated, &good[..good.len() - 16]).unwrap();
        assert!(matches!(load_checkpoint(&truncated), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn generator_copy_makes_towers_agree_everywhere() {
        let mut cfg = tiny();
        cfg.gen_mult = 1.0;
        let mut params = init_params(&cfg, 13).unwrap();
        randomize_params(&mut params, 14, 0.3);
        copy_generator_to_discriminator(&mut params).unwrap();
        let ids = Array2::from_shape_fn((2, 7), |(i, j)| ((i * 7 + j) % cfg.vocab) as u32);
        let g = encoder_forward(&params, TowerKind::Generator, &ids).unwrap();
        let d = encoder_forward(&params, TowerKind::Discriminator, &ids).unwrap();
        assert_eq!(g.data, d.data);

        let mut small = init_params(&tiny(), 1).unwrap();
        assert!(matches!(copy_generator_to_discriminator(&mut small), Err(Error::Config(_))));
    }

    #[test]
    fn two_stage_freezes_generator_exclusives_in_phase_two() {
        let (ids, vocab) = tiny_corpus();
        let mut cfg = tiny_train_config(8);
        cfg.model.gen_mult = 1.0;
        let mut snapshot: Vec<(ParamId, Array2<f64>)> = Vec::new();
        let steps = cfg.steps;
        let out = two_stage_pretrain(&cfg, &ids, &vocab, None, |row, params, _| {
            if row.step == steps {
                snapshot = params
                    .store
                    .iter()
                    .filter(|(_, m, _)| m.owner == Owner::Generator)
                    .map(|(id, _, t)| (id, t.clone()))
                    .collect();
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(out.log.rows.len(), 16);
        assert!(!snapshot.is_empty());
        for (id, frozen) in snapshot {
            assert_eq!(out.params.store.tensor(id), &frozen);
        }
        // Phase-one rows train the generator only; phase-two rows score
        // the detection loss only.
        assert!(out.log.rows[..8].iter().all(|r| r.report.disc_count == 0));
        assert!(out.log.rows[8..].iter().all(|r| r.report.mlm_count == 0));

        let unequal = tiny_train_config(4);
        let err = two_stage_pretrain(&unequal, &ids, &vocab, None, no_hook).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("two-stage requires equal sizes")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn zero_advantage_gives_zero_generator_gradient() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 17).unwrap();
        randomize_params(&mut params, 18, 0.3);
        // D = 1/2 everywhere makes every reward ln 2; a zeroed baseline
        // head scores ln 2 as well, so every advantage is exactly zero.
        params.store.tensor_mut(params.layout.disc_score).fill(0.0);
        params.store.tensor_mut(params.layout.baseline).fill(0.0);
        let batch = TokenBatch {
            ids: Array2::from_shape_fn((2, 8), |(i, j)| (3 + (i * 8 + j) % 8) as u32),
        };
        let mask = MaskSpec { positions: vec![vec![1, 5], vec![2, 6]], k: 2 };
        let record = build_corruption(&batch, &mask, &[4, 5, 6, 7]).unwrap();
        let mut grads = GradStore::zeros_like(&params.store);
        let (_, _, state) = reinforce_term(&params, &record, 1.0, &mut grads).unwrap();
        assert!(state.advantages().iter().all(|&a| a == 0.0));
        for (id, meta, _) in params.store.iter() {
            if id == params.layout.baseline {
                continue;
            }
            assert!(
                grads.tensor(id).iter().all(|&g| g == 0.0),
                "{} moved under zero advantage",
                meta.name
            );
        }
    }

    #[test]
    fn reinforce_expectation_matches_exact_reward_gradient() {
        let mut cfg = tiny();
        cfg.vocab = 5;
        let mut params = init_params(&cfg, 19).unwrap();
        randomize_params(&mut params, 20, 0.4);
        let batch = TokenBatch { ids: Array2::from_shape_vec((1, 4), vec![3, 4, 2, 3]).unwrap() };
        let mask = MaskSpec { positions: vec![vec![2]], k: 1 };
        let masked = {
            let mut ids = batch.ids.clone();
            ids[[0, 2]] = crate::corpus::MASK;
            TokenBatch { ids }
        };
        let hidden = encoder_forward(&params, TowerKind::Generator, &masked.ids).unwrap();
        let probs = generator_probs(&params, &hidden, &[2]);

        // Per-candidate rewards from the discriminator on each possible
        // corruption; constants with respect to the generator.
        let mut rewards = [0.0; 5];
        for v in 0..5u32 {
            let record = build_corruption(&batch, &mask, &[v]).unwrap();
            let disc =
                forward_cached(&params, TowerKind::Discriminator, &record.corrupt.ids).unwrap();
            let s = score_head(&params, params.layout.disc_score, &disc.hidden)[2];
            rewards[v as usize] = if v == batch.ids[[0, 2]] { softplus(-s) } else { softplus(s) };
        }

        // Exact ascent gradient of E[R] = sum_v p_v R_v, seeded through the
        // tied softmax: dJ/dlogit_v = p_v (R_v - E[R]).
        let expected_reward: f64 =
            (0..5).map(|v| probs[[0, v]] * rewards[v]).sum();
        let mut exact = GradStore::zeros_like(&params.store);
        {
            let gen = forward_cached(&params, TowerKind::Generator, &masked.ids).unwrap();
            let (_, head) = mlm_logits_cached(&params, TowerKind::Generator, &gen.hidden, &[2]);
            let mut dlogits = Array2::zeros((1, 5));
            for v in 0..5 {
                dlogits[[0, v]] = probs[[0, v]] * (rewards[v] - expected_reward);
            }
            let mut d_hidden = Array2::zeros(gen.hidden.dim());
            mlm_head_backward(
                &params,
                TowerKind::Generator,
                &head,
                &dlogits,
                &mut d_hidden,
                &mut exact,
            );
            tower_backward(&params, &gen, &d_hidden, &mut exact);
        }

        // REINFORCE expectation: sum over candidates of p_v times the
        // sampled descent gradient; must equal the negated exact ascent
        // gradient (the baseline contribution cancels in expectation).
        let mut expectation = GradStore::zeros_like(&params.store);
        for v in 0..5u32 {
            let record = build_corruption(&batch, &mask, &[v]).unwrap();
            let mut g = GradStore::zeros_like(&params.store);
            reinforce_term(&params, &record, 1.0, &mut g).unwrap();
            expectation.add_scaled(&g, probs[[0, v as usize]]);
        }
        for (id, meta, _) in params.store.iter() {
            if id == params.layout.baseline {
                continue;
            }
            for (e, x) in expectation.tensor(id).iter().zip(exact.tensor(id).iter()) {
                assert!(
                    (e + x).abs() <= 1e-10,
                    "{}: expectation {e} vs exact ascent {x}",
                    meta.name
                );
            }
        }
    }

    #[test]
    fn adversarial_run_is_deterministic_and_logs_diagnostics() {
        let (ids, vocab) = tiny_corpus();
        let cfg = tiny_train_config(10);
        let a = adversarial_pretrain(&cfg, &ids, &vocab, None, no_hook).unwrap();
        let b = adversarial_pretrain(&cfg, &ids, &vocab, None, no_hook).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.variant, "adversarial");
        assert!(a.log.rows.iter().all(|r| r.report.mlm_loss > 0.0));
        assert!(a.log.rows.iter().all(|r| r.report.disc_count == 16));
    }

    #[test]
    fn adversarial_step_rewards_follow_the_sampled_case() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 23).unwrap();
        randomize_params(&mut params, 24, 0.3);
        let batch = TokenBatch {
            ids: Array2::from_shape_fn((1, 6), |(_, j)| (3 + j % 8) as u32),
        };
        let mask = MaskSpec { positions: vec![vec![0, 3]], k: 2 };
        // First sample matches the original, second does not.
        let samples = [batch.ids[[0, 0]], batch.ids[[0, 3]] + 1];
        let record = build_corruption(&batch, &mask, &samples).unwrap();
        let (report, _, state) = adversarial_step(&params, &record, 50.0).unwrap();
        let disc = forward_cached(&params, TowerKind::Discriminator, &record.corrupt.ids).unwrap();
        let scores = score_head(&params, params.layout.disc_score, &disc.hidden);
        assert_eq!(state.rewards[0], softplus(-scores[0]));
        assert_eq!(state.rewards[1], softplus(scores[3]));
        assert_eq!(report.combined, report.mlm_loss + 50.0 * report.disc_loss);
    }

    #[test]
    fn metrics_csv_uses_six_significant_digits() {
        let log = TrainRunLog {
            variant: "electra".into(),
            seed: 1,
            rows: vec![LogRow {
                step: 3,
                report: LossReport {
                    mlm_loss: 2.3978952727983707,
                    disc_loss: 0.6931471805599453,
                    combined: 37.055254955780965,
                    lambda: 50.0,
                    mlm_count: 4,
                    disc_count: 16,
                    scored_count: 16,
                },
                lr: 5e-4,
                cumulative_flops: 123456,
                wallclock_s: 0.0,
            }],
        };
        let csv = render_metrics_csv(&log);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,mlm_loss,disc_loss,combined,lr,cumulative_flops,wallclock_s"
        );
        assert_eq!(
            lines.next().unwrap(),
            "3,2.39790e0,6.93147e-1,3.70553e1,5.00000e-4,123456,0.00000e0"
        );
    }

    #[test]
    fn resumed_two_stage_crosses_the_phase_boundary_identically() {
        let (ids, vocab) = tiny_corpus();
        let mut cfg = tiny_train_config(5);
        cfg.model.gen_mult = 1.0;
        let full = two_stage_pretrain(&cfg, &ids, &vocab, None, no_hook).unwrap();

        // Stop after phase one (5 steps), resume across the copy boundary.
        let mut caught = None;
        let steps = cfg.steps;
        two_stage_pretrain(&cfg, &ids, &vocab, None, |row, params, opt| {
            if row.step + 1 == steps {
                caught = Some((params.clone(), opt.clone()));
            }
            Ok(())
        })
        .unwrap();
        let resumed =
            two_stage_pretrain(&cfg, &ids, &vocab, caught, no_hook).unwrap();
        for (id, _, t) in full.params.store.iter() {
            assert_eq!(resumed.params.store.tensor(id), t);
        }
        assert_eq!(resumed.log.rows, full.log.rows[5..].to_vec());
    }

    #[test]
    fn loss_report_on_fixed_record_survives_checkpoint_roundtrip() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 29).unwrap();
        randomize_params(&mut params, 30, 0.3);
        let opt = OptimizerState::new(&params, OptimizerHp::default());
        let batch = TokenBatch {
            ids: Array2::from_shape_fn((2, 8), |(i, j)| (3 + (i + j) % 8) as u32),
        };
        let mask = MaskSpec { positions: vec![vec![1, 4], vec![0, 6]], k: 2 };
        let record = build_corruption(&batch, &mask, &[5, 6, 7, 8]).unwrap();
        let spec = LossSpec::new(Variant::Electra);
        let before = loss_for_record(&spec, &params, &record).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        save_checkpoint(&path, &params, &opt).unwrap();
        let (restored, _) = load_checkpoint(&path).unwrap();
        let after = loss_for_record(&spec, &restored, &record).unwrap();
        assert_eq!(before, after);
    }
}
