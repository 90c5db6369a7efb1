//! Scratch calibration harness for the ordering-sensitive acceptance
//! criteria. Not part of the deliverable; run with
//! `cargo run --release --example calib -- <ordering|twostage|adv>`.

use std::time::Instant;

use rtdlab::corpus::{encode, make_batches, synthetic_corpus, two_regime_corpus, MarkovOrder, SyntheticCorpusSpec, TwoRegimeSpec, Vocab};
use rtdlab::encoder::{ModelConfig, TowerKind};
use rtdlab::evaluation::{downstream_probe, masked_lm_accuracy, two_regime_probe_task};
use rtdlab::flopcount::train_step_flops;
use rtdlab::objectives::{LossSpec, Variant};
use rtdlab::rng::{stream, Purpose};
use rtdlab::trainer::{
    adversarial_pretrain, joint_pretrain, two_stage_pretrain, OptimizerHp, TrainConfig,
};

fn corpus_spec() -> TwoRegimeSpec {
    let vs = std::env::var("CAL_VOCAB").ok().and_then(|v| v.parse().ok()).unwrap_or(12);
    let ms = std::env::var("CAL_MSEED").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    TwoRegimeSpec { vocab_size: vs, matrix_seed: ms, length: 60_000, segment_len: 24 }
}

fn model(vocab: usize, gen_mult: f64) -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 16,
        ffn: 32,
        heads: 2,
        embed: 8,
        vocab,
        max_seq: 16,
        gen_mult,
    }
}

fn build_markov_data() -> (Vocab, Vec<u32>) {
    let spec = SyntheticCorpusSpec {
        vocab_size: 8,
        order: MarkovOrder::Two,
        matrix_seed: 1,
        length: 60_000,
    };
    let text = synthetic_corpus(&spec, 0);
    let vocab = Vocab::build(&text, 64).unwrap();
    let ids = encode(&text, &vocab);
    (vocab, ids)
}

fn build_data() -> (Vocab, Vec<u32>) {
    let text = two_regime_corpus(&corpus_spec(), 0);
    let vocab = Vocab::build(&text, 64).unwrap();
    let ids = encode(&text, &vocab);
    (vocab, ids)
}

fn train_cfg(variant: Variant, vocab: usize, steps: u64, seed: u64, gen_mult: f64) -> TrainConfig {
    let mut tc = TrainConfig::new(model(vocab, gen_mult), LossSpec::new(variant));
    tc.steps = steps;
    tc.batch = 8;
    tc.seq_len = 12;
    tc.seed = seed;
    tc.opt = OptimizerHp { warmup: 50, total: 0, ..OptimizerHp::default() };
    tc
}

fn big_model(vocab: usize, gen_mult: f64) -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 64,
        ffn: 128,
        heads: 4,
        embed: 32,
        vocab,
        max_seq: 16,
        gen_mult,
    }
}

fn cal_opt() -> OptimizerHp {
    let eps: f64 = std::env::var("CAL_EPS")
        .ok()
        .and_then(|x| x.parse().ok())
        .unwrap_or(1e-6);
    OptimizerHp { warmup: 100, total: 0, eps, ..OptimizerHp::default() }
}

fn ordering(seeds: u64, base_steps: u64, epochs: usize, frozen: bool) {
    let (vocab, ids) = build_data();
    let v = vocab.size();
    let budget =
        base_steps * train_step_flops(&big_model(v, 0.5), 16, 16, "electra").unwrap().train_step;
    let variants: Vec<(&str, Variant, f64)> = vec![
        ("electra", Variant::Electra, 0.5),
        ("all-tokens-mlm", Variant::AllTokensMlm, 0.5),
        ("replace-mlm", Variant::ReplaceMlm, 0.5),
        ("electra15", Variant::Electra15, 0.5),
        ("bert", Variant::Bert, 1.0),
    ];
    let mut means = vec![];
    let mut per_seed: Vec<Vec<f64>> = vec![];
    for (name, variant, gm) in &variants {
        let per_step = train_step_flops(&big_model(v, *gm), 16, 16, name).unwrap().train_step;
        let steps = (budget / per_step).max(1);
        let t0 = Instant::now();
        let mut accs = vec![];
        for seed in 0..seeds {
            let mut tc = TrainConfig::new(big_model(v, *gm), LossSpec::new(*variant));
            tc.steps = steps;
            tc.batch = 16;
            tc.seq_len = 16;
            tc.seed = seed;
            tc.opt = cal_opt();
            let out = joint_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap();
            let tower = if *name == "bert" { TowerKind::Generator } else { TowerKind::Discriminator };
            let task =
                two_regime_probe_task(&corpus_spec(), &vocab, 96, 96, 16, frozen, seed).unwrap();
            let probe = downstream_probe(&out.params, tower, &task, epochs, seed).unwrap();
            print!(" [tr {:.2}]", probe.train_accuracy);
            accs.push(probe.test_accuracy);
        }
        println!();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!(
            "{name:<16} steps {steps:>5}  mean {mean:.4}  accs {:?}  ({:.1}s)",
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        );
        means.push((name.to_string(), mean));
        per_seed.push(accs);
    }
    let e = &per_seed[0];
    let b = &per_seed[4];
    let wins = e.iter().zip(b).filter(|(a, c)| a > c).count();
    println!("electra > bert in {wins}/{seeds} paired seeds");
    println!("means: {means:?}");
}

fn twostage(seeds: u64, phase_steps: u64) {
    let (vocab, ids) = build_data();
    let v = vocab.size();
    let mut ok = 0;
    for seed in 0..seeds {
        let tc = train_cfg(Variant::Electra, v, phase_steps, seed, 1.0);
        let out = two_stage_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap();
        let first = out.log.rows[phase_steps as usize].report.disc_loss;
        let later = out.log.rows[(phase_steps + 100) as usize].report.disc_loss;
        let drop = first - later;
        println!("seed {seed}: disc at switch {first:.4}, +100 {later:.4}, drop {drop:+.4}");
        ok += (later < first) as usize;
    }
    println!("improved in {ok}/{seeds} seeds");
}

fn adv(seeds: u64, steps: u64) {
    let (vocab, ids) = build_markov_data();
    let v = vocab.size();
    let mut ok = 0;
    for seed in 0..seeds {
        let tc = train_cfg(Variant::Electra, v, steps, seed, 1.0);
        let mle = joint_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap();
        let advr = adversarial_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap();
        let batches = make_batches(&ids, 12, 8, 999).unwrap();
        let eval: Vec<_> = batches.into_iter().take(24).collect();
        let mut r1 = stream(seed, 0, Purpose::Eval);
        let mut r2 = stream(seed, 0, Purpose::Eval);
        let acc_mle = masked_lm_accuracy(&mle.params, &eval, 0.15, &vocab, &mut r1).unwrap();
        let acc_adv = masked_lm_accuracy(&advr.params, &eval, 0.15, &vocab, &mut r2).unwrap();
        let lm = mle.log.rows.last().unwrap().report.mlm_loss;
        let la = advr.log.rows.last().unwrap().report.mlm_loss;
        println!("seed {seed}: mle {acc_mle:.4} (loss {lm:.3})  adv {acc_adv:.4} (loss {la:.3})");
        ok += (acc_adv <= acc_mle) as usize;
    }
    println!("adversarial <= mle in {ok}/{seeds} seeds");
}

/// Trains a pure masked-LM (bert variant, full-size generator) and prints the
/// loss trajectory, to confirm the task is learnable by this architecture.
fn mlm(steps: u64, lr: f64) {
    let (vocab, ids) = build_data();
    let v = vocab.size();
    let mut tc = train_cfg(Variant::Bert, v, steps, 0, 1.0);
    tc.opt.peak_lr = lr;
    let out = joint_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap();
    for row in out.log.rows.iter().step_by((steps / 10) as usize) {
        println!("step {:5}  mlm {:.4}", row.step, row.report.mlm_loss);
    }
    let batches = make_batches(&ids, 12, 8, 999).unwrap();
    let eval: Vec<_> = batches.into_iter().take(24).collect();
    let mut r = stream(0, 0, Purpose::Eval);
    let acc = masked_lm_accuracy(&out.params, &eval, 0.15, &vocab, &mut r).unwrap();
    println!("masked accuracy {acc:.4}  (uniform loss {:.4})", (12.0f64).ln());
}

/// ELECTRA vs BERT probe comparison at a given corruption rate.
fn evb(mask: f64, steps: u64, epochs: usize, seeds: u64) {
    let (vocab, ids) = build_data();
    let v = vocab.size();
    let budget = steps * train_step_flops(&big_model(v, 0.5), 16, 16, "electra").unwrap().train_step;
    let mut wins = 0;
    for seed in 0..seeds {
        let mut accs = [0.0f64; 2];
        let egm: f64 = std::env::var("CAL_GM").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5);
        for (i, (name, variant, gm)) in
            [("electra", Variant::Electra, egm), ("bert", Variant::Bert, 1.0)].iter().enumerate()
        {
            let per = train_step_flops(&big_model(v, *gm), 16, 16, name).unwrap().train_step;
            let st = std::env::var("CAL_STEPS")
                .ok()
                .and_then(|x| x.parse().ok())
                .unwrap_or((budget / per).max(1));
            let mut ls = LossSpec::new(*variant);
            ls.mask_frac = mask;
            if let Ok(l) = std::env::var("CAL_LAMBDA") {
                ls.lambda = l.parse().unwrap();
            }
            if std::env::var("CAL_PUREMASK").is_ok() {
                ls.bert.mask = 1.0;
                ls.bert.random = 0.0;
            }
            let mut tc = TrainConfig::new(big_model(v, *gm), ls);
            tc.steps = st;
            tc.batch = 16;
            tc.seq_len = 16;
            tc.seed = seed;
            tc.opt = cal_opt();
            let out = joint_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap();
            let mid = &out.log.rows[out.log.rows.len() / 2];
            println!(
                "  mid: mlm {:.3} disc {:.3}",
                mid.report.mlm_loss, mid.report.disc_loss
            );
            let last = out.log.rows.last().unwrap();
            {
                let init = rtdlab::encoder::init_params(&big_model(v, *gm), seed).unwrap();
                let twg = out.params.tower_ids(TowerKind::Generator);
                let dist = |id: rtdlab::encoder::ParamId| -> f64 {
                    out.params
                        .store
                        .tensor(id)
                        .iter()
                        .zip(init.store.tensor(id).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                };
                let batches = make_batches(&ids, 16, 16, 999).unwrap();
                let eval: Vec<_> = batches.into_iter().take(12).collect();
                let mut r = stream(seed, 0, Purpose::Eval);
                let acc = masked_lm_accuracy(&out.params, &eval, 0.15, &vocab, &mut r).unwrap();
                println!(
                    "  gen: masked-acc {acc:.3}  |d emb| {:.3}  |d gen.wq| {:.3}  |d gen.out| {:.3}",
                    dist(out.params.layout.token_emb),
                    dist(twg.blocks[0].wq.w),
                    dist(twg.out_proj.w)
                );
            }
            let tower = if *name == "bert" { TowerKind::Generator } else { TowerKind::Discriminator };
            let task = two_regime_probe_task(&corpus_spec(), &vocab, 96, 96, 16, false, seed).unwrap();
            let probe = downstream_probe(&out.params, tower, &task, epochs, seed).unwrap();
            accs[i] = probe.test_accuracy;
            println!(
                "seed {seed} {name:<8} steps {st:>5}  mlm {:.3} disc {:.3}  probe tr {:.3} te {:.3}",
                last.report.mlm_loss, last.report.disc_loss, probe.train_accuracy, probe.test_accuracy
            );
        }
        wins += (accs[0] > accs[1]) as u32;
    }
    println!("electra > bert in {wins}/{seeds} seeds");
}

/// Replicates the fine-tuning probe loop with instrumentation: per-epoch
/// train accuracy and gradient norms, to localize why fine-tuning stalls.
fn fnt(pretrain_steps: u64, epochs: usize) {
    use rtdlab::encoder::backward::tower_backward;
    use rtdlab::encoder::forward::forward_cached;
    use rtdlab::encoder::{GradStore, init_params};
    use rtdlab::trainer::{optimizer_step_filtered, OptimizerState};
    let spec = corpus_spec();
    let (vocab, ids) = build_data();
    let v = vocab.size();
    let mut params = if pretrain_steps == 0 {
        init_params(&big_model(v, 0.5), 0).unwrap()
    } else {
        let mut tc = TrainConfig::new(big_model(v, 0.5), LossSpec::new(Variant::Electra));
        tc.steps = pretrain_steps;
        tc.batch = 16;
        tc.seq_len = 16;
        tc.seed = 0;
        tc.opt = cal_opt();
        joint_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap().params
    };
    let task = two_regime_probe_task(&spec, &vocab, 96, 96, 16, false, 0).unwrap();
    let lib_probe = downstream_probe(&params, TowerKind::Discriminator, &task, 100, 0).unwrap();
    println!("downstream_probe: train {:.3}  test {:.3}", lib_probe.train_accuracy, lib_probe.test_accuracy);
    let tower = TowerKind::Discriminator;
    let h = 64usize;
    let n = task.train_ids.ncols();
    let rows = task.train_ids.nrows();
    // head: small random init, plain Adam lr 0.02
    let mut hr = stream(0, u64::MAX, Purpose::Probe);
    let mut w: Vec<f64> = (0..h).map(|_| 0.05 * rtdlab::rng::truncated_normal(&mut hr, 2.0)).collect();
    let mut b = 0.0f64;
    let (mut mw, mut vw) = (vec![0.0f64; h], vec![0.0f64; h]);
    let (mut mb, mut vb, mut t) = (0.0f64, 0.0f64, 0u64);
    let allowed = {
        // same set downstream_probe uses: embeddings + probed tower
        let count = params.store.iter().count();
        let mut al = vec![false; count];
        let tw = params.tower_ids(tower);
        let mut idsv = vec![params.layout.token_emb, params.layout.pos_emb, tw.input_proj.w, tw.input_proj.b];
        for blk in &tw.blocks {
            for l in [blk.wq, blk.wk, blk.wv, blk.wo, blk.ffn_in, blk.ffn_out] {
                idsv.push(l.w);
                idsv.push(l.b);
            }
            idsv.extend([blk.ln1.gain, blk.ln1.bias, blk.ln2.gain, blk.ln2.bias]);
        }
        for id in idsv { al[id.0] = true; }
        al
    };
    let hp = OptimizerHp { warmup: 0, total: 0, eps: 1e-8, ..OptimizerHp::default() };
    let mut opt = OptimizerState::new(&params, hp);
    let train_acc = |params: &rtdlab::encoder::ModelParams, w: &[f64], b: f64| -> f64 {
        let cache = forward_cached(params, tower, &task.train_ids).unwrap();
        let mut hits = 0;
        for r in 0..rows {
            let mut z = b;
            for t_ in 0..n {
                for k in 0..h {
                    z += cache.hidden[[r * n + t_, k]] * w[k] / n as f64;
                }
            }
            hits += ((z > 0.0) == task.train_labels[r]) as i32;
        }
        hits as f64 / rows as f64
    };
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..rows).collect();
        let mut r = stream(0, epoch as u64, Purpose::Probe);
        rtdlab::rng::shuffle(&mut r, &mut order);
        let mut gnorm_acc = 0.0f64;
        for chunk in order.chunks(32.min(rows)) {
            let mut idsm = ndarray::Array2::zeros((chunk.len(), n));
            for (ri, &row) in chunk.iter().enumerate() {
                idsm.row_mut(ri).assign(&task.train_ids.row(row));
            }
            let cache = forward_cached(&params, tower, &idsm).unwrap();
            let mut gw = vec![0.0f64; h];
            let mut gb = 0.0f64;
            let mut dh = ndarray::Array2::zeros(cache.hidden.dim());
            for (ri, &row) in chunk.iter().enumerate() {
                let mut feat = vec![0.0f64; h];
                for t_ in 0..n {
                    for k in 0..h {
                        feat[k] += cache.hidden[[ri * n + t_, k]] / n as f64;
                    }
                }
                let z = b + w.iter().zip(&feat).map(|(a, f)| a * f).sum::<f64>();
                let y = if task.train_labels[row] { 1.0 } else { 0.0 };
                let dz = (1.0 / (1.0 + (-z).exp()) - y) / chunk.len() as f64;
                for k in 0..h {
                    gw[k] += dz * feat[k];
                    for t_ in 0..n {
                        dh[[ri * n + t_, k]] = dz * w[k] / n as f64;
                    }
                }
                gb += dz;
            }
            let mut grads = GradStore::zeros_like(&params.store);
            tower_backward(&params, &cache, &dh, &mut grads);
            gnorm_acc += grads.tensor(params.layout.token_emb).iter().map(|g| g * g).sum::<f64>().sqrt();
            optimizer_step_filtered(&mut params, &grads, &mut opt, |id, _| allowed[id.0]).unwrap();
            // head Adam
            t += 1;
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-6f64);
            let (bc1, bc2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
            for k in 0..h {
                mw[k] = b1 * mw[k] + (1.0 - b1) * gw[k];
                vw[k] = b2 * vw[k] + (1.0 - b2) * gw[k] * gw[k];
                w[k] -= 0.02 * (mw[k] / bc1) / ((vw[k] / bc2).sqrt() + eps);
            }
            mb = b1 * mb + (1.0 - b1) * gb;
            vb = b2 * vb + (1.0 - b2) * gb * gb;
            b -= 0.02 * (mb / bc1) / ((vb / bc2).sqrt() + eps);
        }
        if epoch % 10 == 0 || epoch == epochs - 1 {
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!(
                "epoch {epoch:3}  train {:.3}  |w| {wn:.4}  emb-gnorm {gnorm_acc:.3e}",
                train_acc(&params, &w, b)
            );
        }
    }
}

/// Prints the geometry of mean-pooled probe features for a trained encoder:
/// per-dimension spread, class-centroid separation, and a direct logistic fit.
fn probefeat(cv: usize, steps: u64, seq: usize, probe_len: usize, variant: Variant) {
    let spec = TwoRegimeSpec { vocab_size: cv, matrix_seed: 7, length: 60_000, segment_len: 24 };
    let text = two_regime_corpus(&spec, 0);
    let vocab = Vocab::build(&text, 64).unwrap();
    let ids = encode(&text, &vocab);
    let v = vocab.size();
    let gm = if variant == Variant::Bert { 1.0 } else { 0.5 };
    let mut mc = big_model(v, gm);
    mc.max_seq = probe_len.max(seq).max(16);
    let mut tc = TrainConfig::new(mc, LossSpec::new(variant));
    tc.steps = steps;
    tc.batch = 16;
    tc.seq_len = seq;
    tc.seed = 0;
    tc.opt = OptimizerHp { warmup: 100, total: 0, ..OptimizerHp::default() };
    let out = joint_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap();
    {
        let init = rtdlab::encoder::init_params(&mc, 0).unwrap();
        let mut per: std::collections::BTreeMap<String, f64> = Default::default();
        for (id, meta, _) in out.params.store.iter() {
            let d = out
                .params
                .store
                .tensor(id)
                .iter()
                .zip(init.store.tensor(id).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            *per.entry(format!("{:?}", meta.owner)).or_default() += d;
        }
        println!("per-owner |drift| after {} steps: {per:?}", tc.steps);
    }
    let tower = if variant == Variant::Bert { TowerKind::Generator } else { TowerKind::Discriminator };
    let task = two_regime_probe_task(&spec, &vocab, 96, 96, probe_len, true, 0).unwrap();
    let pool = |idsm: &ndarray::Array2<u32>| -> ndarray::Array2<f64> {
        let (rows, n) = idsm.dim();
        let mut feats = ndarray::Array2::<f64>::zeros((rows, 64));
        for r in 0..rows {
            let one = idsm.slice(ndarray::s![r..r + 1, ..]).to_owned();
            let cache = rtdlab::encoder::forward::forward_cached(&out.params, tower, &one).unwrap();
            for t in 0..n {
                for k in 0..64 {
                    feats[[r, k]] += cache.hidden[[t, k]] / n as f64;
                }
            }
        }
        feats
    };
    let feats = pool(&task.train_ids);
    let test_feats = pool(&task.test_ids);
    println!(
        "raw feats[0][0..4] = {:?}  task.train_ids row0 = {:?}",
        (0..4).map(|k| feats[[0, k]]).collect::<Vec<_>>(),
        (0..8).map(|j| task.train_ids[[0, j]]).collect::<Vec<_>>()
    );
    let (rows, _) = feats.dim();
    let mut c0 = vec![0.0f64; 64];
    let mut c1 = vec![0.0f64; 64];
    let (mut n0, mut n1) = (0.0f64, 0.0f64);
    for r in 0..rows {
        let c = if task.train_labels[r] { (&mut c1, &mut n1) } else { (&mut c0, &mut n0) };
        *c.1 += 1.0;
        for k in 0..64 {
            c.0[k] += feats[[r, k]];
        }
    }
    for k in 0..64 {
        c0[k] /= n0;
        c1[k] /= n1;
    }
    let gap: f64 = (0..64).map(|k| (c1[k] - c0[k]).powi(2)).sum::<f64>().sqrt();
    let mut within = 0.0f64;
    for r in 0..rows {
        let c = if task.train_labels[r] { &c1 } else { &c0 };
        within += (0..64).map(|k| (feats[[r, k]] - c[k]).powi(2)).sum::<f64>();
    }
    within = (within / rows as f64).sqrt();
    let spread: f64 = {
        let mut m = vec![0.0f64; 64];
        for r in 0..rows {
            for k in 0..64 {
                m[k] += feats[[r, k]] / rows as f64;
            }
        }
        let mut s = 0.0;
        for r in 0..rows {
            s += (0..64).map(|k| (feats[[r, k]] - m[k]).powi(2)).sum::<f64>();
        }
        (s / rows as f64).sqrt()
    };
    println!("rows {rows}  centroid gap {gap:.6}  within-class RMS {within:.6}  total RMS spread {spread:.6}");
    // ridge regression toward +-1 targets: closed-form strong linear baseline
    let mut xtx = ndarray::Array2::<f64>::zeros((65, 65));
    let mut xty = vec![0.0f64; 65];
    for r in 0..rows {
        let mut x = vec![1.0f64; 65];
        x[1..].copy_from_slice(feats.row(r).as_slice().unwrap());
        let y = if task.train_labels[r] { 1.0 } else { -1.0 };
        for i in 0..65 {
            xty[i] += x[i] * y;
            for j in 0..65 {
                xtx[[i, j]] += x[i] * x[j];
            }
        }
    }
    for i in 0..65 {
        xtx[[i, i]] += 1e-6;
    }
    // gaussian elimination
    let mut a = xtx.clone();
    let mut bvec = xty.clone();
    for col in 0..65 {
        let piv = (col..65).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        for j in 0..65 {
            let t = a[[col, j]];
            a[[col, j]] = a[[piv, j]];
            a[[piv, j]] = t;
        }
        bvec.swap(col, piv);
        let d = a[[col, col]];
        for j in 0..65 {
            a[[col, j]] /= d;
        }
        bvec[col] /= d;
        for i in 0..65 {
            if i != col {
                let f = a[[i, col]];
                for j in 0..65 {
                    a[[i, j]] -= f * a[[col, j]];
                }
                bvec[i] -= f * bvec[col];
            }
        }
    }
    let score = |f: &ndarray::Array2<f64>, labels: &[bool]| -> f64 {
        let mut hits = 0;
        for r in 0..f.nrows() {
            let mut z = bvec[0];
            for k in 0..64 {
                z += bvec[k + 1] * f[[r, k]];
            }
            hits += ((z > 0.0) == labels[r]) as i32;
        }
        hits as f64 / f.nrows() as f64
    };
    println!(
        "ridge train acc {:.4}  test acc {:.4}",
        score(&feats, &task.train_labels),
        score(&test_feats, &task.test_labels)
    );
}

/// Trains pure MLM on the two-regime corpus at a given scale and reports
/// whether the loss breaks below the uniform plateau (ln 12 = 2.485).
#[allow(clippy::too_many_arguments)]
fn scale(hidden: usize, layers: usize, heads: usize, steps: u64, seq: usize, batch: usize, lr: f64, warmup: u64) {
    let (vocab, ids) = build_data();
    let v = vocab.size();
    let mc = ModelConfig {
        layers,
        hidden,
        ffn: hidden * 2,
        heads,
        embed: hidden / 2,
        vocab: v,
        max_seq: seq.max(16),
        gen_mult: 1.0,
    };
    let mut tc = TrainConfig::new(mc, LossSpec::new(Variant::Bert));
    tc.steps = steps;
    tc.batch = batch;
    tc.seq_len = seq;
    tc.seed = 0;
    tc.opt = OptimizerHp { peak_lr: lr, warmup, total: 0, ..OptimizerHp::default() };
    let out = joint_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap();
    for row in out.log.rows.iter().step_by((steps / 10).max(1) as usize) {
        println!("step {:5}  mlm {:.4}", row.step, row.report.mlm_loss);
    }
    let tail: f64 = out.log.rows.iter().rev().take(50).map(|r| r.report.mlm_loss).sum::<f64>() / 50.0;
    let batches = make_batches(&ids, seq, batch, 999).unwrap();
    let eval: Vec<_> = batches.into_iter().take(24).collect();
    let mut r = stream(0, 0, Purpose::Eval);
    let acc = masked_lm_accuracy(&out.params, &eval, 0.15, &vocab, &mut r).unwrap();
    println!("tail-50 mlm {tail:.4}  masked accuracy {acc:.4}  (uniform {:.4})", (12.0f64).ln());
}

/// Scans matrix seeds and vocab sizes for order-2 corpora whose stationary
/// distribution has a decisively skewed argmax.
fn scan() {
    for vs in [8usize, 12] {
        for ms in 0..30u64 {
            let spec = SyntheticCorpusSpec {
                vocab_size: vs,
                order: MarkovOrder::Two,
                matrix_seed: ms,
                length: 60_000,
            };
            let text = synthetic_corpus(&spec, 0);
            let vocab = Vocab::build(&text, 64).unwrap();
            let ids = encode(&text, &vocab);
            let v = vocab.size();
            let mut uni = vec![0u64; v];
            for &id in &ids {
                uni[id as usize] += 1;
            }
            let best = uni.iter().copied().max().unwrap() as f64 / ids.len() as f64;
            let chance = 1.0 / (v - 3) as f64;
            println!("vocab {vs} seed {ms}: unigram {best:.4} chance {chance:.4} ratio {:.2}", best / chance);
        }
    }
}

/// Empirical ceiling for masked prediction from both neighbors: argmax of
/// the corpus trigram table, evaluated on the corpus itself.
fn gradcheck() {
    use rtdlab::encoder::Owner;
    let (vocab, ids) = build_data();
    let v = vocab.size();
    let mc = big_model(v, 0.5);
    let params = rtdlab::encoder::init_params(&mc, 0).unwrap();
    let batches = make_batches(&ids, 16, 16, 0).unwrap();
    let mut r = stream(0, 0, Purpose::MaskPositions);
    for variant in [Variant::Electra, Variant::ReplaceMlm, Variant::Bert] {
        let ls = LossSpec::new(variant);
        let (rep, grads) =
            rtdlab::objectives::loss_gradients(&ls, &params, &batches[0], &vocab, &mut r).unwrap();
        let mut per: std::collections::BTreeMap<String, f64> = Default::default();
        for (id, meta, _) in params.store.iter() {
            let g = grads.tensor(id);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            *per.entry(format!("{:?}", meta.owner)).or_default() += norm;
        }
        println!(
            "{variant:?}: mlm {:.3} disc {:.3} grad-norm-sums {:?}",
            rep.mlm_loss, rep.disc_loss, per
        );
    }
    // Three optimizer steps under the trainer entry point, then per-owner drift.
    let mut tc = TrainConfig::new(mc.clone(), LossSpec::new(Variant::Electra));
    tc.steps = 3;
    tc.batch = 16;
    tc.seq_len = 16;
    tc.seed = 0;
    tc.opt = cal_opt();
    let out = joint_pretrain(&tc, &ids, &vocab, None, |_, _, _| Ok(())).unwrap();
    let init = rtdlab::encoder::init_params(&mc, 0).unwrap();
    let mut per: std::collections::BTreeMap<String, f64> = Default::default();
    for (id, meta, _) in out.params.store.iter() {
        let d = out
            .params
            .store
            .tensor(id)
            .iter()
            .zip(init.store.tensor(id).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        *per.entry(format!("{:?}", meta.owner)).or_default() += d;
    }
    println!("after 3 electra steps, per-owner |drift| sums {per:?}");
    let _ = Owner::Generator;
}

fn bayes() {
    for (name, (vocab, ids)) in [("two-regime", build_data()), ("markov2", build_markov_data())] {
        println!("-- corpus {name}");
        ceilings(&vocab, &ids);
    }
}

fn ceilings(vocab: &Vocab, ids: &[u32]) {
    let vocab = vocab.clone();
    let ids = ids.to_vec();
    let v = vocab.size();
    let mut tri = vec![0u32; v * v * v];
    for w in ids.windows(3) {
        tri[(w[0] as usize * v + w[2] as usize) * v + w[1] as usize] += 1;
    }
    let mut hits = 0u64;
    let mut total = 0u64;
    for w in ids.windows(3) {
        let row = &tri[(w[0] as usize * v + w[2] as usize) * v..][..v];
        let best = row.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0;
        hits += (best == w[1] as usize) as u64;
        total += 1;
    }
    println!("vocab {v}, trigram-argmax ceiling {:.4}", hits as f64 / total as f64);
    for (name, stride) in [("left-bigram", v), ("right-bigram", 1usize)] {
        let mut big = vec![0u32; v * v];
        for w in ids.windows(2) {
            big[w[0] as usize * v + w[1] as usize] += 1;
        }
        let (mut hits, mut total) = (0u64, 0u64);
        for w in ids.windows(2) {
            let (ctx, tgt) = if stride == v { (w[0], w[1]) } else { (w[1], w[0]) };
            let row: Vec<u32> = (0..v)
                .map(|j| if stride == v { big[ctx as usize * v + j] } else { big[j * v + ctx as usize] })
                .collect();
            let best = row.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0;
            hits += (best == tgt as usize) as u64;
            total += 1;
        }
        println!("{name}-argmax ceiling {:.4}", hits as f64 / total as f64);
    }
    let mut uni = vec![0u64; v];
    for &id in &ids {
        uni[id as usize] += 1;
    }
    let best = uni.iter().copied().max().unwrap();
    println!("unigram-argmax ceiling {:.4}", best as f64 / ids.len() as f64);
    println!("uniform chance over content tokens {:.4}", 1.0 / (v - 3) as f64);
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let t0 = Instant::now();
    match args.first().map(String::as_str) {
        Some("ordering") => {
            let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
            let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
            let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
            let frozen = args.get(4).map(String::as_str) != Some("finetune");
            ordering(seeds, steps, epochs, frozen);
        }
        Some("twostage") => twostage(10, 150),
        Some("gradcheck") => gradcheck(),
        Some("bayes") => bayes(),
        Some("scan") => scan(),
        Some("evb") => evb(
            args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.15),
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2),
        ),
        Some("fnt") => fnt(
            args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000),
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(150),
        ),
        Some("probefeat") => {
            let g = |i: usize, d: i64| args.get(i).and_then(|s| s.parse::<i64>().ok()).unwrap_or(d);
            let variant = match args.get(5).map(|s| s.as_str()) {
                Some("bert") => Variant::Bert,
                Some("replace-mlm") => Variant::ReplaceMlm,
                Some("all-tokens-mlm") => Variant::AllTokensMlm,
                Some("electra15") => Variant::Electra15,
                Some("unigram-electra") => Variant::UnigramElectra,
                _ => Variant::Electra,
            };
            probefeat(g(1, 12) as usize, g(2, 2000) as u64, g(3, 16) as usize, g(4, 16) as usize, variant);
        }
        Some("scale") => {
            let g = |i: usize, d: f64| args.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(d);
            scale(g(1, 32.0) as usize, g(2, 1.0) as usize, g(3, 2.0) as usize, g(4, 3000.0) as u64,
                  g(5, 16.0) as usize, g(6, 16.0) as usize, g(7, 1e-3), g(8, 100.0) as u64);
        }
        Some("mlm") => mlm(
            args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000),
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3),
        ),
        Some("adv") => adv(
            args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10),
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1200),
        ),
        _ => eprintln!("usage: calib <ordering|twostage|adv> [seeds] [steps] [epochs] [finetune]"),
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
