//! End-to-end acceptance run on the default corpus. Prints one line per
//! criterion and exits non-zero if any fails.
//!
//!     cargo test --release --test acceptance

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use latent_bridge::corpus::{Corpus, CorpusConfig, Item, Lang, PairSetName, TokenSequence};
use latent_bridge::evaluation::{bleu4, language_purity, rouge_l};
use latent_bridge::inference::{beam_search_batch, greedy_batch, vision_coords, DecodeConfig, ModelScorer};
use latent_bridge::model::{decoder_logits, multi_batch, pivot_batch, vision_batch, Bound, Model, ModelConfig};
use latent_bridge::numerics::{grad_check, Tape, Tensor, Var};
use latent_bridge::objectives::{cda_loss, dlr_loss, info_nce, mse, AlignmentBatch, LossWeights};
use latent_bridge::pipeline::{alignment_report, evaluate_task, run_variant, Domain, PipelineConfig, Task, Variant};
use latent_bridge::training::{
    finetune_supervised, train_crosslingual_alignment, train_dlr, train_vision_alignment, Checkpoint, Corruption,
    EpochLog, Stage, TrainConfig,
};
use latent_bridge::Result;

const CAPTION: Task = Task::Caption { tgt: Lang::L1 };
const TRANSLATE: Task = Task::Translate {
    src: Lang::L1,
    tgt: Lang::L2,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn quiet(_: &EpochLog) {}

/// Trained checkpoints shared between criteria, built on first use.
struct Shared {
    corpus: Corpus,
    cfg: PipelineConfig,
    aligned: Option<Checkpoint>,
    align_secs: f64,
    caption: Option<Checkpoint>,
    translation: Option<Checkpoint>,
    full_bleu: Option<(f64, f64)>,
}

impl Shared {
    fn aligned(&mut self) -> Result<&Checkpoint> {
        if self.aligned.is_none() {
            let t = Instant::now();
            self.aligned = Some(self.cfg.align(&self.corpus, &mut quiet)?);
            self.align_secs = t.elapsed().as_secs_f64();
        }
        Ok(self.aligned.as_ref().unwrap())
    }

    fn decoders(&mut self) -> Result<()> {
        if self.caption.is_none() {
            let a = self.aligned()?.clone();
            let cap = self.cfg.caption_corruption;
            let tr = self.cfg.translation_corruption;
            self.caption = Some(self.cfg.reconstruct(&self.corpus, &a, cap, &Lang::ALL, &mut quiet)?);
            self.translation = Some(self.cfg.reconstruct(&self.corpus, &a, tr, &Lang::ALL, &mut quiet)?);
        }
        Ok(())
    }

    fn full_bleu(&mut self) -> Result<(f64, f64)> {
        if self.full_bleu.is_none() {
            self.decoders()?;
            let d = self.cfg.decode;
            let c = evaluate_task(&self.corpus, &self.caption.as_ref().unwrap().model, CAPTION, &d)?.bleu4;
            let t = evaluate_task(&self.corpus, &self.translation.as_ref().unwrap().model, TRANSLATE, &d)?.bleu4;
            self.full_bleu = Some((c, t));
        }
        Ok(self.full_bleu.unwrap())
    }
}

// 1 ------------------------------------------------------------------

fn tiny_setup(seed: u64) -> Result<(Corpus, Model)> {
    let corpus = Corpus::generate(CorpusConfig {
        seed: 1,
        scenes: 80,
        test: 10,
        frames: 3,
        v_dim: 6,
        jitter: 0.05,
    })?;
    let cfg = ModelConfig {
        d: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_len: 8,
        ..ModelConfig::for_corpus(&corpus)
    };
    let mut model = Model::init(cfg, seed)?;
    // weights well above the init scale keep finite differences clear of
    // f32 rounding
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    Ok((corpus, model))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn unit_constant<'t>(tape: &'t Tape, t: &Tensor) -> Var<'t> {
    tape.constant(t).normalize_rows()
}

const STEP: f32 = 3e-3;

fn check_param(
    model: &Model,
    name: &str,
    f: impl for<'a, 't> Fn(&ModelConfig, &Bound<'a, 't>) -> Result<Var<'t>>,
) -> Result<f32> {
    let x = model.params.get(name).expect("parameter exists").clone();
    grad_check(
        |tape, v| {
            let b = model.params.bind_frozen(tape);
            b.set(name, v)?;
            f(&model.config, &b)
        },
        &x,
        STEP,
    )
}

fn criterion_gradients() -> Result<Outcome> {
    let mut worst: Vec<(&str, f32)> = Vec::new();
    let mut note = |label: &'static str, e: f32| match worst.iter_mut().find(|(l, _)| *l == label) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((label, e)),
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, vec![4, 6])?;
        let other = random_tensor(&mut rng, vec![4, 6])?;

        note(
            "info_nce",
            grad_check(
                |tape, v| info_nce(&AlignmentBatch::new(v.normalize_rows(), unit_constant(tape, &other))?, 0.07),
                &x,
                STEP,
            )?,
        );
        note(
            "mse",
            grad_check(|tape, v| mse(&AlignmentBatch::new(v, tape.constant(&other))?), &x, STEP)?,
        );
        let w = LossWeights {
            lambda1: 0.5,
            lambda2: 0.5,
            tau: 0.07,
        };
        note(
            "cda_loss",
            grad_check(
                |tape, v| cda_loss(&AlignmentBatch::new(v.normalize_rows(), unit_constant(tape, &other))?, w),
                &x,
                STEP,
            )?,
        );

        let (corpus, model) = tiny_setup(seed)?;
        let texts: Vec<TokenSequence> = corpus.test[..3].iter().map(|t| t.text(Lang::L2).clone()).collect();
        let targets: Vec<&TokenSequence> = texts.iter().collect();
        let memory = random_tensor(&mut rng, vec![3, model.config.d])?;
        note(
            "dlr_loss",
            grad_check(
                |tape, v| {
                    let b = model.params.bind_frozen(tape);
                    dlr_loss(&model.config, &b, &v, &targets)
                },
                &memory,
                STEP,
            )?,
        );

        // full forward: encoders into the contrastive loss, the
        // multilingual encoder into the decoder's reconstruction loss
        let vis: Vec<_> = corpus.test[..3].iter().map(|t| &t.vision).collect();
        let piv: Vec<&[u32]> = corpus.test[..3].iter().map(|t| t.text(Lang::L0).ids.as_slice()).collect();
        for name in ["vision.fc1.w", "pivot.layer0.attn.q.w", "pivot.proj.w"] {
            note(
                "encoder forward",
                check_param(&model, name, |mc, b| {
                    let s = pivot_batch(mc, b, &piv)?;
                    let d = vision_batch(mc, b, &vis)?;
                    info_nce(&AlignmentBatch::new(s, d)?, 0.07)
                })?,
            );
        }
        let ids: Vec<&[u32]> = texts.iter().map(|t| t.ids.as_slice()).collect();
        for name in ["multi.layer0.ffn.fc1.w", "decoder.layer0.cross.q.w", "decoder.layer0.self.v.w", "decoder.tok_emb"] {
            note(
                "encoder/decoder forward",
                check_param(&model, name, |mc, b| {
                    let m = multi_batch(mc, b, &ids)?;
                    dlr_loss(mc, b, &m, &targets)
                })?,
            );
        }
        note(
            "decoder logits",
            check_param(&model, "decoder.layer0.ffn.fc2.w", |mc, b| {
                let m = multi_batch(mc, b, &ids)?;
                let prefixes: Vec<Vec<u32>> = texts
                    .iter()
                    .map(|t| {
                        let mut p = vec![latent_bridge::corpus::Vocab::bos(t.lang)];
                        p.extend_from_slice(&t.ids[..t.ids.len() - 1]);
                        p
                    })
                    .collect();
                let pr: Vec<&[u32]> = prefixes.iter().map(|p| p.as_slice()).collect();
                let logits = decoder_logits(mc, b, &m, &pr)?;
                Ok(logits.mul(&logits)?.mean())
            })?,
        );
    }
    let max = worst.iter().map(|w| w.1).fold(0.0f32, f32::max);
    let detail = worst
        .iter()
        .map(|(l, e)| format!("{l} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(max <= 1e-3, format!("max relative error {max:.2e} over 10 seeds ({detail})"))
}

// 2 ------------------------------------------------------------------

fn criterion_loss_oracles() -> Result<Outcome> {
    let tape = Tape::new();
    let c = |rows: usize, data: &[f32]| tape.constant_from(vec![rows, data.len() / rows], data.to_vec());

    let one = info_nce(&AlignmentBatch::new(c(1, &[0.6, 0.8])?, c(1, &[1.0, 0.0])?)?, 0.07)?.item_f64();
    let eye = [1.0, 0.0, 0.0, 1.0];
    let two = info_nce(&AlignmentBatch::new(c(2, &eye)?, c(2, &eye)?)?, 1.0)?.item_f64();
    let two_expected = (1.0 + (-1.0f64).exp()).ln();
    let hand = mse(&AlignmentBatch::new(c(2, &eye)?, c(2, &[0.0, 0.0, 0.0, 1.0])?)?)?.item_f64();

    // squared distance of unit vectors: 2K * mse = sum over pairs of (2 - 2 cos)
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut identity_err = 0.0f64;
    for _ in 0..20 {
        let k = rng.gen_range(1..6);
        let mut unit = |n: usize| -> Vec<f32> {
            let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter().map(|x| x / norm).collect()
        };
        let (mut s, mut d) = (Vec::new(), Vec::new());
        for _ in 0..k {
            s.extend(unit(5));
            d.extend(unit(5));
        }
        let loss = mse(&AlignmentBatch::new(c(k, &s)?, c(k, &d)?)?)?.item_f64();
        let cos_sum: f64 = (0..k)
            .map(|i| (0..5).map(|j| s[i * 5 + j] as f64 * d[i * 5 + j] as f64).sum::<f64>())
            .sum();
        identity_err = identity_err.max((2.0 * k as f64 * loss - (2.0 * k as f64 - 2.0 * cos_sum)).abs());
    }

    let pass = one == 0.0
        && (two - two_expected).abs() <= 1e-5
        && (hand - 0.25).abs() <= 1e-6
        && identity_err <= 1e-5;
    outcome(
        pass,
        format!(
            "K=1 {one}, K=2 {two:.7} (expect {two_expected:.7}), mse hand {hand:.7}, identity err {identity_err:.1e}"
        ),
    )
}

// 3 ------------------------------------------------------------------

fn criterion_alignment(shared: &mut Shared) -> Result<Outcome> {
    let chance = 1.0 / shared.corpus.test.len() as f64;
    let pairs = [
        (Domain::Vision, Domain::Text(Lang::L0)),
        (Domain::Text(Lang::L1), Domain::Text(Lang::L0)),
        (Domain::Text(Lang::L2), Domain::Text(Lang::L0)),
        (Domain::Text(Lang::L3), Domain::Text(Lang::L0)),
    ];
    let untrained = alignment_report(&shared.corpus, &shared.cfg.fresh_checkpoint(&shared.corpus)?.model, &pairs)?;
    let secs_before = shared.align_secs;
    let model = shared.aligned()?.model.clone();
    let trained = alignment_report(&shared.corpus, &model, &pairs)?;
    let secs = if secs_before > 0.0 { secs_before } else { shared.align_secs };

    let mut pass = secs <= 600.0;
    let mut parts = Vec::new();
    for (u, t) in untrained.pairs.iter().zip(&trained.pairs) {
        let need = if t.domain_a == "vision" { 0.80 } else { 0.95 };
        pass &= t.recall_at_1 >= need && u.recall_at_1 <= 3.0 * chance;
        parts.push(format!(
            "{}-{} r@1 {:.3} (untrained {:.3})",
            t.domain_a, t.domain_b, t.recall_at_1, u.recall_at_1
        ));
    }
    outcome(pass, format!("{}; stages A+B {secs:.0}s", parts.join(", ")))
}

// 4 ------------------------------------------------------------------

fn criterion_zero_shot(shared: &mut Shared) -> Result<Outcome> {
    let t = Instant::now();
    // only pivot-anchored pairs exist in training data
    let mut pivot_only = true;
    for name in PairSetName::ALL {
        for p in &shared.corpus.pairset(name).pairs {
            let a_pivot = matches!(&p.a, Item::Text(s) if s.lang == Lang::L0);
            pivot_only &= a_pivot != (p.b.lang == Lang::L0);
        }
    }
    let (cap, tr) = shared.full_bleu()?;
    let secs = shared.align_secs + t.elapsed().as_secs_f64();
    let pass = pivot_only && tr >= 0.50 && cap >= 0.30 && secs <= 1800.0;
    outcome(
        pass,
        format!(
            "{TRANSLATE} BLEU-4 {tr:.4} (>= 0.50), {CAPTION} BLEU-4 {cap:.4} (>= 0.30), pivot-only pairs {pivot_only}, pipeline {secs:.0}s"
        ),
    )
}

// 5 ------------------------------------------------------------------

fn criterion_ablations(shared: &mut Shared) -> Result<Outcome> {
    let (cap, tr) = shared.full_bleu()?;
    let aligned = shared.aligned()?.clone();
    let (corpus, cfg) = (&shared.corpus, &shared.cfg);
    let no_cda = run_variant(corpus, cfg, &Variant::NoCda, &[CAPTION, TRANSLATE], None, &mut quiet)?;
    let nc_cap = no_cda.get(CAPTION).unwrap().bleu4;
    let nc_tr = no_cda.get(TRANSLATE).unwrap().bleu4;
    let no_corr = run_variant(corpus, cfg, &Variant::NoCorruption, &[CAPTION], Some(&aligned), &mut quiet)?;
    let ncorr_cap = no_corr.get(CAPTION).unwrap().bleu4;

    let subset = vec![Lang::L0, Lang::L1, Lang::L2];
    let variant = Variant::Langs(subset.clone());
    let tasks = Task::standard();
    let restricted = run_variant(corpus, cfg, &variant, &tasks, None, &mut quiet)?;
    let expected: Vec<Task> = tasks
        .iter()
        .copied()
        .filter(|t| t.langs().iter().all(|l| subset.contains(l)))
        .collect();
    let got: Vec<Task> = restricted.rows.iter().map(|r| r.task).collect();
    let rows_ok = got == expected && restricted.absent.len() == tasks.len() - expected.len();

    let pass = nc_cap <= 0.2 * cap && nc_tr <= 0.2 * tr && ncorr_cap < cap && rows_ok;
    outcome(
        pass,
        format!(
            "no-cda {nc_cap:.4}/{nc_tr:.4} vs full {cap:.4}/{tr:.4} (<= 20%), no-corruption caption {ncorr_cap:.4} < {cap:.4}, {variant} rows {} absent {}",
            got.len(),
            restricted.absent.len()
        ),
    )
}

// 6 ------------------------------------------------------------------

fn criterion_lambda(shared: &mut Shared) -> Result<Outcome> {
    let (cap, _) = shared.full_bleu()?;
    let (corpus, cfg) = (&shared.corpus, &shared.cfg);
    let a = train_vision_alignment(corpus, &cfg.align_vision, Some(cfg.fresh_checkpoint(corpus)?), &mut quiet)?;
    let contrastive = TrainConfig {
        weights: LossWeights::CONTRASTIVE,
        ..cfg.align_lingual.clone()
    };
    let b = train_crosslingual_alignment(corpus, &contrastive, Some(a), &mut quiet)?;
    let c = cfg.reconstruct(corpus, &b, cfg.caption_corruption, &Lang::ALL, &mut quiet)?;
    let alt = evaluate_task(corpus, &c.model, CAPTION, &cfg.decode)?.bleu4;
    outcome(
        cap >= alt,
        format!(
            "{CAPTION} BLEU-4 with (0,1) {cap:.4} >= (1,0) {alt:.4} at batch {}",
            cfg.align_lingual.batch_align
        ),
    )
}

// 7 ------------------------------------------------------------------

fn criterion_finetune(shared: &mut Shared) -> Result<Outcome> {
    let (zero, _) = shared.full_bleu()?;
    let base = shared.caption.clone().unwrap();
    let (corpus, cfg) = (&shared.corpus, &shared.cfg);
    let mut scores = Vec::new();
    for ratio in [0.01, 0.1] {
        let ft = TrainConfig {
            finetune_ratio: ratio,
            finetune_lang: Lang::L1,
            ..TrainConfig::for_stage(Stage::Finetune)
        };
        let m = finetune_supervised(corpus, &ft, Some(base.clone()), &mut quiet)?;
        scores.push(evaluate_task(corpus, &m.model, CAPTION, &cfg.decode)?.bleu4);
    }
    outcome(
        scores[0] > zero && scores[1] >= scores[0],
        format!("{CAPTION} BLEU-4 zero-shot {zero:.4}, 1% {:.4}, 10% {:.4}", scores[0], scores[1]),
    )
}

// 8 ------------------------------------------------------------------

fn criterion_decoding(shared: &mut Shared) -> Result<Outcome> {
    shared.decoders()?;
    let model = &shared.caption.as_ref().unwrap().model;
    let corpus = &shared.corpus;
    let items: Vec<_> = corpus.test.iter().take(100).map(|t| &t.vision).collect();
    let n = items.len();
    let scorer = ModelScorer::new(model, vision_coords(model, &items)?)?;
    let max_len = shared.cfg.decode.max_len;
    let beam = |k: usize, lang: Lang| {
        let dc = DecodeConfig {
            beam_size: k,
            ..shared.cfg.decode
        };
        beam_search_batch(&scorer, n, lang, &dc)
    };

    let greedy = greedy_batch(&scorer, n, Lang::L1, max_len)?;
    let one = beam(1, Lang::L1)?;
    let same = greedy
        .iter()
        .zip(&one)
        .all(|(g, b)| g.sequence == b.sequence && (g.logprob - b.logprob).abs() <= 1e-9);
    let three = beam(3, Lang::L1)?;
    let better = three.iter().zip(&one).all(|(t, o)| t.logprob >= o.logprob - 1e-9);

    let mut purity = Vec::new();
    for lang in Lang::ALL {
        let g = beam(3, lang)?;
        let seqs: Vec<&TokenSequence> = g.iter().map(|x| &x.sequence).collect();
        purity.push(language_purity(&corpus.vocab, &seqs));
    }
    let min_purity = purity.iter().copied().fold(1.0, f64::min);
    outcome(
        same && better && min_purity >= 0.99,
        format!(
            "beam1 == greedy on {n}: {same}; beam3 logprob >= beam1 on all: {better}; purity per BOS {:?}",
            purity.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>()
        ),
    )
}

// 9 ------------------------------------------------------------------

fn criterion_determinism(shared: &mut Shared) -> Result<Outcome> {
    let corpus = Corpus::generate(CorpusConfig {
        scenes: 400,
        test: 40,
        ..CorpusConfig::default()
    })?;
    let quick = |stage| TrainConfig {
        epochs: 2,
        ..TrainConfig::for_stage(stage)
    };
    let run = || -> Result<Vec<u8>> {
        let a = train_vision_alignment(&corpus, &quick(Stage::AlignVision), None, &mut quiet)?;
        let b = train_crosslingual_alignment(&corpus, &quick(Stage::AlignLingual), Some(a), &mut quiet)?;
        let dlr = TrainConfig {
            corruption: Corruption::TRANSLATION,
            ..quick(Stage::Dlr)
        };
        train_dlr(&corpus, &dlr, Some(b), &mut quiet)?.to_bytes()
    };
    let identical = run()? == run()?;

    let dir = tempfile::tempdir().map_err(|e| latent_bridge::Error::Io {
        path: "tempdir".into(),
        source: e,
    })?;
    let path = dir.path().join("aligned.ckpt");
    let ck = shared.aligned()?;
    ck.save(&path)?;
    let bytes = std::fs::read(&path).map_err(|e| latent_bridge::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let back = Checkpoint::load(&path)?;
    let round_trip = back == *ck && back.to_bytes()? == bytes;

    let mut bad_magic = bytes.clone();
    bad_magic[1] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    let mut bad_count = bytes.clone();
    bad_count[8] = bad_count[8].wrapping_add(1);
    let corrupt_fail = [&bad_magic[..], &bad_version[..], &bad_count[..], &bytes[..10], &bytes[..bytes.len() - 3]]
        .iter()
        .all(|b| matches!(Checkpoint::from_bytes(b), Err(latent_bridge::Error::Format { .. })));
    outcome(
        identical && round_trip && corrupt_fail,
        format!("identical seeds -> identical bytes: {identical}; round trip byte-exact: {round_trip}; corrupted loads rejected: {corrupt_fail}"),
    )
}

// 10 -----------------------------------------------------------------

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn criterion_metrics() -> Result<Outcome> {
    let b = bleu4(&[words("a b c d e f")], &[words("a b c d x y")])?;
    let r = rouge_l(&words("a b c"), &[words("a c b")])?;
    let corpus = vec![words("the cat sat on the mat"), words("a b c d e")];
    let bi = bleu4(&corpus, &corpus)?;
    let ri = latent_bridge::evaluation::corpus_rouge_l(&corpus, &corpus)?;
    let pass = (b - 0.508).abs() <= 1e-3 && (r - 2.0 / 3.0).abs() <= 1e-6 && bi == 1.0 && ri == 1.0;
    outcome(pass, format!("bleu4 {b:.4}, rougeL {r:.7}, identical corpus {bi} / {ri}"))
}

fn main() {
    let mut shared = Shared {
        corpus: Corpus::generate(CorpusConfig::default()).expect("default corpus"),
        cfg: PipelineConfig::default(),
        aligned: None,
        align_secs: 0.0,
        caption: None,
        translation: None,
        full_bleu: None,
    };
    type Criterion = fn(&mut Shared) -> Result<Outcome>;
    let criteria: [(&str, Criterion); 10] = [
        ("gradient correctness", |_| criterion_gradients()),
        ("loss oracles", |_| criterion_loss_oracles()),
        ("alignment quality", criterion_alignment),
        ("zero-shot transfer", criterion_zero_shot),
        ("ablation directions", criterion_ablations),
        ("loss-weight ablation", criterion_lambda),
        ("semi-supervised trend", criterion_finetune),
        ("decoding and language control", criterion_decoding),
        ("determinism and serialization", criterion_determinism),
        ("metric fixtures", |_| criterion_metrics()),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (pass, detail) = match f(&mut shared) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {}: {} ({detail}) [{:.1}s]",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
