use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AdamW, Checkpoint, Corruption, EpochLog, Stage, TrainConfig};
use crate::corpus::{mask_tokens, mix_seed, Corpus, Item, Lang, MaskScheme, PairSetName, TokenSequence, VisionItem};
use crate::error::{Error, Result};
use crate::model::{multi_batch, pivot_batch, vision_batch, Bound, Model, ModelConfig, Network};
use crate::numerics::{Tape, Var};
use crate::objectives::{cda_loss, dlr_loss, perturb_coordinate, AlignmentBatch};

const ENCODE_CHUNK: usize = 256;

fn stage_rng(cfg: &TrainConfig, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, stage as u64 + 101))
}

fn shuffled_batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(|c| c.to_vec()).collect()
}

/// Forward, backward and one optimizer update. Returns the loss.
fn train_step<F>(model: &mut Model, opt: &mut AdamW, f: F) -> Result<f64>
where
    F: for<'a, 't> FnOnce(&ModelConfig, &Bound<'a, 't>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let (loss, grads) = {
        let b = model.params.bind(&tape);
        let loss = f(&model.config, &b)?;
        let value = loss.item_f64();
        if !value.is_finite() {
            return Err(Error::invalid(format!("training loss is {value}")));
        }
        tape.backward(loss)?;
        (value, b.gradients())
    };
    model.params.add_grads(grads)?;
    opt.step(&mut model.params)?;
    Ok(loss)
}

fn check_compatible(model: &Model, corpus: &Corpus) -> Result<()> {
    if model.config.vocab_size != corpus.vocab.len() || model.config.v_dim != corpus.config.v_dim {
        return Err(Error::invalid(format!(
            "model (vocab {}, v_dim {}) does not fit corpus (vocab {}, v_dim {})",
            model.config.vocab_size,
            model.config.v_dim,
            corpus.vocab.len(),
            corpus.config.v_dim
        )));
    }
    Ok(())
}

fn require(init: Option<Checkpoint>, stage: Stage) -> Result<Checkpoint> {
    init.ok_or_else(|| {
        let needed = stage.requires().map(|s| s.name()).unwrap_or("a model");
        Error::invalid(format!("stage {stage} needs an initial checkpoint from {needed}"))
    })
}

fn finish(mut ck: Checkpoint, cfg: &TrainConfig, stage: Stage, steps: usize, final_loss: f64) -> Checkpoint {
    ck.model.params.train_only(&Network::ALL);
    let mut rec = cfg.record(steps, final_loss);
    rec.stage = stage.name().to_string();
    ck.provenance.push(rec);
    ck
}

pub(crate) fn encode_chunks<T: ?Sized>(
    model: &Model,
    items: &[&T],
    f: impl for<'a, 't> Fn(&ModelConfig, &Bound<'a, 't>, &[&T]) -> Result<Var<'t>>,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(ENCODE_CHUNK) {
        let tape = Tape::new();
        let b = model.params.bind_frozen(&tape);
        let v = f(&model.config, &b, chunk)?.to_vec();
        out.extend(v.chunks(model.config.d).map(|r| r.to_vec()));
    }
    Ok(out)
}

fn stack<'t>(tape: &'t Tape, rows: &[&Vec<f32>]) -> Result<Var<'t>> {
    let d = rows.first().map_or(0, |r| r.len());
    tape.constant_from(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect())
}

/// Trains the vision and pivot encoders on (vision, pivot) pairs with the
/// alignment loss. Starts from a fresh model when `init` is `None`.
pub fn train_vision_alignment(
    corpus: &Corpus,
    cfg: &TrainConfig,
    init: Option<Checkpoint>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let stage = Stage::AlignVision;
    let mut ck = match init {
        Some(c) => c,
        None => Checkpoint::fresh(ModelConfig::for_corpus(corpus), cfg.seed)?,
    };
    check_compatible(&ck.model, corpus)?;
    let mut pairs: Vec<(&VisionItem, &TokenSequence)> = Vec::new();
    for p in &corpus.pairset(PairSetName::D1).pairs {
        match &p.a {
            Item::Vision(v) => pairs.push((v, &p.b)),
            Item::Text(_) => return Err(Error::invalid("D1 must hold (vision, pivot) pairs")),
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid("vision alignment needs at least one pair"));
    }
    ck.model.params.train_only(&[Network::Vision, Network::Pivot]);
    let mut opt = AdamW::new(cfg.optim);
    let mut rng = stage_rng(cfg, stage);
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(pairs.len(), cfg.batch_align, &mut rng);
        for batch in &batches {
            let vis: Vec<&VisionItem> = batch.iter().map(|&i| pairs[i].0).collect();
            let txt: Vec<&[u32]> = batch.iter().map(|&i| pairs[i].1.ids.as_slice()).collect();
            total += train_step(&mut ck.model, &mut opt, |mc, b| {
                let s = pivot_batch(mc, b, &txt)?;
                let d = vision_batch(mc, b, &vis)?;
                cda_loss(&AlignmentBatch::new(s, d)?, cfg.weights)
            })?;
        }
        last = total / batches.len() as f64;
        log(&EpochLog { epoch, stage, loss: last });
    }
    Ok(finish(ck, cfg, stage, opt.steps_taken(), last))
}

/// Trains the multilingual encoder to reproduce the frozen pivot encoder's
/// coordinates of paired pivot sentences. Batches cycle through the
/// language pair sets in turn.
pub fn train_crosslingual_alignment(
    corpus: &Corpus,
    cfg: &TrainConfig,
    init: Option<Checkpoint>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let stage = Stage::AlignLingual;
    let mut ck = require(init, stage)?;
    check_compatible(&ck.model, corpus)?;
    let with_pivot = cfg.align_pivot_text && cfg.langs.contains(&Lang::L0);

    struct Set<'c> {
        partner: Option<Vec<&'c [u32]>>,
        pivot: Vec<&'c [u32]>,
        targets: Vec<Vec<f32>>,
    }
    let mut sets = Vec::new();
    for name in [PairSetName::D2, PairSetName::D3, PairSetName::D4] {
        let lang = name.partner().expect("text pair set");
        let use_partner = cfg.langs.contains(&lang);
        if !use_partner && !with_pivot {
            continue;
        }
        let pairs = &corpus.pairset(name).pairs;
        let pivot: Vec<&[u32]> = pairs.iter().map(|p| p.pivot().ids.as_slice()).collect();
        let targets = encode_chunks(&ck.model, &pivot, |mc, b, x| pivot_batch(mc, b, x))?;
        let partner = use_partner.then(|| pairs.iter().map(|p| p.b.ids.as_slice()).collect());
        if !pivot.is_empty() {
            sets.push(Set {
                partner,
                pivot,
                targets,
            });
        }
    }
    if sets.is_empty() {
        return Err(Error::invalid(format!(
            "cross-lingual alignment has no training text for languages {:?}",
            cfg.langs
        )));
    }

    ck.model.params.train_only(&[Network::Multi]);
    let mut opt = AdamW::new(cfg.optim);
    let mut rng = stage_rng(cfg, stage);
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let per_set: Vec<Vec<Vec<usize>>> = sets
            .iter()
            .map(|s| shuffled_batches(s.pivot.len(), cfg.batch_align, &mut rng))
            .collect();
        let rounds = per_set.iter().map(|b| b.len()).max().unwrap_or(0);
        let mut total = 0.0;
        let mut steps = 0;
        for round in 0..rounds {
            for (set, batches) in sets.iter().zip(&per_set) {
                let Some(batch) = batches.get(round) else { continue };
                let target_rows: Vec<&Vec<f32>> = batch.iter().map(|&i| &set.targets[i]).collect();
                let partner: Option<Vec<&[u32]>> =
                    set.partner.as_ref().map(|p| batch.iter().map(|&i| p[i]).collect());
                let pivot: Vec<&[u32]> = batch.iter().map(|&i| set.pivot[i]).collect();
                total += train_step(&mut ck.model, &mut opt, |mc, b| {
                    let s = stack(b.tape(), &target_rows)?;
                    let mut terms = Vec::new();
                    if let Some(p) = &partner {
                        terms.push(cda_loss(&AlignmentBatch::new(s, multi_batch(mc, b, p)?)?, cfg.weights)?);
                    }
                    if with_pivot {
                        terms.push(cda_loss(&AlignmentBatch::new(s, multi_batch(mc, b, &pivot)?)?, cfg.weights)?);
                    }
                    let n = terms.len() as f32;
                    let mut loss = terms[0];
                    for t in &terms[1..] {
                        loss = loss.add(t)?;
                    }
                    Ok(loss.scale(1.0 / n))
                })?;
                steps += 1;
            }
        }
        last = total / steps.max(1) as f64;
        log(&EpochLog { epoch, stage, loss: last });
    }
    Ok(finish(ck, cfg, stage, opt.steps_taken(), last))
}

/// Trains the decoder to reconstruct sentences from the (corrupted)
/// multilingual coordinates of their (masked) token sequences. The
/// multilingual encoder stays frozen unless `train_encoder_in_dlr` is set.
pub fn train_dlr(
    corpus: &Corpus,
    cfg: &TrainConfig,
    init: Option<Checkpoint>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let stage = Stage::Dlr;
    let mut ck = require(init, stage)?;
    check_compatible(&ck.model, corpus)?;
    let pools: Vec<Vec<&TokenSequence>> = cfg.langs.iter().map(|&l| corpus.sentences(l)).collect();
    if pools.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid("reconstruction needs sentences in every selected language"));
    }
    let Corruption { mask_percent, noise_std } = cfg.corruption;
    let cached: Option<Vec<Vec<Vec<f32>>>> = if mask_percent == 0.0 && !cfg.train_encoder_in_dlr {
        let mut c = Vec::new();
        for pool in &pools {
            let ids: Vec<&[u32]> = pool.iter().map(|t| t.ids.as_slice()).collect();
            c.push(encode_chunks(&ck.model, &ids, |mc, b, x| multi_batch(mc, b, x))?);
        }
        Some(c)
    } else {
        None
    };

    let nets: &[Network] = if cfg.train_encoder_in_dlr {
        &[Network::Decoder, Network::Multi]
    } else {
        &[Network::Decoder]
    };
    ck.model.params.train_only(nets);
    let d = ck.model.config.d;
    let total_sentences: usize = pools.iter().map(|p| p.len()).sum();
    let steps_per_epoch = total_sentences.div_ceil(cfg.batch_dlr);
    let mut opt = AdamW::new(cfg.optim);
    let mut rng = stage_rng(cfg, stage);
    let zeros = vec![0.0f32; d];
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let mut picks = Vec::with_capacity(cfg.batch_dlr);
            let mut inputs = Vec::with_capacity(cfg.batch_dlr);
            let mut noise = Vec::with_capacity(cfg.batch_dlr * d);
            for _ in 0..cfg.batch_dlr {
                let l = rng.gen_range(0..pools.len());
                let i = rng.gen_range(0..pools[l].len());
                let seq = pools[l][i];
                if cached.is_none() {
                    inputs.push(mask_tokens(seq, mask_percent, MaskScheme::default(), &corpus.vocab, rng.gen())?);
                }
                noise.extend(perturb_coordinate(&zeros, noise_std, rng.gen())?);
                picks.push((l, i));
            }
            let targets: Vec<&TokenSequence> = picks.iter().map(|&(l, i)| pools[l][i]).collect();
            total += train_step(&mut ck.model, &mut opt, |mc, b| {
                let coords = match &cached {
                    Some(c) => {
                        let rows: Vec<&Vec<f32>> = picks.iter().map(|&(l, i)| &c[l][i]).collect();
                        stack(b.tape(), &rows)?
                    }
                    None => {
                        let ids: Vec<&[u32]> = inputs.iter().map(|t| t.ids.as_slice()).collect();
                        multi_batch(mc, b, &ids)?
                    }
                };
                let memory = if noise_std > 0.0 {
                    coords.add(&b.tape().constant_from(vec![picks.len(), d], noise)?)?
                } else {
                    coords
                };
                dlr_loss(mc, b, &memory, &targets)
            })?;
        }
        last = total / steps_per_epoch as f64;
        log(&EpochLog { epoch, stage, loss: last });
    }
    Ok(finish(ck, cfg, stage, opt.steps_taken(), last))
}

/// Fine-tunes the decoder on a `finetune_ratio` share of labelled
/// (vision, text) pairs in `finetune_lang`, conditioning on the vision
/// encoder's coordinates.
pub fn finetune_supervised(
    corpus: &Corpus,
    cfg: &TrainConfig,
    init: Option<Checkpoint>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let stage = Stage::Finetune;
    if !(cfg.finetune_ratio > 0.0 && cfg.finetune_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "fine-tuning ratio must be in (0, 1], got {}",
            cfg.finetune_ratio
        )));
    }
    let mut ck = require(init, stage)?;
    check_compatible(&ck.model, corpus)?;
    let pool = corpus.downstream_pairs(cfg.finetune_lang)?;
    let n = (cfg.finetune_ratio * pool.len() as f64 + 1e-9).floor() as usize;
    if n == 0 {
        return Ok(ck);
    }
    let mut rng = stage_rng(cfg, stage);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(n);
    order.sort_unstable();
    let vis: Vec<&VisionItem> = order.iter().map(|&i| &pool[i].0).collect();
    let texts: Vec<&TokenSequence> = order.iter().map(|&i| &pool[i].1).collect();
    let coords = encode_chunks(&ck.model, &vis, |mc, b, x| vision_batch(mc, b, x))?;

    ck.model.params.train_only(&[Network::Decoder]);
    let d = ck.model.config.d;
    let zeros = vec![0.0f32; d];
    let mut opt = AdamW::new(cfg.optim);
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(n, cfg.batch_dlr, &mut rng);
        for batch in &batches {
            let rows: Vec<&Vec<f32>> = batch.iter().map(|&i| &coords[i]).collect();
            let targets: Vec<&TokenSequence> = batch.iter().map(|&i| texts[i]).collect();
            let mut noise = Vec::with_capacity(rows.len() * d);
            for _ in &rows {
                noise.extend(perturb_coordinate(&zeros, cfg.corruption.noise_std, rng.gen())?);
            }
            total += train_step(&mut ck.model, &mut opt, |mc, b| {
                let mut memory = stack(b.tape(), &rows)?;
                if cfg.corruption.noise_std > 0.0 {
                    memory = memory.add(&b.tape().constant_from(vec![rows.len(), d], noise)?)?;
                }
                dlr_loss(mc, b, &memory, &targets)
            })?;
        }
        last = total / batches.len() as f64;
        log(&EpochLog { epoch, stage, loss: last });
    }
    let steps = opt.steps_taken();
    let mut ck = finish(ck, cfg, stage, steps, last);
    if let Some(r) = ck.provenance.last_mut() {
        r.finetune_pairs = Some(n);
        r.langs = vec![cfg.finetune_lang.to_string()];
    }
    Ok(ck)
}
