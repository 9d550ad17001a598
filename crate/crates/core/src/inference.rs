//! Zero-shot generation: encode an input into the shared space, then decode
//! in any language with beam search.

use std::cmp::Ordering;

use crate::corpus::{Lang, TokenSequence, VisionItem, Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::{decoder_next_logits, multi_batch, vision_batch, Coordinate, Model};
use crate::numerics::Tape;
use crate::training::encode_chunks;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Generated tokens allowed before EOS is forced.
    pub max_len: usize,
    /// Length-normalization exponent: hypotheses rank by logprob / len^alpha.
    pub alpha: f32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 3,
            max_len: 24,
            alpha: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::invalid("beam size and max_len must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Generated ids, BOS excluded.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub sequence: TokenSequence,
    pub logprob: f64,
    /// True when max_len was reached and EOS was appended by force.
    pub forced_eos: bool,
}

/// Next-token log-probabilities for a batch of `(item, prefix)` requests.
/// Each prefix starts with a BOS token.
pub trait StepScorer {
    fn log_probs(&self, requests: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>>;
}

/// Decoder conditioned on one coordinate per item.
pub struct ModelScorer<'m> {
    model: &'m Model,
    coords: Vec<Vec<f32>>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, coords: Vec<Vec<f32>>) -> Result<Self> {
        if let Some(c) = coords.iter().find(|c| c.len() != model.config.d) {
            return Err(Error::Shape {
                op: "scorer coordinate",
                left: vec![c.len()],
                right: vec![model.config.d],
            });
        }
        Ok(ModelScorer { model, coords })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, requests: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>> {
        let d = self.model.config.d;
        let v = self.model.config.vocab_size;
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(512) {
            let tape = Tape::new();
            let b = self.model.params.bind_frozen(&tape);
            let mut mem = Vec::with_capacity(chunk.len() * d);
            for &(item, _) in chunk {
                let c = self
                    .coords
                    .get(item)
                    .ok_or_else(|| Error::invalid(format!("no coordinate for item {item}")))?;
                mem.extend_from_slice(c);
            }
            let memory = tape.constant_from(vec![chunk.len(), d], mem)?;
            let prefixes: Vec<&[u32]> = chunk.iter().map(|r| r.1).collect();
            let logits = decoder_next_logits(&self.model.config, &b, &memory, &prefixes)?.to_vec();
            out.extend(logits.chunks(v).map(log_softmax));
        }
        Ok(out)
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x as f64 - lse).collect()
}

fn rank_score(logprob: f64, len: usize, alpha: f32) -> f64 {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (len as f64).powf(alpha as f64)
    }
}

/// Higher score first; on equal scores the lexicographically smaller
/// token sequence wins.
fn better(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

struct Hyp {
    tokens: Vec<u32>,
    logprob: f64,
    forced: bool,
}

impl Hyp {
    fn score(&self, alpha: f32) -> f64 {
        rank_score(self.logprob, self.tokens.len(), alpha)
    }
}

struct ItemSearch {
    alive: Vec<Hyp>,
    finished: Vec<Hyp>,
    done: bool,
}

impl ItemSearch {
    fn best_finished(&self, alpha: f32) -> Option<&Hyp> {
        self.finished
            .iter()
            .min_by(|a, b| better((a.score(alpha), &a.tokens), (b.score(alpha), &b.tokens)))
    }
}

fn with_bos(bos: u32, tokens: &[u32]) -> Vec<u32> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(bos);
    p.extend_from_slice(tokens);
    p
}

/// Beam search for `n_items` conditioning items at once.
///
/// Each step keeps the `beam_size` best unfinished extensions; hypotheses
/// ending in EOS move to a finished pool. With `alpha = 0` an item stops as
/// soon as its best finished hypothesis scores at least as high as every
/// live one, since appending tokens never raises a log-probability.
pub fn beam_search_batch(
    scorer: &dyn StepScorer,
    n_items: usize,
    lang: Lang,
    cfg: &DecodeConfig,
) -> Result<Vec<Generation>> {
    cfg.validate()?;
    let bos = Vocab::bos(lang);
    let mut items: Vec<ItemSearch> = (0..n_items)
        .map(|_| ItemSearch {
            alive: vec![Hyp {
                tokens: Vec::new(),
                logprob: 0.0,
                forced: false,
            }],
            finished: Vec::new(),
            done: false,
        })
        .collect();
    loop {
        let prefixes: Vec<(usize, Vec<u32>)> = items
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.done)
            .flat_map(|(i, s)| s.alive.iter().map(move |h| (i, with_bos(bos, &h.tokens))))
            .collect();
        if prefixes.is_empty() {
            break;
        }
        let requests: Vec<(usize, &[u32])> = prefixes.iter().map(|(i, p)| (*i, p.as_slice())).collect();
        let scores = scorer.log_probs(&requests)?;
        let mut row = 0;
        for s in items.iter_mut().filter(|s| !s.done) {
            let alive = std::mem::take(&mut s.alive);
            let rows = &scores[row..row + alive.len()];
            row += alive.len();
            let mut cands: Vec<(f64, Vec<u32>, f64)> = Vec::with_capacity(alive.len() * rows[0].len());
            for (h, lp) in alive.iter().zip(rows) {
                for (tok, &l) in lp.iter().enumerate() {
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok as u32);
                    let logprob = h.logprob + l;
                    cands.push((rank_score(logprob, tokens.len(), cfg.alpha), tokens, logprob));
                }
            }
            cands.sort_by(|a, b| better((a.0, &a.1), (b.0, &b.1)));
            for (_, mut tokens, logprob) in cands {
                if s.alive.len() >= cfg.beam_size {
                    break;
                }
                if *tokens.last().unwrap() == EOS {
                    s.finished.push(Hyp {
                        tokens,
                        logprob,
                        forced: false,
                    });
                } else if tokens.len() >= cfg.max_len {
                    tokens.push(EOS);
                    s.finished.push(Hyp {
                        tokens,
                        logprob,
                        forced: true,
                    });
                } else {
                    s.alive.push(Hyp {
                        tokens,
                        logprob,
                        forced: false,
                    });
                }
                if s.finished.len() >= cfg.beam_size {
                    break;
                }
            }
            let best_alive = s.alive.iter().map(|h| h.score(cfg.alpha)).fold(f64::NEG_INFINITY, f64::max);
            let settled = cfg.alpha == 0.0
                && s.best_finished(cfg.alpha).is_some_and(|f| f.score(cfg.alpha) >= best_alive);
            s.done = s.alive.is_empty() || s.finished.len() >= cfg.beam_size || settled;
        }
    }
    items
        .into_iter()
        .map(|s| {
            let best = s
                .best_finished(cfg.alpha)
                .ok_or_else(|| Error::invalid("beam search finished without a hypothesis"))?;
            Ok(Generation {
                sequence: TokenSequence {
                    lang,
                    ids: best.tokens.clone(),
                },
                logprob: best.logprob,
                forced_eos: best.forced,
            })
        })
        .collect()
}

/// Argmax decoding (lowest id on ties), batched over items.
pub fn greedy_batch(scorer: &dyn StepScorer, n_items: usize, lang: Lang, max_len: usize) -> Result<Vec<Generation>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let bos = Vocab::bos(lang);
    let mut seqs: Vec<(Vec<u32>, f64, bool)> = vec![(vec![bos], 0.0, false); n_items];
    let mut open: Vec<usize> = (0..n_items).collect();
    while !open.is_empty() {
        let requests: Vec<(usize, &[u32])> = open.iter().map(|&i| (i, seqs[i].0.as_slice())).collect();
        let scores = scorer.log_probs(&requests)?;
        let mut still = Vec::new();
        for (&i, lp) in open.iter().zip(&scores) {
            let mut arg = 0;
            for (t, &l) in lp.iter().enumerate() {
                if l > lp[arg] {
                    arg = t;
                }
            }
            let s = &mut seqs[i];
            s.0.push(arg as u32);
            s.1 += lp[arg];
            if arg as u32 == EOS {
                continue;
            }
            if s.0.len() - 1 >= max_len {
                s.0.push(EOS);
                s.2 = true;
                continue;
            }
            still.push(i);
        }
        open = still;
    }
    Ok(seqs
        .into_iter()
        .map(|(ids, logprob, forced_eos)| Generation {
            sequence: TokenSequence {
                lang,
                ids: ids[1..].to_vec(),
            },
            logprob,
            forced_eos,
        })
        .collect())
}

pub fn beam_search(c: &Coordinate, lang: Lang, cfg: &DecodeConfig, model: &Model) -> Result<Generation> {
    let scorer = ModelScorer::new(model, vec![c.as_slice().to_vec()])?;
    Ok(beam_search_batch(&scorer, 1, lang, cfg)?.remove(0))
}

pub fn greedy(c: &Coordinate, lang: Lang, max_len: usize, model: &Model) -> Result<Generation> {
    let scorer = ModelScorer::new(model, vec![c.as_slice().to_vec()])?;
    Ok(greedy_batch(&scorer, 1, lang, max_len)?.remove(0))
}

/// Vision coordinates for a batch of items.
pub fn vision_coords(model: &Model, items: &[&VisionItem]) -> Result<Vec<Vec<f32>>> {
    encode_chunks(model, items, |mc, b, x| vision_batch(mc, b, x))
}

/// Multilingual-encoder coordinates for a batch of sentences.
pub fn text_coords(model: &Model, items: &[&TokenSequence]) -> Result<Vec<Vec<f32>>> {
    let ids: Vec<&[u32]> = items.iter().map(|t| t.ids.as_slice()).collect();
    encode_chunks(model, &ids, |mc, b, x| multi_batch(mc, b, x))
}

pub fn caption_batch(items: &[&VisionItem], lang: Lang, model: &Model, cfg: &DecodeConfig) -> Result<Vec<Generation>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let scorer = ModelScorer::new(model, vision_coords(model, items)?)?;
    beam_search_batch(&scorer, items.len(), lang, cfg)
}

pub fn translate_batch(
    items: &[&TokenSequence],
    tgt: Lang,
    model: &Model,
    cfg: &DecodeConfig,
) -> Result<Vec<Generation>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let scorer = ModelScorer::new(model, text_coords(model, items)?)?;
    beam_search_batch(&scorer, items.len(), tgt, cfg)
}

/// Vision to text in `lang`: no noise is added at inference.
pub fn caption(v: &VisionItem, lang: Lang, model: &Model, cfg: &DecodeConfig) -> Result<Generation> {
    Ok(caption_batch(&[v], lang, model, cfg)?.remove(0))
}

/// Text to text in `tgt`; `tgt == t.lang` reconstructs the input.
pub fn translate(t: &TokenSequence, tgt: Lang, model: &Model, cfg: &DecodeConfig) -> Result<Generation> {
    Ok(translate_batch(&[t], tgt, model, cfg)?.remove(0))
}
