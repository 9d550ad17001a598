//! Corpus BLEU-4, ROUGE-L and retrieval diagnostics over the shared space.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, TokenSequence, Vocab};
use crate::error::{Error, Result};

const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with one reference per candidate.
///
/// Clipped n-gram counts are summed over the corpus before the precisions
/// are formed. A zero match count for n >= 2 is smoothed by adding one to
/// numerator and denominator; the unigram precision is never smoothed.
pub fn bleu4<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("BLEU needs a non-empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = if n > 0 && matches[n] == 0 {
            (1.0, totals[n] as f64 + 1.0)
        } else {
            (matches[n] as f64, totals[n] as f64)
        };
        log_sum += 0.25 * (m / t).ln();
    }
    let bp = (1.0 - r_len as f64 / c_len as f64).exp().min(1.0);
    Ok(bp * log_sum.exp())
}

fn lcs<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with beta = 1.2, maximized over the references.
pub fn rouge_l<T: Eq>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if candidate.is_empty() || references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::invalid("ROUGE-L needs non-empty candidate and references"));
    }
    let mut best = 0.0f64;
    for r in references {
        let l = lcs(candidate, r) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / candidate.len() as f64;
        let rec = l / r.len() as f64;
        let b2 = ROUGE_BETA * ROUGE_BETA;
        best = best.max((1.0 + b2) * p * rec / (rec + b2 * p));
    }
    Ok(best)
}

/// Mean sentence ROUGE-L over a corpus; empty candidates score zero.
pub fn corpus_rouge_l<T: Eq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::invalid("ROUGE-L needs equally long, non-empty corpora"));
    }
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        if !c.is_empty() {
            total += rouge_l(c, std::slice::from_ref(r))?;
        }
    }
    Ok(total / candidates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangMetrics {
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub per_language: BTreeMap<String, LangMetrics>,
    pub samples: usize,
}

fn surfaces(seqs: &[&TokenSequence]) -> Vec<Vec<u32>> {
    seqs.iter().map(|s| s.surface().to_vec()).collect()
}

impl MetricReport {
    /// Scores surface tokens (EOS stripped); the per-language breakdown
    /// groups pairs by reference language.
    pub fn compute(candidates: &[&TokenSequence], references: &[&TokenSequence]) -> Result<Self> {
        let (c, r) = (surfaces(candidates), surfaces(references));
        let mut per_language = BTreeMap::new();
        for lang in Lang::ALL {
            let idx: Vec<usize> = (0..references.len()).filter(|&i| references[i].lang == lang).collect();
            if idx.is_empty() {
                continue;
            }
            let lc: Vec<Vec<u32>> = idx.iter().map(|&i| c[i].clone()).collect();
            let lr: Vec<Vec<u32>> = idx.iter().map(|&i| r[i].clone()).collect();
            per_language.insert(
                lang.to_string(),
                LangMetrics {
                    bleu4: bleu4(&lc, &lr)?,
                    rouge_l: corpus_rouge_l(&lc, &lr)?,
                    samples: idx.len(),
                },
            );
        }
        Ok(MetricReport {
            bleu4: bleu4(&c, &r)?,
            rouge_l: corpus_rouge_l(&c, &r)?,
            per_language,
            samples: c.len(),
        })
    }
}

/// Fraction of candidate tokens (EOS excluded) that are surface tokens of
/// the sequence's own language.
pub fn language_purity(vocab: &Vocab, seqs: &[&TokenSequence]) -> f64 {
    let mut total = 0usize;
    let mut pure = 0usize;
    for s in seqs {
        for &t in s.surface() {
            total += 1;
            if vocab.lang_of(t) == Some(s.lang) {
                pure += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        pure as f64 / total as f64
    }
}

/// Position-wise token agreement, counted over the reference length.
pub fn token_accuracy(candidates: &[&TokenSequence], references: &[&TokenSequence]) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (c, r) in candidates.iter().zip(references) {
        total += r.ids.len();
        hit += c.ids.iter().zip(&r.ids).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPairReport {
    pub domain_a: String,
    pub domain_b: String,
    pub matched_cosine: f64,
    pub cross_cosine: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub pairs: Vec<DomainPairReport>,
}

impl AlignmentReport {
    pub fn get(&self, a: &str, b: &str) -> Option<&DomainPairReport> {
        self.pairs.iter().find(|p| p.domain_a == a && p.domain_b == b)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Retrieval from `a` into `b`, where `a[i]` matches `b[i]`.
///
/// Similarity is the dot product, the cosine for unit-norm inputs. The
/// true match of row `i` is outranked by every `j` with a higher score and
/// by every `j < i` with an equal one.
pub fn retrieval_diagnostics(
    domain_a: &str,
    domain_b: &str,
    a: &[Vec<f32>],
    b: &[Vec<f32>],
) -> Result<DomainPairReport> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} vs {} coordinates", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("retrieval needs at least two items"));
    }
    let n = a.len();
    let (mut r1, mut r5) = (0usize, 0usize);
    let (mut matched, mut cross) = (0.0f64, 0.0f64);
    for i in 0..n {
        let sims: Vec<f64> = b.iter().map(|bj| dot(&a[i], bj)).collect();
        let own = sims[i];
        let rank = sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < i))
            .count();
        r1 += (rank < 1) as usize;
        r5 += (rank < 5) as usize;
        matched += own;
        cross += sims.iter().sum::<f64>() - own;
    }
    Ok(DomainPairReport {
        domain_a: domain_a.to_string(),
        domain_b: domain_b.to_string(),
        matched_cosine: matched / n as f64,
        cross_cosine: cross / (n * (n - 1)) as f64,
        recall_at_1: r1 as f64 / n as f64,
        recall_at_5: r5 as f64 / n as f64,
        count: n,
    })
}
