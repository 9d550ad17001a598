//! Alignment and reconstruction losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{TokenSequence, Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::{decoder_logits, Bound, ModelConfig};
use crate::numerics::Var;

pub const UNIT_TOLERANCE: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
    pub tau: f32,
}

impl LossWeights {
    /// Contrastive only, as for vision alignment.
    pub const CONTRASTIVE: LossWeights = LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
        tau: 0.07,
    };
    /// Regression only, as for cross-lingual alignment.
    pub const REGRESSION: LossWeights = LossWeights {
        lambda1: 0.0,
        lambda2: 1.0,
        tau: 0.07,
    };

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.lambda1) || !unit.contains(&self.lambda2) {
            return Err(Error::invalid(format!(
                "loss weights must lie in [0, 1], got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// K paired rows: row k of `s` (pivot side) goes with row k of `d`.
#[derive(Clone, Copy)]
pub struct AlignmentBatch<'t> {
    pub s: Var<'t>,
    pub d: Var<'t>,
}

impl<'t> AlignmentBatch<'t> {
    pub fn new(s: Var<'t>, d: Var<'t>) -> Result<Self> {
        let (ss, ds) = (s.shape(), d.shape());
        if ss.len() != 2 || ss != ds || ss[0] == 0 {
            return Err(Error::Shape {
                op: "alignment batch",
                left: ss,
                right: ds,
            });
        }
        Ok(AlignmentBatch { s, d })
    }

    pub fn k(&self) -> usize {
        self.s.shape()[0]
    }

    fn check_unit(&self) -> Result<()> {
        let width = self.s.shape()[1];
        for (side, v) in [("s", self.s), ("d", self.d)] {
            for (k, row) in v.to_vec().chunks(width).enumerate() {
                let n = crate::model::norm(row);
                if (n - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::invalid(format!("row {k} of {side} has norm {n}, expected 1")));
                }
            }
        }
        Ok(())
    }
}

/// Symmetric InfoNCE with in-batch negatives.
pub fn info_nce<'t>(b: &AlignmentBatch<'t>, tau: f32) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    b.check_unit()?;
    let k = b.k();
    let sim = b.s.matmul_t(&b.d)?.scale(1.0 / tau);
    let diag: Vec<usize> = (0..k).collect();
    let w = vec![0.5 / k as f32; k];
    let s2d = sim.cross_entropy(&diag, &w)?;
    let d2s = sim.transpose()?.cross_entropy(&diag, &w)?;
    s2d.add(&d2s)
}

/// `(1 / 2K) Σ_k ‖s_k − d_k‖²`.
pub fn mse<'t>(b: &AlignmentBatch<'t>) -> Result<Var<'t>> {
    let diff = b.s.sub(&b.d)?;
    Ok(diff.mul(&diff)?.sum().scale(0.5 / b.k() as f32))
}

/// `λ1 · info_nce + λ2 · mse`; a term with zero weight is not evaluated.
pub fn cda_loss<'t>(b: &AlignmentBatch<'t>, w: LossWeights) -> Result<Var<'t>> {
    w.validate()?;
    let tape = b.s.tape();
    let mut total = tape.constant_from(vec![1], vec![0.0])?;
    if w.lambda1 > 0.0 {
        total = total.add(&info_nce(b, w.tau)?.scale(w.lambda1))?;
    }
    if w.lambda2 > 0.0 {
        total = total.add(&mse(b)?.scale(w.lambda2))?;
    }
    Ok(total)
}

/// Adds Normal(0, eps) noise to each component; `eps` is a standard deviation.
pub fn perturb_coordinate(c: &[f32], eps: f32, seed: u64) -> Result<Vec<f32>> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("noise std must be non-negative, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(c.to_vec());
    }
    let normal = Normal::new(0.0f32, eps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(c.iter().map(|&x| x + normal.sample(&mut rng)).collect())
}

/// Teacher-forced reconstruction cross-entropy. Row `i` of `memory`
/// conditions target `i`, which is decoded after its language's BOS token.
/// Each sentence contributes its per-position mean; the batch is averaged.
pub fn dlr_loss<'t>(
    cfg: &ModelConfig,
    b: &Bound<'_, 't>,
    memory: &Var<'t>,
    targets: &[&TokenSequence],
) -> Result<Var<'t>> {
    if targets.is_empty() {
        return Err(Error::invalid("empty reconstruction batch"));
    }
    let mut inputs = Vec::with_capacity(targets.len());
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    let scale = 1.0 / targets.len() as f32;
    for t in targets {
        if t.ids.last() != Some(&EOS) {
            return Err(Error::invalid("reconstruction target must end with EOS"));
        }
        let mut input = Vec::with_capacity(t.ids.len());
        input.push(Vocab::bos(t.lang));
        input.extend_from_slice(&t.ids[..t.ids.len() - 1]);
        inputs.push(input);
        labels.extend(t.ids.iter().map(|&i| i as usize));
        weights.extend(std::iter::repeat(scale / t.ids.len() as f32).take(t.ids.len()));
    }
    let refs: Vec<&[u32]> = inputs.iter().map(|v| v.as_slice()).collect();
    decoder_logits(cfg, b, memory, &refs)?.cross_entropy(&labels, &weights)
}
