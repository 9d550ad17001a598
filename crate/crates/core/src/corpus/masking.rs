use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::language::{TokenSequence, Vocab, MASK};
use crate::error::{Error, Result};

/// What happens to a token once it is selected for corruption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskScheme {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskScheme {
    fn default() -> Self {
        Self {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

/// Selects each surface token with probability `percent / 100`; selected
/// tokens become MASK, a random surface token of the same language, or stay.
/// EOS is never selected.
pub fn mask_tokens(
    t: &TokenSequence,
    percent: f64,
    scheme: MaskScheme,
    vocab: &Vocab,
    seed: u64,
) -> Result<TokenSequence> {
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::invalid(format!("mask percent must be in [0, 100], got {percent}")));
    }
    let total = scheme.mask + scheme.random + scheme.keep;
    if scheme.mask < 0.0 || scheme.random < 0.0 || scheme.keep < 0.0 || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("mask scheme must be a distribution, got {scheme:?}")));
    }
    if percent == 0.0 {
        return Ok(t.clone());
    }
    let p = percent / 100.0;
    let range = vocab.surface_range(t.lang);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t.surface().len();
    let mut ids = t.ids.clone();
    for id in ids.iter_mut().take(n) {
        if rng.gen::<f64>() >= p {
            continue;
        }
        let u = rng.gen::<f64>();
        if u < scheme.mask {
            *id = MASK;
        } else if u < scheme.mask + scheme.random {
            *id = rng.gen_range(range.clone());
        }
    }
    Ok(TokenSequence { lang: t.lang, ids })
}
