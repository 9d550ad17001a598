//! The four networks: vision encoder, pivot text encoder, multilingual
//! encoder and multilingual decoder. Every encoder emits a unit-norm
//! [`Coordinate`]; the decoder generates from one.

mod decoder;
mod encoders;
mod params;

use std::fmt;

pub use decoder::{decode_step, decoder_logits, decoder_next_logits};
pub use encoders::{encode_multi, encode_pivot, encode_vision, multi_batch, pivot_batch, vision_batch};
pub use params::{Bound, Param, Parameters};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Network {
    Vision,
    Pivot,
    Multi,
    Decoder,
}

impl Network {
    pub const ALL: [Network; 4] = [Self::Vision, Self::Pivot, Self::Multi, Self::Decoder];

    pub fn prefix(self) -> &'static str {
        match self {
            Self::Vision => "vision.",
            Self::Pivot => "pivot.",
            Self::Multi => "multi.",
            Self::Decoder => "decoder.",
        }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix().trim_end_matches('.'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent and model width.
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub v_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_len: 24,
            vocab_size: 167,
            v_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("v_dim", self.v_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    /// Default widths sized to a corpus's vocabulary and vision features.
    pub fn for_corpus(corpus: &Corpus) -> Self {
        Self {
            vocab_size: corpus.vocab.len(),
            v_dim: corpus.config.v_dim,
            ..Self::default()
        }
    }

    pub fn ffn(&self) -> usize {
        self.d * self.ffn_mult
    }
}

/// Unit-norm point in the shared latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate(Vec<f32>);

impl Coordinate {
    pub const NORM_TOLERANCE: f32 = 1e-5;

    pub fn new(v: Vec<f32>) -> Result<Self> {
        let n = norm(&v);
        if (n - 1.0).abs() > Self::NORM_TOLERANCE {
            return Err(Error::invalid(format!("coordinate norm is {n}, expected 1")));
        }
        Ok(Coordinate(v))
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn normalized(mut v: Vec<f32>) -> Result<Self> {
        let n = norm(&v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(Coordinate(v))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f32 {
        norm(&self.0)
    }

    pub fn cosine(&self, other: &Coordinate) -> f32 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub(crate) fn norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32
}

/// Configuration plus parameters of all four networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// Fresh model: weights ~ Normal(0, 0.02), biases zero, norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::new();
        let mut rng = Parameters::rng(seed);
        encoders::init_vision(&config, &mut params, &mut rng)?;
        encoders::init_text(&config, Network::Pivot, &mut params, &mut rng)?;
        encoders::init_text(&config, Network::Multi, &mut params, &mut rng)?;
        decoder::init_decoder(&config, &mut params, &mut rng)?;
        Ok(Model { config, params })
    }
}

#[cfg(test)]
mod tests;
