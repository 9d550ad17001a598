//! Staged training: vision alignment, cross-lingual alignment, denoising
//! reconstruction and supervised fine-tuning, plus checkpoints.

mod checkpoint;
mod optim;
mod stages;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageRecord, MAGIC, VERSION};
pub use optim::{AdamW, OptimConfig};
pub(crate) use stages::encode_chunks;
pub use stages::{finetune_supervised, train_crosslingual_alignment, train_dlr, train_vision_alignment};

use crate::corpus::Lang;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    AlignVision,
    AlignLingual,
    Dlr,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Self::AlignVision, Self::AlignLingual, Self::Dlr, Self::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Self::AlignVision => "align-vision",
            Self::AlignLingual => "align-lingual",
            Self::Dlr => "dlr",
            Self::Finetune => "finetune",
        }
    }

    /// The stage whose output this stage starts from.
    pub fn requires(self) -> Option<Stage> {
        match self {
            Self::AlignVision => None,
            Self::AlignLingual => Some(Self::AlignVision),
            Self::Dlr => Some(Self::AlignLingual),
            Self::Finetune => Some(Self::Dlr),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('_', "-");
        Self::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown stage `{s}` (expected align-vision, align-lingual, dlr or finetune)"
            ))
        })
    }
}

/// Token masking rate and coordinate noise used during reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub mask_percent: f64,
    pub noise_std: f32,
}

impl Corruption {
    pub const NONE: Corruption = Corruption {
        mask_percent: 0.0,
        noise_std: 0.0,
    };
    pub const CAPTIONING: Corruption = Corruption {
        mask_percent: 0.0,
        noise_std: 0.1,
    };
    pub const TRANSLATION: Corruption = Corruption {
        mask_percent: 5.0,
        noise_std: 0.01,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub weights: LossWeights,
    pub corruption: Corruption,
    pub optim: OptimConfig,
    pub batch_align: usize,
    pub batch_dlr: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Languages used by cross-lingual alignment and reconstruction.
    pub langs: Vec<Lang>,
    /// Also regress pivot sentences through the multilingual encoder onto
    /// their own pivot coordinates during cross-lingual alignment.
    pub align_pivot_text: bool,
    pub train_encoder_in_dlr: bool,
    pub finetune_ratio: f64,
    pub finetune_lang: Lang,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (weights, corruption, epochs) = match stage {
            Stage::AlignVision => (LossWeights::CONTRASTIVE, Corruption::NONE, 15),
            Stage::AlignLingual => (LossWeights::REGRESSION, Corruption::NONE, 60),
            Stage::Dlr => (LossWeights::REGRESSION, Corruption::CAPTIONING, 30),
            Stage::Finetune => (LossWeights::REGRESSION, Corruption::NONE, 6),
        };
        TrainConfig {
            stage,
            weights,
            corruption,
            optim: OptimConfig::default(),
            batch_align: 64,
            batch_dlr: 32,
            epochs,
            seed: 7,
            langs: Lang::ALL.to_vec(),
            align_pivot_text: true,
            train_encoder_in_dlr: false,
            finetune_ratio: 0.01,
            finetune_lang: Lang::L1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.optim.learning_rate > 0.0) || !(self.optim.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be positive, weight decay non-negative".into()));
        }
        if self.batch_align == 0 || self.batch_dlr == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(0.0..=100.0).contains(&self.corruption.mask_percent) || !(self.corruption.noise_std >= 0.0) {
            return Err(Error::Config(format!("invalid corruption {:?}", self.corruption)));
        }
        if self.langs.is_empty() {
            return Err(Error::Config("language list is empty".into()));
        }
        Ok(())
    }

    pub(crate) fn record(&self, steps: usize, final_loss: f64) -> StageRecord {
        StageRecord {
            stage: self.stage.name().to_string(),
            seed: self.seed,
            epochs: self.epochs,
            steps,
            lambda1: self.weights.lambda1,
            lambda2: self.weights.lambda2,
            tau: self.weights.tau,
            mask_percent: self.corruption.mask_percent,
            noise_std: self.corruption.noise_std,
            langs: self.langs.iter().map(|l| l.to_string()).collect(),
            final_loss: final_loss.is_finite().then_some(final_loss),
            finetune_pairs: None,
        }
    }
}

/// One per-epoch progress line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} stage={} loss={:.6}", self.epoch, self.stage, self.loss)
    }
}
