//! `key=value` run configuration with `[section]` headers.
//!
//! ```text
//! [corpus]
//! seed=1
//! scenes=2000
//!
//! [train]
//! seed=7
//!
//! [train.dlr]
//! epochs=30
//! noise_std=0.1
//! ```
//!
//! `[train]` applies to every stage; `[train.<stage>]` overrides one stage.

use std::path::PathBuf;
use std::str::FromStr;

use crate::corpus::{CorpusConfig, Lang};
use crate::error::{Error, Result};
use crate::inference::DecodeConfig;
use crate::model::ModelConfig;
use crate::pipeline::PipelineConfig;
use crate::training::{Corruption, Stage, TrainConfig};

/// Model widths; vocabulary size and vision width always come from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelShape {
            d: m.d,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            max_len: m.max_len,
        }
    }
}

impl ModelShape {
    pub fn for_vocab(&self, vocab_size: usize, v_dim: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            max_len: self.max_len,
            vocab_size,
            v_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelShape,
    pub stages: [TrainConfig; 4],
    pub caption_corruption: Corruption,
    pub translation_corruption: Corruption,
    pub decode: DecodeConfig,
    pub corpus_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            model: ModelShape::default(),
            stages: Stage::ALL.map(TrainConfig::for_stage),
            caption_corruption: Corruption::CAPTIONING,
            translation_corruption: Corruption::TRANSLATION,
            decode: DecodeConfig::default(),
            corpus_dir: None,
            out_dir: None,
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value `{v}` for `{key}`")))
}

fn flag(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: `{key}` expects true or false, got `{v}`"))),
    }
}

fn langs(line: usize, v: &str) -> Result<Vec<Lang>> {
    let out: Vec<Lang> = v
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()
        .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
    if out.is_empty() {
        return Err(Error::Config(format!("line {line}: empty language list")));
    }
    Ok(out)
}

fn set_train(c: &mut TrainConfig, line: usize, key: &str, v: &str) -> Result<bool> {
    match key {
        "lambda1" => c.weights.lambda1 = value(line, key, v)?,
        "lambda2" => c.weights.lambda2 = value(line, key, v)?,
        "tau" => c.weights.tau = value(line, key, v)?,
        "mask_percent" => c.corruption.mask_percent = value(line, key, v)?,
        "noise_std" => c.corruption.noise_std = value(line, key, v)?,
        "learning_rate" => c.optim.learning_rate = value(line, key, v)?,
        "warmup_steps" => c.optim.warmup_steps = value(line, key, v)?,
        "weight_decay" => c.optim.weight_decay = value(line, key, v)?,
        "beta1" => c.optim.beta1 = value(line, key, v)?,
        "beta2" => c.optim.beta2 = value(line, key, v)?,
        "eps" => c.optim.eps = value(line, key, v)?,
        "batch_align" => c.batch_align = value(line, key, v)?,
        "batch_dlr" => c.batch_dlr = value(line, key, v)?,
        "epochs" => c.epochs = value(line, key, v)?,
        "seed" => c.seed = value(line, key, v)?,
        "langs" => c.langs = langs(line, v)?,
        "align_pivot_text" => c.align_pivot_text = flag(line, key, v)?,
        "train_encoder_in_dlr" => c.train_encoder_in_dlr = flag(line, key, v)?,
        "finetune_ratio" => c.finetune_ratio = value(line, key, v)?,
        "finetune_lang" => {
            c.finetune_lang = v.parse().map_err(|e| Error::Config(format!("line {line}: {e}")))?
        }
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                let known = matches!(section.as_str(), "corpus" | "model" | "train" | "decode" | "paths" | "ablate")
                    || section
                        .strip_prefix("train.")
                        .is_some_and(|s| s.parse::<Stage>().is_ok());
                if !known {
                    return Err(Error::Config(format!("line {n}: unknown section [{section}]")));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let ok = match section.as_str() {
                "corpus" => {
                    let c = &mut cfg.corpus;
                    match k {
                        "seed" => c.seed = value(n, k, v)?,
                        "scenes" => c.scenes = value(n, k, v)?,
                        "test" => c.test = value(n, k, v)?,
                        "frames" => c.frames = value(n, k, v)?,
                        "v_dim" => c.v_dim = value(n, k, v)?,
                        "jitter" => c.jitter = value(n, k, v)?,
                        _ => return Err(unknown(n, &section, k)),
                    }
                    true
                }
                "model" => {
                    let m = &mut cfg.model;
                    match k {
                        "d" => m.d = value(n, k, v)?,
                        "enc_layers" => m.enc_layers = value(n, k, v)?,
                        "dec_layers" => m.dec_layers = value(n, k, v)?,
                        "heads" => m.heads = value(n, k, v)?,
                        "ffn_mult" => m.ffn_mult = value(n, k, v)?,
                        "max_len" => m.max_len = value(n, k, v)?,
                        _ => return Err(unknown(n, &section, k)),
                    }
                    true
                }
                "decode" => {
                    let d = &mut cfg.decode;
                    match k {
                        "beam_size" => d.beam_size = value(n, k, v)?,
                        "max_len" => d.max_len = value(n, k, v)?,
                        "alpha" => d.alpha = value(n, k, v)?,
                        _ => return Err(unknown(n, &section, k)),
                    }
                    true
                }
                "paths" => {
                    match k {
                        "corpus" => cfg.corpus_dir = Some(PathBuf::from(v)),
                        "out" => cfg.out_dir = Some(PathBuf::from(v)),
                        _ => return Err(unknown(n, &section, k)),
                    }
                    true
                }
                "ablate" => {
                    match k {
                        "caption_mask_percent" => cfg.caption_corruption.mask_percent = value(n, k, v)?,
                        "caption_noise_std" => cfg.caption_corruption.noise_std = value(n, k, v)?,
                        "translation_mask_percent" => cfg.translation_corruption.mask_percent = value(n, k, v)?,
                        "translation_noise_std" => cfg.translation_corruption.noise_std = value(n, k, v)?,
                        _ => return Err(unknown(n, &section, k)),
                    }
                    true
                }
                "train" => {
                    let mut all = true;
                    for s in cfg.stages.iter_mut() {
                        all &= set_train(s, n, k, v)?;
                    }
                    all
                }
                "" => return Err(Error::Config(format!("line {n}: `{k}` appears before any [section]"))),
                s => {
                    let stage: Stage = s["train.".len()..].parse()?;
                    set_train(&mut cfg.stages[stage as usize], n, k, v)?
                }
            };
            if !ok {
                return Err(unknown(n, &section, k));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.stages {
            s.validate()?;
        }
        self.decode.validate()?;
        if self.decode.max_len > self.model.max_len {
            return Err(Error::Config(format!(
                "decode max_len {} exceeds model max_len {}",
                self.decode.max_len, self.model.max_len
            )));
        }
        Ok(())
    }

    pub fn stage(&self, s: Stage) -> &TrainConfig {
        &self.stages[s as usize]
    }

    pub fn stage_mut(&mut self, s: Stage) -> &mut TrainConfig {
        &mut self.stages[s as usize]
    }

    /// Every stage seed at once, as the `--seed` flag sets it.
    pub fn set_train_seed(&mut self, seed: u64) {
        for s in self.stages.iter_mut() {
            s.seed = seed;
        }
    }

    pub fn pipeline(&self, vocab_size: usize, v_dim: usize) -> PipelineConfig {
        PipelineConfig {
            model: Some(self.model.for_vocab(vocab_size, v_dim)),
            align_vision: self.stage(Stage::AlignVision).clone(),
            align_lingual: self.stage(Stage::AlignLingual).clone(),
            dlr: self.stage(Stage::Dlr).clone(),
            caption_corruption: self.caption_corruption,
            translation_corruption: self.translation_corruption,
            decode: self.decode,
        }
    }
}

fn unknown(line: usize, section: &str, key: &str) -> Error {
    Error::Config(format!("line {line}: unknown key `{key}` in [{section}]"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_stage_overrides() {
        let cfg = RunConfig::parse(
            "[corpus]\nseed=3\nscenes=400\ntest=40\n[model]\nd=32\n[train]\nseed=11\nepochs=2\n\
             [train.dlr]\nepochs=5\nnoise_std=0.2 # per stage\n[decode]\nbeam_size=1\n[paths]\ncorpus=data\n",
        )
        .unwrap();
        assert_eq!(cfg.corpus.seed, 3);
        assert_eq!(cfg.corpus.scenes, 400);
        assert_eq!(cfg.model.d, 32);
        assert!(cfg.stages.iter().all(|s| s.seed == 11));
        assert_eq!(cfg.stage(Stage::AlignVision).epochs, 2);
        assert_eq!(cfg.stage(Stage::Dlr).epochs, 5);
        assert_eq!(cfg.stage(Stage::Dlr).corruption.noise_std, 0.2);
        assert_eq!(cfg.stage(Stage::AlignVision).corruption.noise_std, 0.0);
        assert_eq!(cfg.decode.beam_size, 1);
        assert_eq!(cfg.corpus_dir, Some(PathBuf::from("data")));
        // stage defaults that were not overridden survive
        assert_eq!(cfg.stage(Stage::AlignLingual).weights.lambda2, 1.0);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        for text in [
            "[corpus]\ncolour=red\n",
            "[train]\nlearning_rte=1\n",
            "[train.pretrain]\nepochs=1\n",
            "[extras]\n",
            "seed=1\n",
            "[model]\nvocab_size=10\n",
            "[corpus]\nseed\n",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text:?}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[corpus]\nseed=abc\n",
            "[train]\nbatch_dlr=0\n",
            "[train]\nlearning_rate=-1\n",
            "[train]\nlangs=L0,L9\n",
            "[train]\nalign_pivot_text=maybe\n",
            "[decode]\nmax_len=99\n",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text:?}");
        }
    }
}
