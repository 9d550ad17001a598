//! Zero-shot generation across modalities and languages through a shared
//! latent coordinate space.
//!
//! A pivot-language text encoder defines the space. Vision features and
//! non-pivot text are mapped onto it using only pairs that include the pivot
//! language, and one decoder learns to rebuild each language from corrupted
//! coordinates of its own text. At inference a vision item or a sentence in
//! any language is encoded, and the decoder is prompted with the target
//! language's start token. This gives captioning and translation for pairs
//! that never appear together in training.
//!
//! [`pipeline`] wires the stages together. The stages themselves live in
//! [`training`], the losses in [`objectives`], and decoding in [`inference`].
//!
//! ```no_run
//! use latent_bridge::corpus::{Corpus, CorpusConfig, Lang};
//! use latent_bridge::pipeline::{evaluate_task, PipelineConfig, Task};
//!
//! let corpus = Corpus::generate(CorpusConfig::default())?;
//! let cfg = PipelineConfig::default();
//! let aligned = cfg.align(&corpus, &mut |_| {})?;
//! let ck = cfg.reconstruct(&corpus, &aligned, cfg.translation_corruption, &Lang::ALL, &mut |_| {})?;
//! let m = evaluate_task(&corpus, &ck.model, Task::Translate { src: Lang::L1, tgt: Lang::L2 }, &cfg.decode)?;
//! println!("{}", m.bleu4);
//! # Ok::<(), latent_bridge::Error>(())
//! ```

pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
