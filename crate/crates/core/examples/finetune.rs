//! Fine-tunes the zero-shot caption decoder on a small labelled fraction of
//! downstream (vision, caption) pairs.
//!
//!     cargo run --release --example finetune

use latent_bridge::corpus::{Corpus, CorpusConfig, Lang};
use latent_bridge::pipeline::{evaluate_task, PipelineConfig, Task};
use latent_bridge::training::{finetune_supervised, EpochLog, Stage, TrainConfig};

fn main() -> latent_bridge::Result<()> {
    let corpus = Corpus::generate(CorpusConfig::default())?;
    let cfg = PipelineConfig::default();
    let mut log = |e: &EpochLog| println!("{e}");
    let aligned = cfg.align(&corpus, &mut log)?;
    let zero = cfg.reconstruct(&corpus, &aligned, cfg.caption_corruption, &Lang::ALL, &mut log)?;
    let task = Task::Caption { tgt: Lang::L1 };
    println!("ratio 0     bleu4 {:.4}", evaluate_task(&corpus, &zero.model, task, &cfg.decode)?.bleu4);

    for ratio in [0.01, 0.1, 1.0] {
        let ft = TrainConfig {
            finetune_ratio: ratio,
            finetune_lang: Lang::L1,
            ..TrainConfig::for_stage(Stage::Finetune)
        };
        let ck = finetune_supervised(&corpus, &ft, Some(zero.clone()), &mut |_| {})?;
        let pairs = ck.provenance.last().and_then(|r| r.finetune_pairs).unwrap_or(0);
        let m = evaluate_task(&corpus, &ck.model, task, &cfg.decode)?;
        println!("ratio {ratio:<5} bleu4 {:.4} ({pairs} pairs)", m.bleu4);
    }
    Ok(())
}
