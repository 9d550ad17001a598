//! Trains a decoder from text alone and captions held-out vision items in
//! every language, comparing beam search with greedy decoding.
//!
//!     cargo run --release --example caption

use latent_bridge::corpus::{Corpus, CorpusConfig, Lang};
use latent_bridge::inference::{caption, greedy};
use latent_bridge::model::encode_vision;
use latent_bridge::pipeline::{evaluate_task, PipelineConfig, Task};
use latent_bridge::training::EpochLog;

fn main() -> latent_bridge::Result<()> {
    let corpus = Corpus::generate(CorpusConfig::default())?;
    let cfg = PipelineConfig::default();
    let mut log = |e: &EpochLog| println!("{e}");
    let aligned = cfg.align(&corpus, &mut log)?;
    let ck = cfg.reconstruct(&corpus, &aligned, cfg.caption_corruption, &Lang::ALL, &mut log)?;
    let model = &ck.model;

    for item in corpus.test.iter().take(3) {
        println!("scene {}", item.scene_id);
        for lang in Lang::ALL {
            let g = caption(&item.vision, lang, model, &cfg.decode)?;
            println!("  {lang} {:+.3}  {}", g.logprob, corpus.vocab.detokenize(&g.sequence));
            println!("  ref      {}", corpus.vocab.detokenize(item.text(lang)));
        }
        let coord = encode_vision(&item.vision, model)?;
        let g = greedy(&coord, Lang::L1, cfg.decode.max_len, model)?;
        println!("  greedy L1 {:+.3}  {}", g.logprob, corpus.vocab.detokenize(&g.sequence));
    }
    for tgt in [Lang::L1, Lang::L2, Lang::L3] {
        let task = Task::Caption { tgt };
        let m = evaluate_task(&corpus, model, task, &cfg.decode)?;
        println!("{task} bleu4 {:.4} rougeL {:.4}", m.bleu4, m.rouge_l);
    }
    Ok(())
}
