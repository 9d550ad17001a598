//! Zero-shot translation between non-pivot languages that never appear
//! together in training data.
//!
//!     cargo run --release --example translate

use latent_bridge::corpus::{Corpus, CorpusConfig, Lang};
use latent_bridge::inference::translate;
use latent_bridge::pipeline::{evaluate_task, PipelineConfig, Task};
use latent_bridge::training::EpochLog;

fn main() -> latent_bridge::Result<()> {
    let corpus = Corpus::generate(CorpusConfig::default())?;
    let cfg = PipelineConfig::default();
    let mut log = |e: &EpochLog| println!("{e}");
    let aligned = cfg.align(&corpus, &mut log)?;
    let ck = cfg.reconstruct(&corpus, &aligned, cfg.translation_corruption, &Lang::ALL, &mut log)?;

    let src = corpus.test[0].text(Lang::L1);
    println!("L1   {}", corpus.vocab.detokenize(src));
    for tgt in [Lang::L0, Lang::L2, Lang::L3] {
        let g = translate(src, tgt, &ck.model, &cfg.decode)?;
        println!("{tgt}   {}", corpus.vocab.detokenize(&g.sequence));
    }
    // free text is tokenized against the shared vocabulary
    let line = corpus.vocab.detokenize(corpus.test[1].text(Lang::L3));
    let parsed = corpus.vocab.tokenize(&line, Lang::L3)?;
    let g = translate(&parsed, Lang::L1, &ck.model, &cfg.decode)?;
    println!("L3 {line}\n-> L1 {}", corpus.vocab.detokenize(&g.sequence));

    for task in Task::standard().into_iter().filter(|t| !t.is_caption()) {
        let m = evaluate_task(&corpus, &ck.model, task, &cfg.decode)?;
        println!("{task} bleu4 {:.4} rougeL {:.4}", m.bleu4, m.rouge_l);
    }
    Ok(())
}
