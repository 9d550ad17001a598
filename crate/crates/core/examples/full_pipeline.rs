//! Trains every stage on the default corpus and reports zero-shot scores.
//!
//!     cargo run --release --example full_pipeline

use std::time::Instant;

use latent_bridge::corpus::{Corpus, CorpusConfig, Lang};
use latent_bridge::pipeline::{alignment_report, evaluate_task, Domain, PipelineConfig, Task};

fn main() -> latent_bridge::Result<()> {
    let start = Instant::now();
    let corpus = Corpus::generate(CorpusConfig::default())?;
    let cfg = PipelineConfig::default();
    let mut log = |e: &latent_bridge::training::EpochLog| {
        println!("{e} t={:.0}s", start.elapsed().as_secs_f64());
    };
    let aligned = cfg.align(&corpus, &mut log)?;
    for p in alignment_report(&corpus, &aligned.model, &Domain::default_pairs())?.pairs {
        println!(
            "{}<->{} r@1={:.3} r@5={:.3} matched={:.3} cross={:.3}",
            p.domain_a, p.domain_b, p.recall_at_1, p.recall_at_5, p.matched_cosine, p.cross_cosine
        );
    }
    let cap = cfg.reconstruct(&corpus, &aligned, cfg.caption_corruption, &Lang::ALL, &mut log)?;
    let task = Task::Caption { tgt: Lang::L1 };
    let m = evaluate_task(&corpus, &cap.model, task, &cfg.decode)?;
    println!("{task} bleu4={:.4} rougeL={:.4} t={:.0}s", m.bleu4, m.rouge_l, start.elapsed().as_secs_f64());
    let tr = cfg.reconstruct(&corpus, &aligned, cfg.translation_corruption, &Lang::ALL, &mut log)?;
    let task = Task::Translate { src: Lang::L1, tgt: Lang::L2 };
    let m = evaluate_task(&corpus, &tr.model, task, &cfg.decode)?;
    println!("{task} bleu4={:.4} rougeL={:.4} t={:.0}s", m.bleu4, m.rouge_l, start.elapsed().as_secs_f64());
    Ok(())
}
