//! Aligns the vision and multilingual encoders to the pivot text space and
//! prints retrieval diagnostics before and after.
//!
//!     cargo run --release --example align

use latent_bridge::corpus::{Corpus, CorpusConfig};
use latent_bridge::pipeline::{alignment_report, Domain, PipelineConfig};
use latent_bridge::training::EpochLog;

fn main() -> latent_bridge::Result<()> {
    let corpus = Corpus::generate(CorpusConfig::default())?;
    let cfg = PipelineConfig::default();
    let pairs = Domain::default_pairs();

    let show = |title: &str, model| -> latent_bridge::Result<()> {
        println!("{title}");
        for p in alignment_report(&corpus, model, &pairs)?.pairs {
            println!(
                "  {:>6} - {:<6} r@1 {:.3}  r@5 {:.3}  cos {:.3} (cross {:.3})",
                p.domain_a, p.domain_b, p.recall_at_1, p.recall_at_5, p.matched_cosine, p.cross_cosine
            );
        }
        Ok(())
    };
    let fresh = cfg.fresh_checkpoint(&corpus)?;
    show("untrained", &fresh.model)?;
    let aligned = cfg.align(&corpus, &mut |e: &EpochLog| println!("{e}"))?;
    show("aligned", &aligned.model)?;
    aligned.save("aligned.ckpt")?;
    Ok(())
}
