//! Scores hypotheses against references with BLEU-4 and ROUGE-L.
//!
//!     cargo run --example metrics

use latent_bridge::evaluation::{bleu4, corpus_rouge_l, rouge_l};

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn main() -> latent_bridge::Result<()> {
    let hyp = vec![words("a b c d e f")];
    let refs = vec![words("a b c d x y")];
    println!("bleu4 {:.4}", bleu4(&hyp, &refs)?);
    println!("rougeL {:.4}", rouge_l(&words("a b c"), &[words("a c b")])?);

    let hyps = vec![words("the red cube sits left"), words("a small blue ball")];
    let refs = vec![words("the red cube sits right"), words("a small blue ball")];
    println!("corpus bleu4 {:.4} rougeL {:.4}", bleu4(&hyps, &refs)?, corpus_rouge_l(&hyps, &refs)?);
    Ok(())
}
