//! Generates the synthetic corpus, writes it to disk and shows one scene
//! in every language.
//!
//!     cargo run --release --example gen_corpus -- /tmp/corpus

use latent_bridge::corpus::{read_corpus, write_corpus, Corpus, CorpusConfig, Lang, PairSetName};

fn main() -> latent_bridge::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "corpus".into());
    let corpus = Corpus::generate(CorpusConfig::default())?;
    write_corpus(out.as_ref(), &corpus, true)?;
    let back = read_corpus(out.as_ref())?;
    assert_eq!(back.test.len(), corpus.test.len());

    println!("vocabulary {} tokens, {} test scenes", corpus.vocab.len(), corpus.test.len());
    for name in PairSetName::ALL {
        let set = corpus.pairset(name);
        let p = &set.pairs[0];
        println!("{name}: {} pairs ({} - {})", set.pairs.len(), p.a.domain(), p.b.lang);
    }
    let item = &corpus.test[0];
    println!("scene {} vision {}x{}", item.scene_id, item.vision.frames.len(), item.vision.dim());
    for lang in Lang::ALL {
        println!("  {lang}: {}", corpus.vocab.detokenize(item.text(lang)));
    }
    println!("written to {out}");
    Ok(())
}
