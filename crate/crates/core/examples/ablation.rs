//! Runs ablation variants and prints the score table as TSV. Variants are
//! taken from the command line.
//!
//!     cargo run --release --example ablation -- full no-cda langs=L0,L1

use latent_bridge::corpus::{Corpus, CorpusConfig};
use latent_bridge::pipeline::{run_variant, AblationResult, PipelineConfig, Task, Variant};

fn main() -> latent_bridge::Result<()> {
    let mut names: Vec<String> = std::env::args().skip(1).collect();
    if names.is_empty() {
        names = vec!["full".into(), "no-corruption".into(), "no-cda".into()];
    }
    let variants: Vec<Variant> = names.iter().map(|n| n.parse()).collect::<latent_bridge::Result<_>>()?;
    let corpus = Corpus::generate(CorpusConfig::default())?;
    let cfg = PipelineConfig::default();
    let tasks = Task::standard();

    let mut aligned = None;
    let mut table = AblationResult::default();
    for v in &variants {
        eprintln!("variant {v}");
        if v.uses_alignment() && !matches!(v, Variant::Langs(_)) && aligned.is_none() {
            aligned = Some(cfg.align(&corpus, &mut |_| {})?);
        }
        let r = run_variant(&corpus, &cfg, v, &tasks, aligned.as_ref(), &mut |_| {})?;
        for t in &r.absent {
            eprintln!("  {t} not applicable");
        }
        table.rows.extend(r.rows);
    }
    print!("{}", table.to_tsv());
    Ok(())
}
