//! Saves a checkpoint, reloads it byte for byte and shows how a damaged
//! file is reported.
//!
//!     cargo run --release --example checkpoint

use latent_bridge::corpus::{Corpus, CorpusConfig};
use latent_bridge::training::{train_vision_alignment, Checkpoint, Stage, TrainConfig};

fn main() -> latent_bridge::Result<()> {
    let corpus = Corpus::generate(CorpusConfig {
        scenes: 400,
        test: 40,
        ..CorpusConfig::default()
    })?;
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::for_stage(Stage::AlignVision)
    };
    let ck = train_vision_alignment(&corpus, &cfg, None, &mut |e| println!("{e}"))?;

    let dir = std::env::temp_dir().join("latent-bridge-example");
    std::fs::create_dir_all(&dir).map_err(|e| latent_bridge::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("a.ckpt");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    let bytes = ck.to_bytes()?;
    println!("{} bytes, reload identical: {}", bytes.len(), back.to_bytes()? == bytes);
    for rec in &back.provenance {
        println!("stage {} seed {} epochs {} steps {} loss {:?}", rec.stage, rec.seed, rec.epochs, rec.steps, rec.final_loss);
    }

    let mut damaged = bytes.clone();
    damaged[0] ^= 0xff;
    println!("damaged magic: {}", Checkpoint::from_bytes(&damaged).unwrap_err());
    println!("truncated: {}", Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err());
    Ok(())
}
