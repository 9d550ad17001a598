//! Synthetic multi-domain corpus.
//!
//! Every item is a rendering of a [`Scene`]: one continuous vision modality
//! and four token languages. `L0` is the pivot; `L1..L3` are substitution
//! ciphers of it with their own fixed word orders, so the ground-truth
//! translation of any sentence is known exactly.

mod io;
mod language;
mod masking;
mod pairs;
mod scene;
mod vision;

pub use io::{read_corpus, write_corpus};
pub(crate) use io::{read_lines, TextRecord, VisionRecord};
pub use language::{Grammar, Lang, TokenSequence, Vocab, EOS, MASK, PAD, SENTENCE_WORDS};
pub use masking::{mask_tokens, MaskScheme};
pub use pairs::{build_pairsets, Corpus, CorpusConfig, Item, Pair, PairSet, PairSetName, TestItem};
pub use scene::{gen_scenes, Scene, Inventory};
pub use vision::{VisionItem, VisionRenderer};

/// Deterministic 64-bit mixing of a seed with a stream index (splitmix64).
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
