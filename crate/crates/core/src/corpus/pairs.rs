use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::language::{Grammar, Lang, TokenSequence, Vocab};
use super::mix_seed;
use super::scene::{gen_scenes, Scene};
use super::vision::{VisionItem, VisionRenderer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub scenes: usize,
    pub test: usize,
    pub frames: usize,
    pub v_dim: usize,
    pub jitter: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenes: 2000,
            test: 200,
            frames: 8,
            v_dim: 64,
            jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PairSetName {
    D1,
    D2,
    D3,
    D4,
}

impl PairSetName {
    pub const ALL: [PairSetName; 4] = [Self::D1, Self::D2, Self::D3, Self::D4];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Partner language of the pivot; `None` for the vision set.
    pub fn partner(self) -> Option<Lang> {
        match self {
            Self::D1 => None,
            Self::D2 => Some(Lang::L1),
            Self::D3 => Some(Lang::L2),
            Self::D4 => Some(Lang::L3),
        }
    }

    pub fn for_lang(lang: Lang) -> Option<PairSetName> {
        Self::ALL.into_iter().find(|p| p.partner() == Some(lang))
    }
}

impl fmt::Display for PairSetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.index() + 1)
    }
}

impl FromStr for PairSetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pair set `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Vision(VisionItem),
    Text(TokenSequence),
}

impl Item {
    pub fn domain(&self) -> String {
        match self {
            Item::Vision(_) => "vision".into(),
            Item::Text(t) => t.lang.to_string(),
        }
    }
}

/// One training pair. `D1` pairs are (vision, L0); the others are (L0, Lk).
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub scene_id: usize,
    pub a: Item,
    pub b: TokenSequence,
}

impl Pair {
    /// The pivot-language side of the pair.
    pub fn pivot(&self) -> &TokenSequence {
        match &self.a {
            Item::Text(t) if t.lang.is_pivot() => t,
            _ => &self.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub name: PairSetName,
    pub pairs: Vec<Pair>,
}

/// A held-out scene rendered into every domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub scene_id: usize,
    pub vision: VisionItem,
    pub texts: [TokenSequence; 4],
}

impl TestItem {
    pub fn text(&self, lang: Lang) -> &TokenSequence {
        &self.texts[lang.index()]
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub scenes: Vec<Scene>,
    pub pairsets: Vec<PairSet>,
    pub test: Vec<TestItem>,
}

pub(crate) fn vision_seed(corpus_seed: u64, scene_id: usize) -> u64 {
    mix_seed(corpus_seed ^ 0x5649_5349_4f4e, scene_id as u64)
}

/// Partitions scenes into four equal, disjoint training subsets (one per
/// pair set) and a held-out test subset rendered in every domain.
pub fn build_pairsets(
    scenes: &[Scene],
    grammar: &Grammar,
    renderer: &VisionRenderer,
    cfg: &CorpusConfig,
) -> Result<(Vec<PairSet>, Vec<TestItem>)> {
    if cfg.test == 0 || scenes.len() < 8 * cfg.test {
        return Err(Error::invalid(format!(
            "build_pairsets: {} scenes cannot hold a test split of {} (need at least 8x)",
            scenes.len(),
            cfg.test
        )));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7061_6972)));
    let (test_ids, train_ids) = order.split_at(cfg.test);
    let per_set = train_ids.len() / 4;

    let vision = |id: usize| renderer.render(&scenes[id], cfg.frames, cfg.jitter, vision_seed(cfg.seed, id));

    let mut pairsets = Vec::with_capacity(4);
    for (name, chunk) in PairSetName::ALL.into_iter().zip(train_ids.chunks_exact(per_set)) {
        let mut pairs = Vec::with_capacity(per_set);
        for &id in chunk {
            let pivot = grammar.render_text(&scenes[id], Lang::L0);
            let pair = match name.partner() {
                None => Pair {
                    scene_id: id,
                    a: Item::Vision(vision(id)?),
                    b: pivot,
                },
                Some(lang) => Pair {
                    scene_id: id,
                    a: Item::Text(pivot),
                    b: grammar.render_text(&scenes[id], lang),
                },
            };
            pairs.push(pair);
        }
        pairsets.push(PairSet { name, pairs });
    }

    let mut test = Vec::with_capacity(cfg.test);
    for &id in test_ids {
        test.push(TestItem {
            scene_id: id,
            vision: vision(id)?,
            texts: Lang::ALL.map(|l| grammar.render_text(&scenes[id], l)),
        });
    }
    Ok((pairsets, test))
}

impl Corpus {
    pub fn generate(config: CorpusConfig) -> Result<Self> {
        let grammar = Grammar::new(config.seed)?;
        let renderer = VisionRenderer::new(config.seed, config.v_dim)?;
        let scenes = gen_scenes(config.seed, config.scenes)?;
        let (pairsets, test) = build_pairsets(&scenes, &grammar, &renderer, &config)?;
        Ok(Corpus {
            vocab: grammar.vocab().clone(),
            config,
            scenes,
            pairsets,
            test,
        })
    }

    /// Rebuilds the generator that produced this corpus.
    pub fn grammar(&self) -> Result<Grammar> {
        Grammar::new(self.config.seed)
    }

    pub fn renderer(&self) -> Result<VisionRenderer> {
        VisionRenderer::new(self.config.seed, self.config.v_dim)
    }

    pub fn pairset(&self, name: PairSetName) -> &PairSet {
        &self.pairsets[name.index()]
    }

    /// Every training sentence of `lang`: all pivot sides for `L0`, the
    /// partner side of the matching pair set otherwise.
    pub fn sentences(&self, lang: Lang) -> Vec<&TokenSequence> {
        if lang.is_pivot() {
            self.pairsets.iter().flat_map(|p| p.pairs.iter().map(Pair::pivot)).collect()
        } else {
            let name = PairSetName::for_lang(lang).expect("non-pivot language has a pair set");
            self.pairset(name).pairs.iter().map(|p| &p.b).collect()
        }
    }

    /// Labelled (vision, text) pairs over the training scenes, for
    /// supervised fine-tuning. Disjoint from the test scenes.
    pub fn downstream_pairs(&self, lang: Lang) -> Result<Vec<(VisionItem, TokenSequence)>> {
        let grammar = self.grammar()?;
        let renderer = self.renderer()?;
        let mut ids: Vec<usize> = self
            .pairsets
            .iter()
            .flat_map(|p| p.pairs.iter().map(|x| x.scene_id))
            .collect();
        ids.sort_unstable();
        ids.into_iter()
            .map(|id| {
                let s = &self.scenes[id];
                let v = renderer.render(
                    s,
                    self.config.frames,
                    self.config.jitter,
                    vision_seed(self.config.seed ^ 0xd0_57, id),
                )?;
                Ok((v, grammar.render_text(s, lang)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn small() -> Corpus {
        Corpus::generate(CorpusConfig {
            scenes: 400,
            test: 40,
            frames: 2,
            v_dim: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn default_partition_arithmetic() {
        let c = Corpus::generate(CorpusConfig {
            frames: 1,
            v_dim: 4,
            ..Default::default()
        })
        .unwrap();
        for p in &c.pairsets {
            assert_eq!(p.pairs.len(), 450);
        }
        assert_eq!(c.test.len(), 200);
    }

    #[test]
    fn pivot_subsets_disjoint_and_test_held_out() {
        let c = small();
        let mut seen = HashSet::new();
        for p in &c.pairsets {
            for pair in &p.pairs {
                assert!(seen.insert(pair.scene_id), "scene reused across pair sets");
            }
        }
        for t in &c.test {
            assert!(!seen.contains(&t.scene_id));
        }
    }

    #[test]
    fn pair_domains_follow_the_pivot_regime() {
        let c = small();
        for p in &c.pairsets {
            for pair in &p.pairs {
                let (a, b) = (pair.a.domain(), pair.b.lang.to_string());
                match p.name {
                    PairSetName::D1 => assert_eq!((a.as_str(), b.as_str()), ("vision", "L0")),
                    n => {
                        assert_eq!(a, "L0");
                        assert_eq!(Some(pair.b.lang), n.partner());
                    }
                }
            }
        }
    }

    #[test]
    fn test_scenes_render_in_all_domains() {
        let c = small();
        let g = c.grammar().unwrap();
        for t in &c.test {
            assert_eq!(t.vision.frames.len(), 2);
            for l in Lang::ALL {
                assert_eq!(t.text(l), &g.render_text(&c.scenes[t.scene_id], l));
            }
        }
    }

    #[test]
    fn insufficient_scenes_rejected() {
        let cfg = CorpusConfig {
            scenes: 100,
            test: 20,
            ..Default::default()
        };
        assert!(Corpus::generate(cfg).is_err());
    }

    #[test]
    fn sentences_per_language() {
        let c = small();
        assert_eq!(c.sentences(Lang::L0).len(), 4 * 90);
        assert_eq!(c.sentences(Lang::L2).len(), 90);
        assert!(c.sentences(Lang::L2).iter().all(|s| s.lang == Lang::L2));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (small(), small());
        assert_eq!(a.pairsets, b.pairsets);
        assert_eq!(a.test, b.test);
    }
}
