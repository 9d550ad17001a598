use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mix_seed;
use super::scene::{Inventory, Scene};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const MASK: u32 = 2;
const FIRST_BOS: u32 = 3;
const SPECIALS: usize = 7;

/// Surface tokens per pivot sentence (EOS excluded).
pub const SENTENCE_WORDS: usize = 6;

const AGENTS: [&str; 12] = [
    "dog", "cat", "bird", "horse", "child", "woman", "man", "robot", "farmer", "chef", "pilot",
    "monkey",
];
const ACTIONS: [&str; 8] = [
    "chases", "holds", "paints", "carries", "watches", "kicks", "throws", "finds",
];
const OBJECTS: [&str; 12] = [
    "ball", "box", "kite", "apple", "chair", "drum", "hat", "bottle", "book", "lamp", "wheel",
    "flag",
];
const MODIFIERS: [&str; 6] = ["red", "small", "old", "shiny", "heavy", "striped"];
const FUNCTION_WORDS: [&str; 2] = ["a", "the"];

const WORDS_PER_LANG: usize =
    AGENTS.len() + ACTIONS.len() + OBJECTS.len() + MODIFIERS.len() + FUNCTION_WORDS.len();

// Syllable inventories are pairwise disjoint in their letters, which makes
// the surface vocabularies of the cipher languages disjoint by construction.
const SYLLABLES: [(&str, &[&str]); 3] = [
    ("kmnpt", &["a", "i", "u"]),
    ("bdgvz", &["er", "or"]),
    ("lsfhw", &["oa", "ei", "ou"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lang {
    L0,
    L1,
    L2,
    L3,
}

impl Lang {
    pub const ALL: [Lang; 4] = [Lang::L0, Lang::L1, Lang::L2, Lang::L3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Lang> {
        Self::ALL.get(i).copied()
    }

    pub fn is_pivot(self) -> bool {
        self == Lang::L0
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.index())
    }
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L0" => Ok(Lang::L0),
            "L1" => Ok(Lang::L1),
            "L2" => Ok(Lang::L2),
            "L3" => Ok(Lang::L3),
            _ => Err(Error::invalid(format!(
                "unknown language tag `{s}` (valid tags: L0, L1, L2, L3)"
            ))),
        }
    }
}

/// Token ids of one sentence, always terminated by [`EOS`]. The
/// language-specific begin token is not stored; the decoder prepends it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub lang: Lang,
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(lang: Lang, ids: Vec<u32>) -> Result<Self> {
        let seq = TokenSequence { lang, ids };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        match self.ids.last() {
            Some(&EOS) => {}
            _ => return Err(Error::invalid("token sequence must end with EOS")),
        }
        if self.ids[..self.ids.len() - 1].iter().any(|&t| t == PAD || t == EOS) {
            return Err(Error::invalid("token sequence has interior PAD or EOS"));
        }
        Ok(())
    }

    /// |S|: number of predicted tokens, EOS included, BOS excluded.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids without the trailing EOS.
    pub fn surface(&self) -> &[u32] {
        match self.ids.last() {
            Some(&EOS) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

/// Shared multilingual vocabulary: seven special tokens followed by one
/// equal-sized block of surface words per language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    block: usize,
}

impl Vocab {
    fn special_tokens() -> Vec<String> {
        let mut v = vec!["<pad>".to_string(), "</s>".into(), "<mask>".into()];
        v.extend(Lang::ALL.iter().map(|l| format!("<{l}>")));
        v
    }

    /// Rebuilds a vocabulary from its token list (line index = id).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS || (tokens.len() - SPECIALS) % 4 != 0 {
            return Err(Error::invalid(format!(
                "vocabulary of {} tokens does not hold {SPECIALS} specials plus four equal language blocks",
                tokens.len()
            )));
        }
        if tokens[..SPECIALS] != Self::special_tokens()[..] {
            return Err(Error::invalid("vocabulary special tokens out of order"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let block = (tokens.len() - SPECIALS) / 4;
        Ok(Vocab {
            tokens,
            index,
            block,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn bos(lang: Lang) -> u32 {
        FIRST_BOS + lang.index() as u32
    }

    /// The language whose BOS token this is.
    pub fn bos_lang(id: u32) -> Option<Lang> {
        id.checked_sub(FIRST_BOS).and_then(|i| Lang::from_index(i as usize))
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS
    }

    /// Language owning a surface token; `None` for specials.
    pub fn lang_of(&self, id: u32) -> Option<Lang> {
        let id = id as usize;
        if id < SPECIALS || id >= self.tokens.len() {
            return None;
        }
        Lang::from_index((id - SPECIALS) / self.block)
    }

    /// Contiguous id range of a language's surface words.
    pub fn surface_range(&self, lang: Lang) -> std::ops::Range<u32> {
        let start = (SPECIALS + lang.index() * self.block) as u32;
        start..start + self.block as u32
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.surface()
            .iter()
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Whitespace-separated surface tokens to a sequence (EOS appended).
    pub fn tokenize(&self, line: &str, lang: Lang) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for w in line.split_whitespace() {
            let id = self
                .id(w)
                .ok_or_else(|| Error::invalid(format!("token `{w}` not in vocabulary")))?;
            if Self::is_special(id) && id != MASK {
                return Err(Error::invalid(format!("special token `{w}` in input text")));
            }
            ids.push(id);
        }
        ids.push(EOS);
        TokenSequence::new(lang, ids)
    }
}

/// Renders scenes into the four languages and inverts the ciphers.
#[derive(Debug, Clone)]
pub struct Grammar {
    vocab: Vocab,
    /// `cipher[l][w]`: id in language `l` of pivot word index `w`.
    cipher: [Vec<u32>; 4],
    /// `order[l][p]`: pivot position rendered at position `p` of language `l`.
    order: [[usize; SENTENCE_WORDS]; 4],
    inventory: Inventory,
}

fn pivot_words() -> Vec<&'static str> {
    AGENTS
        .iter()
        .chain(&ACTIONS)
        .chain(&OBJECTS)
        .chain(&MODIFIERS)
        .chain(&FUNCTION_WORDS)
        .copied()
        .collect()
}

fn pseudo_words(lang_block: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let (consonants, vowels) = SYLLABLES[lang_block];
    let syllables: Vec<String> = consonants
        .chars()
        .flat_map(|c| vowels.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let mut words: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().filter(move |b| *b != a).map(move |b| format!("{a}{b}")))
        .collect();
    words.shuffle(rng);
    words.truncate(WORDS_PER_LANG);
    words
}

impl Grammar {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6772_616d));
        let mut tokens = Vocab::special_tokens();
        tokens.extend(pivot_words().into_iter().map(String::from));
        for block in 0..3 {
            tokens.extend(pseudo_words(block, &mut rng));
        }
        let vocab = Vocab::from_tokens(tokens)?;

        let identity: Vec<u32> = (0..WORDS_PER_LANG as u32).collect();
        let mut cipher: [Vec<u32>; 4] = Default::default();
        let mut order = [[0usize; SENTENCE_WORDS]; 4];
        for lang in Lang::ALL {
            let base = vocab.surface_range(lang).start;
            let mut map = identity.clone();
            let mut perm: Vec<usize> = (0..SENTENCE_WORDS).collect();
            if !lang.is_pivot() {
                map.shuffle(&mut rng);
                // a non-trivial reordering that differs from every earlier language
                loop {
                    perm.shuffle(&mut rng);
                    let fresh = (0..lang.index()).all(|l| order[l][..] != perm[..]);
                    if fresh {
                        break;
                    }
                }
            }
            cipher[lang.index()] = map.iter().map(|&w| base + w).collect();
            order[lang.index()].copy_from_slice(&perm);
        }
        Ok(Grammar {
            vocab,
            cipher,
            order,
            inventory: Inventory::DEFAULT,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn word_order(&self, lang: Lang) -> &[usize; SENTENCE_WORDS] {
        &self.order[lang.index()]
    }

    /// Pivot word indices of a scene in template order:
    /// `a <agent> <action> the <modifier> <object>`.
    fn pivot_template(&self, s: &Scene) -> [usize; SENTENCE_WORDS] {
        let inv = &self.inventory;
        let func = inv.attributes();
        [
            func,
            s.agent as usize,
            inv.agents + s.action as usize,
            func + 1,
            inv.agents + inv.actions + inv.objects + s.modifier as usize,
            inv.agents + inv.actions + s.object as usize,
        ]
    }

    pub fn render_text(&self, s: &Scene, lang: Lang) -> TokenSequence {
        let words = self.pivot_template(s);
        let l = lang.index();
        let mut ids: Vec<u32> = self.order[l]
            .iter()
            .map(|&p| self.cipher[l][words[p]])
            .collect();
        ids.push(EOS);
        TokenSequence { lang, ids }
    }

    /// Undoes the substitution and reordering of a rendered sentence.
    pub fn to_pivot(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        let l = seq.lang.index();
        let surface = seq.surface();
        if surface.len() != SENTENCE_WORDS {
            return Err(Error::invalid(format!(
                "expected {SENTENCE_WORDS} surface tokens, got {}",
                surface.len()
            )));
        }
        let mut pivot = [0u32; SENTENCE_WORDS];
        for (p, &id) in surface.iter().enumerate() {
            let w = self.cipher[l]
                .iter()
                .position(|&c| c == id)
                .ok_or_else(|| Error::invalid(format!("token {id} is not a {} word", seq.lang)))?;
            pivot[self.order[l][p]] = self.cipher[0][w];
        }
        let mut ids = pivot.to_vec();
        ids.push(EOS);
        Ok(TokenSequence {
            lang: Lang::L0,
            ids,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;
    use crate::corpus::gen_scenes;

    fn grammar() -> Grammar {
        Grammar::new(1).unwrap()
    }

    #[test]
    fn lang_tags_parse_and_reject() {
        assert_eq!("L2".parse::<Lang>().unwrap(), Lang::L2);
        let err = "fr".parse::<Lang>().unwrap_err().to_string();
        assert!(err.contains("L0, L1, L2, L3"), "{err}");
    }

    #[test]
    fn vocab_blocks_are_disjoint_and_bijective() {
        let g = grammar();
        let v = g.vocab();
        assert_eq!(v.len(), SPECIALS + 4 * WORDS_PER_LANG);
        let mut seen = HashSet::new();
        for lang in Lang::ALL {
            for id in v.surface_range(lang) {
                assert_eq!(v.lang_of(id), Some(lang));
                assert!(seen.insert(v.token(id).to_string()));
                assert_eq!(v.id(v.token(id)), Some(id));
            }
        }
        for id in 0..SPECIALS as u32 {
            assert_eq!(v.lang_of(id), None);
        }
        assert_eq!(Vocab::bos_lang(Vocab::bos(Lang::L3)), Some(Lang::L3));
        assert_eq!(Vocab::bos_lang(EOS), None);
    }

    #[test]
    fn l1_is_cipher_of_permuted_pivot() {
        let g = grammar();
        let s = Scene {
            agent: 3,
            action: 1,
            object: 7,
            modifier: 2,
        };
        let p = g.render_text(&s, Lang::L0);
        assert_eq!(g.vocab().detokenize(&p), "a horse holds the old bottle");
        let l1 = g.render_text(&s, Lang::L1);
        for (pos, &id) in l1.surface().iter().enumerate() {
            let src = p.ids[g.word_order(Lang::L1)[pos]];
            let w = (src - g.vocab().surface_range(Lang::L0).start) as usize;
            assert_eq!(id, g.cipher[1][w]);
        }
        assert_ne!(g.word_order(Lang::L1), g.word_order(Lang::L0));
    }

    #[test]
    fn rendering_is_injective_and_clean() {
        let g = grammar();
        let scenes = gen_scenes(1, 2000).unwrap();
        for lang in Lang::ALL {
            let set: HashSet<_> = scenes.iter().map(|s| g.render_text(s, lang)).collect();
            assert_eq!(set.len(), scenes.len());
            for seq in &set {
                seq.validate().unwrap();
                assert!(!seq.ids.contains(&MASK) && !seq.ids.contains(&PAD));
                assert!(seq.surface().iter().all(|&t| g.vocab().lang_of(t) == Some(lang)));
            }
        }
    }

    #[test]
    fn tokenize_round_trips_detokenize() {
        let g = grammar();
        let s = gen_scenes(4, 10).unwrap()[3];
        let seq = g.render_text(&s, Lang::L2);
        let line = g.vocab().detokenize(&seq);
        assert_eq!(g.vocab().tokenize(&line, Lang::L2).unwrap(), seq);
        assert!(g.vocab().tokenize("zzz", Lang::L2).is_err());
    }

    #[test]
    fn sequence_validation() {
        assert!(TokenSequence::new(Lang::L0, vec![]).is_err());
        assert!(TokenSequence::new(Lang::L0, vec![10, 11]).is_err());
        assert!(TokenSequence::new(Lang::L0, vec![10, PAD, 11, EOS]).is_err());
        assert!(TokenSequence::new(Lang::L0, vec![10, 11, EOS]).is_ok());
    }

    proptest! {
        #[test]
        fn cipher_round_trip(idx in 0usize..2000, lang in 0usize..4, seed in 0u64..5) {
            let g = Grammar::new(seed).unwrap();
            let s = gen_scenes(seed, 2000).unwrap()[idx];
            let lang = Lang::from_index(lang).unwrap();
            let back = g.to_pivot(&g.render_text(&s, lang)).unwrap();
            prop_assert_eq!(back, g.render_text(&s, Lang::L0));
        }
    }
}
