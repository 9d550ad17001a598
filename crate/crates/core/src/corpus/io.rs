//! On-disk corpus layout: `corpus.cfg`, `vocab.txt`, `scenes.jsonl`,
//! `D1.jsonl`..`D4.jsonl`, `test_vision.jsonl` and `test_L0.jsonl`..`test_L3.jsonl`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::language::{Lang, TokenSequence, Vocab};
use super::pairs::{Corpus, CorpusConfig, Item, Pair, PairSet, PairSetName, TestItem};
use super::scene::Scene;
use super::vision::VisionItem;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    scene_id: usize,
    a_domain: String,
    b_domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_frames: Option<Vec<Vec<f32>>>,
    b_tokens: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: usize,
    #[serde(flatten)]
    scene: Scene,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct VisionRecord {
    pub scene_id: usize,
    pub frames: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TextRecord {
    pub scene_id: usize,
    pub tokens: Vec<u32>,
}

const MARKER: &str = "corpus.cfg";

fn write_lines<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let rec = serde_json::from_str(trimmed).map_err(|e| Error::Format {
                position: offset,
                message: format!("{} line {}: {e}", path.display(), n + 1),
            })?;
            out.push(rec);
        }
        offset += line.len();
    }
    Ok(out)
}

fn domain_lang(domain: &str) -> Result<Lang> {
    domain.parse()
}

fn sequence(vocab: &Vocab, lang: Lang, ids: Vec<u32>) -> Result<TokenSequence> {
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab.len()) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", vocab.len())));
    }
    TokenSequence::new(lang, ids)
}

fn config_text(c: &CorpusConfig) -> String {
    format!(
        "seed={}\nscenes={}\ntest={}\nframes={}\nv_dim={}\njitter={}\n",
        c.seed, c.scenes, c.test, c.frames, c.v_dim, c.jitter
    )
}

fn parse_config(text: &str) -> Result<CorpusConfig> {
    let mut c = CorpusConfig::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("corpus.cfg: expected key=value, got `{line}`")))?;
        let bad = |_| Error::Config(format!("corpus.cfg: bad value for {k}: `{v}`"));
        match k.trim() {
            "seed" => c.seed = v.trim().parse().map_err(bad)?,
            "scenes" => c.scenes = v.trim().parse().map_err(bad)?,
            "test" => c.test = v.trim().parse().map_err(bad)?,
            "frames" => c.frames = v.trim().parse().map_err(bad)?,
            "v_dim" => c.v_dim = v.trim().parse().map_err(bad)?,
            "jitter" => c.jitter = v.trim().parse().map_err(|_| Error::Config(format!("corpus.cfg: bad jitter `{v}`")))?,
            other => return Err(Error::Config(format!("corpus.cfg: unknown key `{other}`"))),
        }
    }
    Ok(c)
}

/// Writes the corpus layout into `dir`, refusing to replace an existing
/// corpus unless `force` is set.
pub fn write_corpus(dir: &Path, corpus: &Corpus, force: bool) -> Result<()> {
    if dir.join(MARKER).exists() && !force {
        return Err(Error::invalid(format!(
            "{} already holds a corpus (pass --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let vocab_path = dir.join("vocab.txt");
    let mut vocab_text = corpus.vocab.tokens().join("\n");
    vocab_text.push('\n');
    fs::write(&vocab_path, vocab_text).map_err(|e| Error::io(&vocab_path, e))?;

    write_lines(
        &dir.join("scenes.jsonl"),
        corpus.scenes.iter().enumerate().map(|(scene_id, &scene)| SceneRecord { scene_id, scene }),
    )?;

    for set in &corpus.pairsets {
        let records = set.pairs.iter().map(|p| {
            let (a_tokens, a_frames) = match &p.a {
                Item::Text(t) => (Some(t.ids.clone()), None),
                Item::Vision(v) => (None, Some(v.frames.clone())),
            };
            PairRecord {
                scene_id: p.scene_id,
                a_domain: p.a.domain(),
                b_domain: p.b.lang.to_string(),
                a_tokens,
                a_frames,
                b_tokens: p.b.ids.clone(),
            }
        });
        write_lines(&dir.join(format!("{}.jsonl", set.name)), records)?;
    }

    write_lines(
        &dir.join("test_vision.jsonl"),
        corpus.test.iter().map(|t| VisionRecord {
            scene_id: t.scene_id,
            frames: t.vision.frames.clone(),
        }),
    )?;
    for lang in Lang::ALL {
        write_lines(
            &dir.join(format!("test_{lang}.jsonl")),
            corpus.test.iter().map(|t| TextRecord {
                scene_id: t.scene_id,
                tokens: t.text(lang).ids.clone(),
            }),
        )?;
    }

    // marker last: a partially written directory is never mistaken for a corpus
    let cfg_path = dir.join(MARKER);
    fs::write(&cfg_path, config_text(&corpus.config)).map_err(|e| Error::io(&cfg_path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let cfg_path = dir.join(MARKER);
    let config = parse_config(&fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?)?;

    let vocab_path = dir.join("vocab.txt");
    let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let vocab = Vocab::from_tokens(vocab_text.lines().map(String::from).collect())?;

    let mut scene_records: Vec<SceneRecord> = read_lines(&dir.join("scenes.jsonl"))?;
    scene_records.sort_by_key(|r| r.scene_id);
    if scene_records.iter().enumerate().any(|(i, r)| r.scene_id != i) {
        return Err(Error::invalid("scenes.jsonl ids are not contiguous from 0"));
    }
    let scenes: Vec<Scene> = scene_records.into_iter().map(|r| r.scene).collect();

    let mut pairsets = Vec::with_capacity(4);
    for name in PairSetName::ALL {
        let records: Vec<PairRecord> = read_lines(&dir.join(format!("{name}.jsonl")))?;
        let mut pairs = Vec::with_capacity(records.len());
        for r in records {
            let a = match (r.a_tokens, r.a_frames) {
                (Some(ids), None) => Item::Text(sequence(&vocab, domain_lang(&r.a_domain)?, ids)?),
                (None, Some(frames)) if r.a_domain == "vision" => Item::Vision(VisionItem::new(frames)?),
                _ => {
                    return Err(Error::invalid(format!(
                        "{name}.jsonl scene {}: need exactly one of a_tokens / a_frames matching a_domain",
                        r.scene_id
                    )))
                }
            };
            let b = sequence(&vocab, domain_lang(&r.b_domain)?, r.b_tokens)?;
            pairs.push(Pair {
                scene_id: r.scene_id,
                a,
                b,
            });
        }
        pairsets.push(PairSet { name, pairs });
    }

    let vision: Vec<VisionRecord> = read_lines(&dir.join("test_vision.jsonl"))?;
    let mut texts: Vec<Vec<TextRecord>> = Vec::with_capacity(4);
    for lang in Lang::ALL {
        texts.push(read_lines(&dir.join(format!("test_{lang}.jsonl")))?);
    }
    let mut test = Vec::with_capacity(vision.len());
    for (i, v) in vision.into_iter().enumerate() {
        let mut seqs = Vec::with_capacity(4);
        for lang in Lang::ALL {
            let rec = texts[lang.index()]
                .get(i)
                .filter(|r| r.scene_id == v.scene_id)
                .ok_or_else(|| Error::invalid(format!("test_{lang}.jsonl out of step with test_vision.jsonl")))?;
            seqs.push(sequence(&vocab, lang, rec.tokens.clone())?);
        }
        test.push(TestItem {
            scene_id: v.scene_id,
            vision: VisionItem::new(v.frames)?,
            texts: seqs.try_into().expect("four languages"),
        });
    }

    Ok(Corpus {
        config,
        vocab,
        scenes,
        pairsets,
        test,
    })
}
