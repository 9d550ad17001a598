//! End-to-end runs: staged training, zero-shot task evaluation and the
//! ablation variants.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::corpus::{Corpus, Lang};
use crate::error::{Error, Result};
use crate::evaluation::{retrieval_diagnostics, AlignmentReport, MetricReport};
use crate::inference::{caption_batch, text_coords, translate_batch, vision_coords, DecodeConfig};
use crate::model::{pivot_batch, Model, ModelConfig};
use crate::training::{
    train_crosslingual_alignment, train_dlr, train_vision_alignment, Checkpoint, Corruption, EpochLog, Stage,
    TrainConfig,
};

/// Every knob of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: Option<ModelConfig>,
    pub align_vision: TrainConfig,
    pub align_lingual: TrainConfig,
    pub dlr: TrainConfig,
    pub caption_corruption: Corruption,
    pub translation_corruption: Corruption,
    pub decode: DecodeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: None,
            align_vision: TrainConfig::for_stage(Stage::AlignVision),
            align_lingual: TrainConfig::for_stage(Stage::AlignLingual),
            dlr: TrainConfig::for_stage(Stage::Dlr),
            caption_corruption: Corruption::CAPTIONING,
            translation_corruption: Corruption::TRANSLATION,
            decode: DecodeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn fresh_checkpoint(&self, corpus: &Corpus) -> Result<Checkpoint> {
        let mc = self.model.clone().unwrap_or_else(|| ModelConfig::for_corpus(corpus));
        Checkpoint::fresh(mc, self.align_vision.seed)
    }

    /// Vision alignment followed by cross-lingual alignment.
    pub fn align(&self, corpus: &Corpus, log: &mut dyn FnMut(&EpochLog)) -> Result<Checkpoint> {
        let ck = train_vision_alignment(corpus, &self.align_vision, Some(self.fresh_checkpoint(corpus)?), log)?;
        train_crosslingual_alignment(corpus, &self.align_lingual, Some(ck), log)
    }

    /// Reconstruction training under a given corruption regime.
    pub fn reconstruct(
        &self,
        corpus: &Corpus,
        init: &Checkpoint,
        corruption: Corruption,
        langs: &[Lang],
        log: &mut dyn FnMut(&EpochLog),
    ) -> Result<Checkpoint> {
        let cfg = TrainConfig {
            corruption,
            langs: langs.to_vec(),
            ..self.dlr.clone()
        };
        train_dlr(corpus, &cfg, Some(init.clone()), log)
    }
}

/// A zero-shot generation task on the held-out scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Caption { tgt: Lang },
    Translate { src: Lang, tgt: Lang },
}

impl Task {
    /// Captioning into every non-pivot language, then translation around
    /// the non-pivot languages in both directions.
    pub fn standard() -> Vec<Task> {
        let np = [Lang::L1, Lang::L2, Lang::L3];
        let mut out: Vec<Task> = np.iter().map(|&tgt| Task::Caption { tgt }).collect();
        for &src in &np {
            for &tgt in &np {
                if src != tgt {
                    out.push(Task::Translate { src, tgt });
                }
            }
        }
        out
    }

    pub fn langs(&self) -> Vec<Lang> {
        match *self {
            Task::Caption { tgt } => vec![tgt],
            Task::Translate { src, tgt } => vec![src, tgt],
        }
    }

    pub fn is_caption(&self) -> bool {
        matches!(self, Task::Caption { .. })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Caption { tgt } => write!(f, "vision->{tgt}"),
            Task::Translate { src, tgt } => write!(f, "{src}->{tgt}"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("->")
            .ok_or_else(|| Error::invalid(format!("task `{s}` is not of the form SRC->TGT")))?;
        let tgt: Lang = b.parse()?;
        if a == "vision" {
            Ok(Task::Caption { tgt })
        } else {
            Ok(Task::Translate { src: a.parse()?, tgt })
        }
    }
}

/// Decodes every held-out scene for `task` and scores it against the
/// scene's rendering in the target language.
pub fn evaluate_task(corpus: &Corpus, model: &Model, task: Task, decode: &DecodeConfig) -> Result<MetricReport> {
    let (gens, tgt) = match task {
        Task::Caption { tgt } => {
            let v: Vec<_> = corpus.test.iter().map(|t| &t.vision).collect();
            (caption_batch(&v, tgt, model, decode)?, tgt)
        }
        Task::Translate { src, tgt } => {
            let t: Vec<_> = corpus.test.iter().map(|t| t.text(src)).collect();
            (translate_batch(&t, tgt, model, decode)?, tgt)
        }
    };
    let cands: Vec<_> = gens.iter().map(|g| &g.sequence).collect();
    let refs: Vec<_> = corpus.test.iter().map(|t| t.text(tgt)).collect();
    MetricReport::compute(&cands, &refs)
}

/// A held-out input domain: the vision features, pivot text through the
/// pivot encoder, or non-pivot text through the multilingual encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Vision,
    Text(Lang),
}

impl Domain {
    pub fn all() -> [Domain; 5] {
        [
            Domain::Vision,
            Domain::Text(Lang::L0),
            Domain::Text(Lang::L1),
            Domain::Text(Lang::L2),
            Domain::Text(Lang::L3),
        ]
    }

    /// Every domain against the pivot, plus vision against each non-pivot
    /// language.
    pub fn default_pairs() -> Vec<(Domain, Domain)> {
        let pivot = Domain::Text(Lang::L0);
        let mut out = vec![(Domain::Vision, pivot)];
        for l in [Lang::L1, Lang::L2, Lang::L3] {
            out.push((Domain::Text(l), pivot));
        }
        for l in [Lang::L1, Lang::L2, Lang::L3] {
            out.push((Domain::Vision, Domain::Text(l)));
        }
        out
    }

    /// Parses `a-b,c-d` (for example `vision-L0,L1-L0`).
    pub fn parse_pairs(s: &str) -> Result<Vec<(Domain, Domain)>> {
        s.split(',')
            .map(|p| {
                let (a, b) = p.trim().split_once('-').ok_or_else(|| {
                    Error::invalid(format!("domain pair `{p}` is not of the form A-B"))
                })?;
                Ok((a.parse()?, b.parse()?))
            })
            .collect()
    }

    fn coordinates(self, corpus: &Corpus, model: &Model) -> Result<Vec<Vec<f32>>> {
        match self {
            Domain::Vision => {
                let v: Vec<_> = corpus.test.iter().map(|t| &t.vision).collect();
                vision_coords(model, &v)
            }
            Domain::Text(Lang::L0) => {
                let t: Vec<&[u32]> = corpus.test.iter().map(|t| t.text(Lang::L0).ids.as_slice()).collect();
                crate::training::encode_chunks(model, &t, |mc, b, x| pivot_batch(mc, b, x))
            }
            Domain::Text(lang) => {
                let t: Vec<_> = corpus.test.iter().map(|x| x.text(lang)).collect();
                text_coords(model, &t)
            }
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Vision => f.write_str("vision"),
            Domain::Text(l) => write!(f, "{l}"),
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "vision" {
            Ok(Domain::Vision)
        } else {
            s.parse().map(Domain::Text).map_err(|_| {
                Error::invalid(format!("unknown domain `{s}` (valid: vision, L0, L1, L2, L3)"))
            })
        }
    }
}

/// Held-out retrieval diagnostics for each requested domain pair.
pub fn alignment_report(corpus: &Corpus, model: &Model, pairs: &[(Domain, Domain)]) -> Result<AlignmentReport> {
    let mut cache: HashMap<Domain, Vec<Vec<f32>>> = HashMap::new();
    let mut report = AlignmentReport::default();
    for &(a, b) in pairs {
        for d in [a, b] {
            if !cache.contains_key(&d) {
                cache.insert(d, d.coordinates(corpus, model)?);
            }
        }
        report
            .pairs
            .push(retrieval_diagnostics(&a.to_string(), &b.to_string(), &cache[&a], &cache[&b])?);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Reconstruction without token masking or coordinate noise.
    NoCorruption,
    /// No alignment stages: reconstruction on untrained encoders.
    NoCda,
    /// Neither alignment nor corruption.
    None,
    /// Cross-lingual alignment and reconstruction restricted to these
    /// languages.
    Langs(Vec<Lang>),
}

impl Variant {
    pub fn uses_alignment(&self) -> bool {
        !matches!(self, Variant::NoCda | Variant::None)
    }

    pub fn langs(&self) -> Vec<Lang> {
        match self {
            Variant::Langs(l) => l.clone(),
            _ => Lang::ALL.to_vec(),
        }
    }

    pub fn supports(&self, task: Task) -> bool {
        let langs = self.langs();
        task.langs().iter().all(|l| langs.contains(l))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NoCorruption => f.write_str("no-corruption"),
            Variant::NoCda => f.write_str("no-cda"),
            Variant::None => f.write_str("none"),
            Variant::Langs(l) => {
                let names: Vec<String> = l.iter().map(|x| x.to_string()).collect();
                write!(f, "langs={}", names.join(","))
            }
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-corruption" => Ok(Variant::NoCorruption),
            "no-cda" => Ok(Variant::NoCda),
            "none" => Ok(Variant::None),
            _ => {
                let list = s.strip_prefix("langs=").ok_or_else(|| {
                    Error::invalid(format!(
                        "unknown variant `{s}` (expected full, no-corruption, no-cda, none or langs=L0,L1,...)"
                    ))
                })?;
                let mut langs: Vec<Lang> = list.split(',').map(str::parse).collect::<Result<_>>()?;
                langs.sort_by_key(|l| l.index());
                langs.dedup();
                if !langs.contains(&Lang::L0) {
                    return Err(Error::invalid("a language subset must include the pivot L0"));
                }
                Ok(Variant::Langs(langs))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub task: Task,
    pub bleu4: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    /// Tasks the variant cannot perform.
    pub absent: Vec<Task>,
}

impl AblationResult {
    pub fn get(&self, task: Task) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.task == task)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\ttask\tbleu4\trougeL\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{:.4}\t{:.4}\n", r.variant, r.task, r.bleu4, r.rouge_l));
        }
        s
    }
}

/// Trains and evaluates one ablation variant on `tasks`. `aligned` may
/// supply an already aligned checkpoint (stages A and B with all
/// languages) to skip retraining; it is ignored by variants that do not
/// use it.
pub fn run_variant(
    corpus: &Corpus,
    cfg: &PipelineConfig,
    variant: &Variant,
    tasks: &[Task],
    aligned: Option<&Checkpoint>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<AblationResult> {
    let langs = variant.langs();
    let (run, absent): (Vec<Task>, Vec<Task>) = tasks.iter().partition(|t| variant.supports(**t));
    let mut result = AblationResult {
        rows: Vec::new(),
        absent,
    };
    if run.is_empty() {
        return Ok(result);
    }
    let base = match (variant, aligned) {
        (Variant::NoCda | Variant::None, _) => cfg.fresh_checkpoint(corpus)?,
        (Variant::Langs(_), _) => {
            let ck = train_vision_alignment(corpus, &cfg.align_vision, Some(cfg.fresh_checkpoint(corpus)?), log)?;
            let lingual = TrainConfig {
                langs: langs.clone(),
                ..cfg.align_lingual.clone()
            };
            train_crosslingual_alignment(corpus, &lingual, Some(ck), log)?
        }
        (_, Some(a)) => a.clone(),
        (_, None) => cfg.align(corpus, log)?,
    };
    let corrupt = !matches!(variant, Variant::NoCorruption | Variant::None);
    let (cap, trans) = if corrupt {
        (cfg.caption_corruption, cfg.translation_corruption)
    } else {
        (Corruption::NONE, Corruption::NONE)
    };
    let needs_cap = run.iter().any(|t| t.is_caption());
    let needs_trans = run.iter().any(|t| !t.is_caption());
    let cap_model = if needs_cap {
        Some(cfg.reconstruct(corpus, &base, cap, &langs, log)?)
    } else {
        None
    };
    let trans_model = match (needs_trans, &cap_model) {
        (false, _) => None,
        (true, Some(c)) if cap == trans => Some(c.clone()),
        (true, _) => Some(cfg.reconstruct(corpus, &base, trans, &langs, log)?),
    };
    for task in run {
        let ck = if task.is_caption() { &cap_model } else { &trans_model };
        let model = &ck.as_ref().expect("decoder trained for every requested task kind").model;
        let m = evaluate_task(corpus, model, task, &cfg.decode)?;
        result.rows.push(AblationRow {
            variant: variant.to_string(),
            task,
            bleu4: m.bleu4,
            rouge_l: m.rouge_l,
        });
    }
    Ok(result)
}
