//! Command-line front end: corpus generation, staged training, generation,
//! scoring, alignment diagnostics and ablations.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{ModelShape, RunConfig};

use crate::corpus::{
    read_corpus, read_lines, write_corpus, Corpus, Lang, TextRecord, TokenSequence, VisionItem, VisionRecord, Vocab,
};
use crate::error::{Error, Result};
use crate::evaluation::{bleu4, corpus_rouge_l};
use crate::inference::{caption_batch, greedy_batch, text_coords, translate_batch, vision_coords, Generation, ModelScorer};
use crate::pipeline::{alignment_report, run_variant, Domain, Task, Variant};
use crate::training::{
    finetune_supervised, load_checkpoint, save_checkpoint, train_crosslingual_alignment, train_dlr,
    train_vision_alignment, Checkpoint, EpochLog, Stage,
};

#[derive(Debug, Parser)]
#[command(name = "latent-bridge", version, about = "Zero-shot generation through a shared latent space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and write it to a directory.
    GenCorpus(GenCorpusArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Caption vision items or translate sentences with a checkpoint.
    Generate(GenerateArgs),
    /// Score hypotheses against references.
    Evaluate(EvaluateArgs),
    /// Held-out cross-domain retrieval diagnostics.
    Diagnose(DiagnoseArgs),
    /// Train and score ablation variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (key=value lines with [section] headers).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory; when absent the corpus is regenerated from the
    /// configuration.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: Stage,
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint produced by the preceding stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the training seed of every stage.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Share of labelled pairs used by fine-tuning.
    #[arg(long)]
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TaskKind {
    Caption,
    Translate,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub task: TaskKind,
    /// Output language for captioning.
    #[arg(long)]
    pub lang: Option<String>,
    #[arg(long)]
    pub src: Option<String>,
    #[arg(long)]
    pub tgt: Option<String>,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vision records (`.jsonl` with `scene_id` and `frames`) for captioning;
    /// one sentence per line, or token records in `.jsonl`, for translation.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Greedy decoding instead of beam search.
    #[arg(long, conflicts_with = "beam")]
    pub greedy: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Comma-separated subset of bleu4 and rougeL.
    #[arg(long, default_value = "bleu4,rougeL")]
    pub metrics: String,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Domain pairs such as `vision-L0,L1-L0`; every domain against the
    /// pivot plus vision against each language by default.
    #[arg(long)]
    pub pairs: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// full, no-corruption, no-cda, none or langs=L0,L1,...; repeatable.
    #[arg(long, required = true)]
    pub variant: Vec<String>,
    /// Tab-separated table; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tasks such as `vision->L1,L1->L2`; all zero-shot tasks by default.
    #[arg(long)]
    pub tasks: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_corpus(cfg: &RunConfig, dir: Option<&Path>) -> Result<Corpus> {
    match dir.or(cfg.corpus_dir.as_deref()) {
        Some(d) => read_corpus(d),
        None => Corpus::generate(cfg.corpus.clone()),
    }
}

fn write_out(path: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn lang(flag: &str, v: &Option<String>) -> Result<Lang> {
    v.as_deref()
        .ok_or_else(|| Error::invalid(format!("--{flag} is required")))?
        .parse()
}

/// Runs one parsed command. Progress lines go to `stdout` for `train` and
/// to `stderr` for `ablate`, whose table may share standard output.
pub fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a, stdout),
        Command::Train(a) => train(a, stdout),
        Command::Generate(a) => generate(a, stdout),
        Command::Evaluate(a) => evaluate(a, stdout),
        Command::Diagnose(a) => diagnose(a, stdout),
        Command::Ablate(a) => ablate(a, stdout, stderr),
    }
}

fn gen_corpus(a: GenCorpusArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = run_config(a.config.as_deref())?.corpus;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.scenes {
        cfg.scenes = n;
    }
    if let Some(n) = a.test {
        cfg.test = n;
    }
    let corpus = Corpus::generate(cfg)?;
    write_corpus(&a.out, &corpus, a.force)?;
    writeln!(
        stdout,
        "wrote {} scenes ({} test) to {}",
        corpus.config.scenes,
        corpus.test.len(),
        a.out.display()
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn train(a: TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = run_config(a.common.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.set_train_seed(s);
    }
    let stage_cfg = cfg.stage_mut(a.stage);
    if let Some(e) = a.epochs {
        stage_cfg.epochs = e;
    }
    if let Some(r) = a.ratio {
        if a.stage != Stage::Finetune {
            return Err(Error::invalid("--ratio only applies to --stage finetune"));
        }
        stage_cfg.finetune_ratio = r;
    }
    let stage_cfg = stage_cfg.clone();
    if a.init.is_none() {
        if let Some(needed) = a.stage.requires() {
            return Err(Error::invalid(format!(
                "stage {} needs --init with a checkpoint from {needed}",
                a.stage
            )));
        }
    }
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    let corpus = load_corpus(&cfg, a.common.corpus.as_deref())?;
    let mut io_err = None;
    let mut log = |e: &EpochLog| {
        if let Err(err) = writeln!(stdout, "{e}") {
            io_err.get_or_insert(err);
        }
    };
    let init = match (a.stage, init) {
        (Stage::AlignVision, None) => Some(Checkpoint::fresh(
            cfg.model.for_vocab(corpus.vocab.len(), corpus.config.v_dim),
            stage_cfg.seed,
        )?),
        (_, i) => i,
    };
    let ck = match a.stage {
        Stage::AlignVision => train_vision_alignment(&corpus, &stage_cfg, init, &mut log)?,
        Stage::AlignLingual => train_crosslingual_alignment(&corpus, &stage_cfg, init, &mut log)?,
        Stage::Dlr => train_dlr(&corpus, &stage_cfg, init, &mut log)?,
        Stage::Finetune => finetune_supervised(&corpus, &stage_cfg, init, &mut log)?,
    };
    if let Some(e) = io_err {
        return Err(Error::io("<stdout>", e));
    }
    save_checkpoint(&ck, &a.out)
}

fn read_text_inputs(path: &Path, src: Lang, vocab: &Vocab) -> Result<Vec<TokenSequence>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let recs: Vec<TextRecord> = read_lines(path)?;
        return recs.into_iter().map(|r| TokenSequence::new(src, r.tokens)).collect();
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(|l| vocab.tokenize(l, src)).collect()
}

fn generate(a: GenerateArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = run_config(a.common.config.as_deref())?;
    if let Some(b) = a.beam {
        cfg.decode.beam_size = b;
    }
    cfg.decode.validate()?;
    let (src, tgt) = match a.task {
        TaskKind::Caption => {
            if a.src.is_some() || a.tgt.is_some() {
                return Err(Error::invalid("captioning takes --lang, not --src/--tgt"));
            }
            (None, lang("lang", &a.lang)?)
        }
        TaskKind::Translate => {
            if a.lang.is_some() {
                return Err(Error::invalid("translation takes --src and --tgt, not --lang"));
            }
            (Some(lang("src", &a.src)?), lang("tgt", &a.tgt)?)
        }
    };
    let ck = load_checkpoint(&a.ckpt)?;
    let model = &ck.model;
    let corpus = load_corpus(&cfg, a.common.corpus.as_deref())?;
    let gens: Vec<Generation> = match src {
        None => {
            let recs: Vec<VisionRecord> = read_lines(&a.input)?;
            let items: Vec<VisionItem> = recs.into_iter().map(|r| VisionItem::new(r.frames)).collect::<Result<_>>()?;
            let refs: Vec<&VisionItem> = items.iter().collect();
            if refs.is_empty() {
                Vec::new()
            } else if a.greedy {
                let scorer = ModelScorer::new(model, vision_coords(model, &refs)?)?;
                greedy_batch(&scorer, refs.len(), tgt, cfg.decode.max_len)?
            } else {
                caption_batch(&refs, tgt, model, &cfg.decode)?
            }
        }
        Some(src) => {
            let seqs = read_text_inputs(&a.input, src, &corpus.vocab)?;
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            if refs.is_empty() {
                Vec::new()
            } else if a.greedy {
                let scorer = ModelScorer::new(model, text_coords(model, &refs)?)?;
                greedy_batch(&scorer, refs.len(), tgt, cfg.decode.max_len)?
            } else {
                translate_batch(&refs, tgt, model, &cfg.decode)?
            }
        }
    };
    let mut text = String::new();
    for g in &gens {
        text.push_str(&corpus.vocab.detokenize(&g.sequence));
        text.push('\n');
    }
    write_out(a.out.as_deref(), &text, stdout)
}

fn evaluate(a: EvaluateArgs, stdout: &mut dyn Write) -> Result<()> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let (hyp, reference) = (read(&a.hyp)?, read(&a.reference)?);
    let split = |t: &str| -> Vec<Vec<String>> {
        t.lines()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    let (h, r) = (split(&hyp), split(&reference));
    if h.len() != r.len() {
        return Err(Error::invalid(format!(
            "{} hypothesis lines but {} reference lines",
            h.len(),
            r.len()
        )));
    }
    let mut report = serde_json::Map::new();
    for m in a.metrics.split(',').map(str::trim) {
        let v = match m {
            "bleu4" => bleu4(&h, &r)?,
            "rougeL" | "rouge_l" => corpus_rouge_l(&h, &r)?,
            _ => return Err(Error::invalid(format!("unknown metric `{m}` (valid: bleu4, rougeL)"))),
        };
        let key = if m == "rouge_l" { "rougeL" } else { m };
        report.insert(key.to_string(), serde_json::json!(v));
    }
    report.insert("samples".into(), serde_json::json!(h.len()));
    let json = serde_json::to_string_pretty(&report).expect("metric map serializes");
    writeln!(stdout, "{json}").map_err(|e| Error::io("<stdout>", e))
}

fn diagnose(a: DiagnoseArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = run_config(a.common.config.as_deref())?;
    let pairs = match &a.pairs {
        Some(p) => Domain::parse_pairs(p)?,
        None => Domain::default_pairs(),
    };
    let ck = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&cfg, a.common.corpus.as_deref())?;
    let report = alignment_report(&corpus, &ck.model, &pairs)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    writeln!(stdout, "{json}").map_err(|e| Error::io("<stdout>", e))
}

fn ablate(a: AblateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let cfg = run_config(a.common.config.as_deref())?;
    let variants: Vec<Variant> = a.variant.iter().map(|v| v.parse()).collect::<Result<_>>()?;
    let tasks: Vec<Task> = match &a.tasks {
        Some(t) => t.split(',').map(|x| x.trim().parse()).collect::<Result<_>>()?,
        None => Task::standard(),
    };
    let corpus = load_corpus(&cfg, a.common.corpus.as_deref())?;
    let pipeline = cfg.pipeline(corpus.vocab.len(), corpus.config.v_dim);
    let mut log = |e: &EpochLog| {
        let _ = writeln!(stderr, "{e}");
    };
    // variants that start from full alignment share one aligned checkpoint
    let mut aligned: Option<Checkpoint> = None;
    let mut table = crate::pipeline::AblationResult::default();
    let mut absent = Vec::new();
    for v in &variants {
        if matches!(v, Variant::Full | Variant::NoCorruption) && aligned.is_none() {
            aligned = Some(pipeline.align(&corpus, &mut log)?);
        }
        let r = run_variant(&corpus, &pipeline, v, &tasks, aligned.as_ref(), &mut log)?;
        table.rows.extend(r.rows);
        absent.extend(r.absent.into_iter().map(|t| (v.to_string(), t)));
    }
    for (v, t) in &absent {
        let _ = writeln!(stderr, "absent variant={v} task={t}");
    }
    write_out(a.out.as_deref(), &table.to_tsv(), stdout)
}

/// Parses `args` (program name first) and runs the command, printing a
/// single-line diagnostic on failure. Returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let detail = e.to_string();
            let line: Vec<&str> = detail
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error: {}", line.join(" ").trim_start_matches("error: "));
            return 2;
        }
    };
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    match execute(cli, &mut stdout.lock(), &mut stderr.lock()) {
        Ok(()) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            1
        }
    }
}
