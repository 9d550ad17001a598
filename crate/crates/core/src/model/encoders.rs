use rand_chacha::ChaCha8Rng;

use super::params::{Bound, Init, Parameters};
use super::{Coordinate, Model, ModelConfig, Network};
use crate::corpus::{Lang, TokenSequence, VisionItem, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

const LN_EPS: f32 = 1e-5;

pub(super) fn init_linear(
    p: &mut Parameters,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    p.init(rng, format!("{name}.w"), vec![fan_in, fan_out], Init::Normal)?;
    p.init(rng, format!("{name}.b"), vec![fan_out], Init::Zeros)
}

pub(super) fn init_norm(p: &mut Parameters, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Result<()> {
    p.init(rng, format!("{name}.g"), vec![d], Init::Ones)?;
    p.init(rng, format!("{name}.b"), vec![d], Init::Zeros)
}

pub(super) fn init_attention(p: &mut Parameters, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Result<()> {
    for m in ["q", "k", "v", "o"] {
        init_linear(p, rng, &format!("{name}.{m}"), d, d)?;
    }
    Ok(())
}

pub(super) fn init_ffn(p: &mut Parameters, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<()> {
    init_linear(p, rng, &format!("{name}.fc1"), cfg.d, cfg.ffn())?;
    init_linear(p, rng, &format!("{name}.fc2"), cfg.ffn(), cfg.d)
}

pub(super) fn init_vision(cfg: &ModelConfig, p: &mut Parameters, rng: &mut ChaCha8Rng) -> Result<()> {
    init_linear(p, rng, "vision.fc1", cfg.v_dim, cfg.ffn())?;
    init_linear(p, rng, "vision.fc2", cfg.ffn(), cfg.d)
}

pub(super) fn init_text(cfg: &ModelConfig, net: Network, p: &mut Parameters, rng: &mut ChaCha8Rng) -> Result<()> {
    let pre = net.prefix();
    p.init(rng, format!("{pre}tok_emb"), vec![cfg.vocab_size, cfg.d], Init::Normal)?;
    p.init(rng, format!("{pre}pos_emb"), vec![cfg.max_len, cfg.d], Init::Normal)?;
    for l in 0..cfg.enc_layers {
        let name = format!("{pre}layer{l}");
        init_norm(p, rng, &format!("{name}.ln1"), cfg.d)?;
        init_attention(p, rng, &format!("{name}.attn"), cfg.d)?;
        init_norm(p, rng, &format!("{name}.ln2"), cfg.d)?;
        init_ffn(p, rng, &format!("{name}.ffn"), cfg)?;
    }
    init_norm(p, rng, &format!("{pre}ln_f"), cfg.d)?;
    init_linear(p, rng, &format!("{pre}proj"), cfg.d, cfg.d)
}

pub(super) fn linear<'t>(b: &Bound<'_, 't>, x: &Var<'t>, name: &str) -> Result<Var<'t>> {
    x.matmul(&b.get(&format!("{name}.w"))?)?.add_row(&b.get(&format!("{name}.b"))?)
}

pub(super) fn norm<'t>(b: &Bound<'_, 't>, x: &Var<'t>, name: &str) -> Result<Var<'t>> {
    x.layer_norm(&b.get(&format!("{name}.g"))?, &b.get(&format!("{name}.b"))?, LN_EPS)
}

/// Multi-head attention block: queries from `x`, keys/values from `mem`.
pub(super) fn attention<'t>(
    b: &Bound<'_, 't>,
    x: &Var<'t>,
    mem: &Var<'t>,
    name: &str,
    heads: usize,
    ranges: &[(usize, usize)],
) -> Result<Var<'t>> {
    let q = linear(b, x, &format!("{name}.q"))?;
    let k = linear(b, mem, &format!("{name}.k"))?;
    let v = linear(b, mem, &format!("{name}.v"))?;
    let a = Var::attention(&q, &k, &v, heads, ranges)?;
    linear(b, &a, &format!("{name}.o"))
}

pub(super) fn ffn<'t>(b: &Bound<'_, 't>, x: &Var<'t>, name: &str) -> Result<Var<'t>> {
    let h = linear(b, x, &format!("{name}.fc1"))?.gelu();
    linear(b, &h, &format!("{name}.fc2"))
}

/// Row layout of a packed batch of variable-length sequences.
pub(super) struct Packed {
    pub ids: Vec<usize>,
    pub pos: Vec<usize>,
    pub starts: Vec<usize>,
    /// Rows per sequence excluding trailing PAD.
    pub valid: Vec<usize>,
}

pub(super) fn pack(cfg: &ModelConfig, seqs: &[&[u32]], max_len: usize) -> Result<Packed> {
    if seqs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut packed = Packed {
        ids: Vec::new(),
        pos: Vec::new(),
        starts: Vec::with_capacity(seqs.len()),
        valid: Vec::with_capacity(seqs.len()),
    };
    for s in seqs {
        if s.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if s.len() > max_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_len {max_len}",
                s.len()
            )));
        }
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let valid = s.len() - s.iter().rev().take_while(|&&t| t == PAD).count();
        if valid == 0 {
            return Err(Error::invalid("sequence holds only padding"));
        }
        packed.starts.push(packed.ids.len());
        packed.valid.push(valid);
        packed.ids.extend(s.iter().map(|&t| t as usize));
        packed.pos.extend(0..s.len());
    }
    Ok(packed)
}

/// Bidirectional transformer over a packed batch; PAD rows are never
/// attended to.
fn text_trunk<'t>(
    cfg: &ModelConfig,
    b: &Bound<'_, 't>,
    net: Network,
    seqs: &[&[u32]],
) -> Result<(Var<'t>, Packed)> {
    let pre = net.prefix();
    let packed = pack(cfg, seqs, cfg.max_len)?;
    let mut ranges = Vec::with_capacity(packed.ids.len());
    for (s, seq) in seqs.iter().enumerate() {
        let r = (packed.starts[s], packed.starts[s] + packed.valid[s]);
        ranges.extend(std::iter::repeat(r).take(seq.len()));
    }
    let tok = b.get(&format!("{pre}tok_emb"))?.gather_rows(&packed.ids)?;
    let pos = b.get(&format!("{pre}pos_emb"))?.gather_rows(&packed.pos)?;
    let mut x = tok.add(&pos)?;
    for l in 0..cfg.enc_layers {
        let name = format!("{pre}layer{l}");
        let h = norm(b, &x, &format!("{name}.ln1"))?;
        x = x.add(&attention(b, &h, &h, &format!("{name}.attn"), cfg.heads, &ranges)?)?;
        let h = norm(b, &x, &format!("{name}.ln2"))?;
        x = x.add(&ffn(b, &h, &format!("{name}.ffn"))?)?;
    }
    Ok((norm(b, &x, &format!("{pre}ln_f"))?, packed))
}

/// Pivot encoder: hidden state at each sequence's EOS, projected and
/// normalized. Output `[batch, d]`.
pub fn pivot_batch<'t>(cfg: &ModelConfig, b: &Bound<'_, 't>, seqs: &[&[u32]]) -> Result<Var<'t>> {
    let mut eos_rows = Vec::with_capacity(seqs.len());
    for s in seqs {
        match s.iter().position(|&t| t == EOS) {
            Some(p) => eos_rows.push(p),
            None => return Err(Error::invalid("pivot encoder input has no EOS token")),
        }
    }
    let (h, packed) = text_trunk(cfg, b, Network::Pivot, seqs)?;
    let rows: Vec<usize> = eos_rows.iter().zip(&packed.starts).map(|(p, s)| p + s).collect();
    let pooled = h.gather_rows(&rows)?;
    Ok(linear(b, &pooled, "pivot.proj")?.normalize_rows())
}

/// Multilingual encoder: mean over non-PAD token states, projected and
/// normalized. Output `[batch, d]`.
pub fn multi_batch<'t>(cfg: &ModelConfig, b: &Bound<'_, 't>, seqs: &[&[u32]]) -> Result<Var<'t>> {
    let (h, packed) = text_trunk(cfg, b, Network::Multi, seqs)?;
    let groups: Vec<Vec<usize>> = packed
        .starts
        .iter()
        .zip(&packed.valid)
        .map(|(&s, &v)| (s..s + v).collect())
        .collect();
    let pooled = h.pool_rows(&groups)?;
    Ok(linear(b, &pooled, "multi.proj")?.normalize_rows())
}

/// Vision encoder: per-frame two-layer map, mean over frames, normalized.
pub fn vision_batch<'t>(cfg: &ModelConfig, b: &Bound<'_, 't>, items: &[&VisionItem]) -> Result<Var<'t>> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut data = Vec::new();
    let mut groups = Vec::with_capacity(items.len());
    let mut row = 0;
    for item in items {
        item.validate(Some(cfg.v_dim))?;
        groups.push((row..row + item.frames.len()).collect::<Vec<_>>());
        row += item.frames.len();
        for f in &item.frames {
            data.extend_from_slice(f);
        }
    }
    let frames = b.tape().constant(&Tensor::new(vec![row, cfg.v_dim], data)?);
    let h = linear(b, &frames, "vision.fc1")?.gelu();
    let e = linear(b, &h, "vision.fc2")?;
    Ok(e.pool_rows(&groups)?.normalize_rows())
}

fn single<'t>(v: Var<'t>) -> Result<Coordinate> {
    Coordinate::new(v.to_vec())
}

pub fn encode_vision(v: &VisionItem, model: &Model) -> Result<Coordinate> {
    let tape = crate::numerics::Tape::new();
    let b = model.params.bind_frozen(&tape);
    single(vision_batch(&model.config, &b, &[v])?)
}

pub fn encode_pivot(t: &TokenSequence, model: &Model) -> Result<Coordinate> {
    if t.lang != Lang::L0 {
        return Err(Error::invalid(format!("pivot encoder takes L0 text, got {}", t.lang)));
    }
    let tape = crate::numerics::Tape::new();
    let b = model.params.bind_frozen(&tape);
    single(pivot_batch(&model.config, &b, &[&t.ids])?)
}

pub fn encode_multi(t: &TokenSequence, model: &Model) -> Result<Coordinate> {
    let tape = crate::numerics::Tape::new();
    let b = model.params.bind_frozen(&tape);
    single(multi_batch(&model.config, &b, &[&t.ids])?)
}
