use rand_chacha::ChaCha8Rng;

use super::encoders::{attention, ffn, init_attention, init_ffn, init_norm, norm, pack};
use super::params::{Bound, Init, Parameters};
use super::{Model, ModelConfig};
use crate::corpus::{Lang, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

pub(super) fn init_decoder(cfg: &ModelConfig, p: &mut Parameters, rng: &mut ChaCha8Rng) -> Result<()> {
    p.init(rng, "decoder.tok_emb".into(), vec![cfg.vocab_size, cfg.d], Init::Normal)?;
    p.init(rng, "decoder.pos_emb".into(), vec![cfg.max_len + 1, cfg.d], Init::Normal)?;
    for l in 0..cfg.dec_layers {
        let name = format!("decoder.layer{l}");
        init_norm(p, rng, &format!("{name}.ln1"), cfg.d)?;
        init_attention(p, rng, &format!("{name}.self"), cfg.d)?;
        init_norm(p, rng, &format!("{name}.ln2"), cfg.d)?;
        init_attention(p, rng, &format!("{name}.cross"), cfg.d)?;
        init_norm(p, rng, &format!("{name}.ln3"), cfg.d)?;
        init_ffn(p, rng, &format!("{name}.ffn"), cfg)?;
    }
    init_norm(p, rng, "decoder.ln_f", cfg.d)?;
    p.init(rng, "decoder.out_bias".into(), vec![cfg.vocab_size], Init::Zeros)
}

/// Next-token logits for every position of every prefix, packed row-wise.
///
/// `memory` holds one conditioning vector per prefix (`[batch, d]`). Each
/// prefix must start with a language BOS token. Output `[Σ len, vocab]`.
pub fn decoder_logits<'t>(
    cfg: &ModelConfig,
    b: &Bound<'_, 't>,
    memory: &Var<'t>,
    prefixes: &[&[u32]],
) -> Result<Var<'t>> {
    let h = hidden(cfg, b, memory, prefixes)?;
    h.matmul_t(&b.get("decoder.tok_emb")?)?.add_row(&b.get("decoder.out_bias")?)
}

/// Logits at the last position of each prefix. Output `[batch, vocab]`.
pub fn decoder_next_logits<'t>(
    cfg: &ModelConfig,
    b: &Bound<'_, 't>,
    memory: &Var<'t>,
    prefixes: &[&[u32]],
) -> Result<Var<'t>> {
    let h = hidden(cfg, b, memory, prefixes)?;
    let mut last = Vec::with_capacity(prefixes.len());
    let mut row = 0;
    for p in prefixes {
        row += p.len();
        last.push(row - 1);
    }
    h.gather_rows(&last)?
        .matmul_t(&b.get("decoder.tok_emb")?)?
        .add_row(&b.get("decoder.out_bias")?)
}

fn hidden<'t>(cfg: &ModelConfig, b: &Bound<'_, 't>, memory: &Var<'t>, prefixes: &[&[u32]]) -> Result<Var<'t>> {
    let ms = memory.shape();
    if ms != [prefixes.len(), cfg.d] {
        return Err(Error::Shape {
            op: "decoder memory",
            left: ms,
            right: vec![prefixes.len(), cfg.d],
        });
    }
    for p in prefixes {
        if p.first().and_then(|&t| Vocab::bos_lang(t)).is_none() {
            return Err(Error::invalid("decoder prefix must start with a language BOS token"));
        }
    }
    let packed = pack(cfg, prefixes, cfg.max_len + 1)?;
    let mut causal = Vec::with_capacity(packed.ids.len());
    let mut cross = Vec::with_capacity(packed.ids.len());
    for (s, p) in prefixes.iter().enumerate() {
        let start = packed.starts[s];
        for i in 0..p.len() {
            causal.push((start, start + i + 1));
            cross.push((s, s + 1));
        }
    }
    let tok = b.get("decoder.tok_emb")?.gather_rows(&packed.ids)?;
    let pos = b.get("decoder.pos_emb")?.gather_rows(&packed.pos)?;
    let mut x = tok.add(&pos)?;
    for l in 0..cfg.dec_layers {
        let name = format!("decoder.layer{l}");
        let h = norm(b, &x, &format!("{name}.ln1"))?;
        x = x.add(&attention(b, &h, &h, &format!("{name}.self"), cfg.heads, &causal)?)?;
        let h = norm(b, &x, &format!("{name}.ln2"))?;
        x = x.add(&attention(b, &h, memory, &format!("{name}.cross"), cfg.heads, &cross)?)?;
        let h = norm(b, &x, &format!("{name}.ln3"))?;
        x = x.add(&ffn(b, &h, &format!("{name}.ffn"))?)?;
    }
    norm(b, &x, "decoder.ln_f")
}

/// Logits over the vocabulary for the token following `prefix`, which must
/// begin with the BOS token of `lang`.
pub fn decode_step(coord: &[f32], prefix: &[u32], lang: Lang, model: &Model) -> Result<Vec<f32>> {
    if prefix.first() != Some(&Vocab::bos(lang)) {
        return Err(Error::invalid(format!("prefix must start with the BOS token of {lang}")));
    }
    let tape = Tape::new();
    let b = model.params.bind_frozen(&tape);
    let memory = tape.constant_from(vec![1, coord.len()], coord.to_vec())?;
    Ok(decoder_next_logits(&model.config, &b, &memory, &[prefix])?.to_vec())
}
