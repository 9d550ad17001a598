use super::*;
use crate::corpus::{gen_scenes, Grammar, Lang, TokenSequence, VisionItem, VisionRenderer, Vocab, EOS, PAD};
use crate::numerics::{grad_check, Tape, Var};

fn tiny() -> ModelConfig {
    ModelConfig {
        d: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_len: 8,
        vocab_size: 167,
        v_dim: 6,
    }
}

fn sample_text(lang: Lang) -> TokenSequence {
    let g = Grammar::new(3).unwrap();
    g.render_text(&gen_scenes(3, 10).unwrap()[0], lang)
}

fn sample_vision(v_dim: usize, frames: usize) -> VisionItem {
    let r = VisionRenderer::new(5, v_dim).unwrap();
    r.render(&gen_scenes(3, 10).unwrap()[1], frames, 0.05, 9).unwrap()
}

#[test]
fn encoders_emit_unit_coordinates() {
    let m = Model::init(ModelConfig::default(), 1).unwrap();
    for c in [
        encode_vision(&sample_vision(64, 8), &m).unwrap(),
        encode_pivot(&sample_text(Lang::L0), &m).unwrap(),
        encode_multi(&sample_text(Lang::L2), &m).unwrap(),
    ] {
        assert_eq!(c.dim(), 64);
        assert!((c.norm() - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn init_statistics() {
    let m = Model::init(ModelConfig::default(), 1).unwrap();
    let w = m.params.get("pivot.layer0.attn.q.w").unwrap().data();
    let mean = w.iter().sum::<f32>() / w.len() as f32;
    let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / w.len() as f32).sqrt();
    assert!(mean.abs() < 3e-3 && (std - 0.02).abs() < 2e-3, "{mean} {std}");
    assert!(m.params.get("decoder.out_bias").unwrap().data().iter().all(|&b| b == 0.0));
    assert!(m.params.iter().all(|p| p.tensor.is_finite()));
}

#[test]
fn init_is_seeded() {
    let a = Model::init(tiny(), 4).unwrap();
    assert_eq!(a, Model::init(tiny(), 4).unwrap());
    assert_ne!(a, Model::init(tiny(), 5).unwrap());
}

#[test]
fn vision_ignores_frame_order() {
    let m = Model::init(ModelConfig::default(), 2).unwrap();
    let v = sample_vision(64, 8);
    let mut rev = v.clone();
    rev.frames.reverse();
    let a = encode_vision(&v, &m).unwrap();
    let b = encode_vision(&rev, &m).unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() <= 1e-5);
    }
}

#[test]
fn vision_repeated_frame_equals_single_frame() {
    let m = Model::init(ModelConfig::default(), 2).unwrap();
    let one = sample_vision(64, 1);
    let many = VisionItem::new(vec![one.frames[0].clone(); 8]).unwrap();
    let a = encode_vision(&one, &m).unwrap();
    let b = encode_vision(&many, &m).unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() <= 1e-5);
    }
}

#[test]
fn vision_rejects_wrong_dim() {
    let m = Model::init(ModelConfig::default(), 2).unwrap();
    assert!(encode_vision(&sample_vision(32, 8), &m).is_err());
}

#[test]
fn multi_is_padding_invariant() {
    let m = Model::init(ModelConfig::default(), 3).unwrap();
    let t = sample_text(Lang::L1);
    let mut padded = t.ids.clone();
    padded.extend([PAD; 5]);
    let tape = Tape::new();
    let b = m.params.bind_frozen(&tape);
    let out = multi_batch(&m.config, &b, &[&t.ids, &padded]).unwrap().to_vec();
    for i in 0..64 {
        assert!((out[i] - out[64 + i]).abs() <= 1e-5);
    }
}

#[test]
fn pivot_requires_l0_and_eos() {
    let m = Model::init(tiny(), 3).unwrap();
    assert!(encode_pivot(&sample_text(Lang::L1), &m).is_err());
    let tape = Tape::new();
    let b = m.params.bind_frozen(&tape);
    let no_eos = sample_text(Lang::L0).surface().to_vec();
    assert!(pivot_batch(&m.config, &b, &[&no_eos]).is_err());
}

#[test]
fn multi_rejects_empty_and_overlong() {
    let m = Model::init(tiny(), 3).unwrap();
    let tape = Tape::new();
    let b = m.params.bind_frozen(&tape);
    let empty: Vec<u32> = vec![];
    assert!(multi_batch(&m.config, &b, &[&empty]).is_err());
    let long = vec![10u32; 9];
    assert!(multi_batch(&m.config, &b, &[&long]).is_err());
}

#[test]
fn decoder_is_causal() {
    // Changing a later token must not move earlier-position logits.
    let m = Model::init(ModelConfig::default(), 6).unwrap();
    let t = sample_text(Lang::L2);
    let mut a = vec![Vocab::bos(Lang::L2)];
    a.extend_from_slice(t.surface());
    let mut b = a.clone();
    *b.last_mut().unwrap() = EOS;
    let coord = encode_multi(&t, &m).unwrap();
    let tape = Tape::new();
    let bound = m.params.bind_frozen(&tape);
    let mem = tape.constant_from(vec![2, 64], [coord.as_slice(), coord.as_slice()].concat()).unwrap();
    let logits = decoder_logits(&m.config, &bound, &mem, &[&a, &b]).unwrap().to_vec();
    let v = m.config.vocab_size;
    let n = a.len();
    for pos in 0..n - 1 {
        for j in 0..v {
            assert_eq!(logits[pos * v + j], logits[(n + pos) * v + j]);
        }
    }
    assert!((0..v).any(|j| logits[(n - 1) * v + j] != logits[(2 * n - 1) * v + j]));
}

#[test]
fn decoder_depends_on_coordinate() {
    let m = Model::init(ModelConfig::default(), 6).unwrap();
    let c1 = encode_multi(&sample_text(Lang::L1), &m).unwrap();
    let c2 = encode_vision(&sample_vision(64, 8), &m).unwrap();
    let p = [Vocab::bos(Lang::L1)];
    let a = decode_step(c1.as_slice(), &p, Lang::L1, &m).unwrap();
    let b = decode_step(c2.as_slice(), &p, Lang::L1, &m).unwrap();
    assert_eq!(a.len(), 167);
    assert!(a.iter().zip(&b).any(|(x, y)| x != y));
}

#[test]
fn decode_step_checks_bos() {
    let m = Model::init(tiny(), 6).unwrap();
    let c = vec![0.0f32; 8];
    assert!(decode_step(&c, &[Vocab::bos(Lang::L1)], Lang::L2, &m).is_err());
    assert!(decode_step(&c, &[20], Lang::L2, &m).is_err());
}

#[test]
fn decoder_next_matches_full_logits() {
    let m = Model::init(tiny(), 8).unwrap();
    let t = sample_text(Lang::L3);
    let mut p = vec![Vocab::bos(Lang::L3)];
    p.extend_from_slice(&t.surface()[..3]);
    let coord = vec![0.5f32; 8];
    let next = decode_step(&coord, &p, Lang::L3, &m).unwrap();
    let tape = Tape::new();
    let b = m.params.bind_frozen(&tape);
    let mem = tape.constant_from(vec![1, 8], coord).unwrap();
    let full = decoder_logits(&m.config, &b, &mem, &[&p]).unwrap().to_vec();
    assert_eq!(next, full[3 * 167..4 * 167]);
}

#[test]
fn freeze_flags_select_trainable_leaves() {
    let mut m = Model::init(tiny(), 2).unwrap();
    m.params.train_only(&[Network::Multi]);
    assert_eq!(m.params.is_frozen("multi.proj.w"), Some(false));
    assert_eq!(m.params.is_frozen("pivot.proj.w"), Some(true));
    let tape = Tape::new();
    let b = m.params.bind(&tape);
    let t = sample_text(Lang::L0);
    let loss = multi_batch(&m.config, &b, &[&t.ids])
        .unwrap()
        .sub(&pivot_batch(&m.config, &b, &[&t.ids]).unwrap())
        .unwrap();
    let loss = loss.mul(&loss).unwrap().sum();
    tape.backward(loss).unwrap();
    let mut params = m.params.clone();
    params.accumulate_grads(&b).unwrap();
    for p in params.iter() {
        assert_eq!(p.tensor.grad().is_some(), p.name.starts_with("multi."), "{}", p.name);
    }
}

fn check_param(name: &str, f: impl for<'t> Fn(&Model, &Bound<'_, 't>) -> Result<Var<'t>>) {
    let mut m = Model::init(tiny(), 11).unwrap();
    // Larger weights than the default init keep the finite differences
    // well above f32 rounding.
    let mut rng = Parameters::rng(12);
    for p in m.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += rand::Rng::gen_range(&mut rng, -0.3..0.3);
        }
    }
    let x = m.params.get(name).unwrap().clone();
    let err = grad_check(
        |tape, v| {
            let b = m.params.bind_frozen(tape);
            b.set(name, v)?;
            f(&m, &b)
        },
        &x,
        3e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "{name}: {err}");
}

fn text_ids() -> Vec<u32> {
    sample_text(Lang::L0).ids
}

#[test]
fn pivot_encoder_gradients() {
    for name in ["pivot.layer0.attn.q.w", "pivot.layer0.ffn.fc1.w", "pivot.ln_f.g", "pivot.proj.b"] {
        check_param(name, |m, b| {
            let ids = text_ids();
            let e = pivot_batch(&m.config, b, &[&ids])?;
            let w = b.tape().constant_from(vec![1, 8], (0..8).map(|i| i as f32 - 3.5).collect())?;
            Ok(e.mul(&w)?.sum())
        });
    }
}

#[test]
fn multi_encoder_gradients() {
    for name in ["multi.tok_emb", "multi.layer0.attn.v.w", "multi.layer0.ln2.b"] {
        check_param(name, |m, b| {
            let ids = text_ids();
            let e = multi_batch(&m.config, b, &[&ids])?;
            let w = b.tape().constant_from(vec![1, 8], (0..8).map(|i| (i as f32).sin()).collect())?;
            Ok(e.mul(&w)?.sum())
        });
    }
}

#[test]
fn vision_encoder_gradients() {
    for name in ["vision.fc1.w", "vision.fc2.b"] {
        check_param(name, |m, b| {
            let v = sample_vision(6, 3);
            let e = vision_batch(&m.config, b, &[&v])?;
            let w = b.tape().constant_from(vec![1, 8], (0..8).map(|i| (i as f32).cos()).collect())?;
            Ok(e.mul(&w)?.sum())
        });
    }
}

#[test]
fn decoder_gradients() {
    for name in [
        "decoder.tok_emb",
        "decoder.layer0.self.k.w",
        "decoder.layer0.cross.v.w",
        "decoder.layer0.ffn.fc2.w",
        "decoder.out_bias",
    ] {
        check_param(name, |m, b| {
            let t = sample_text(Lang::L1);
            let mut p = vec![Vocab::bos(Lang::L1)];
            p.extend_from_slice(t.surface());
            let targets: Vec<usize> = t.ids.iter().map(|&i| i as usize).collect();
            let mem = b.tape().constant_from(vec![1, 8], (0..8).map(|i| 0.3 * (i as f32).sin()).collect())?;
            let logits = decoder_logits(&m.config, b, &mem, &[&p])?;
            logits.cross_entropy(&targets, &vec![1.0; targets.len()])
        });
    }
}
