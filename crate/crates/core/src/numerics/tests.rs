use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

#[test]
fn identity_matmul_is_noop() {
    let tape = Tape::new();
    let x = random(vec![3, 5], 1);
    let i3 = tape.constant(&Tensor::eye(3));
    let out = i3.matmul(&tape.constant(&x)).unwrap();
    assert_eq!(out.to_vec(), x.data());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let z = tape.constant(&Tensor::zeros(vec![1, 3]).unwrap());
    for p in z.softmax().to_vec() {
        assert!((p - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn layer_norm_of_1_2_3() {
    let tape = Tape::new();
    let x = tape.constant_from(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let g = tape.constant_from(vec![3], vec![1.0; 3]).unwrap();
    let b = tape.constant_from(vec![3], vec![0.0; 3]).unwrap();
    let y = x.layer_norm(&g, &b, 0.0).unwrap().to_vec();
    // mean 2, variance 2/3 -> (x - 2) / sqrt(2/3)
    let s = (2.0f32 / 3.0).sqrt();
    let want = [-1.0 / s, 0.0, 1.0 / s];
    for (a, w) in y.iter().zip(want) {
        assert!((a - w).abs() < 1e-5);
    }
    let mean: f32 = y.iter().sum::<f32>() / 3.0;
    let var: f32 = y.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 3.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-5);
}

#[test]
fn square_sum_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![1], vec![3.0]).unwrap().with_requires_grad(true));
    let loss = x.mul(&x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x), vec![6.0]);
    // second call accumulates
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x), vec![12.0]);
    tape.zero_grad();
    assert_eq!(tape.grad(x), vec![0.0]);
}

#[test]
fn detached_loss_gives_zero_grads() {
    let tape = Tape::new();
    let x = tape.leaf(&random(vec![2, 2], 3).with_requires_grad(true));
    let c = tape.constant(&random(vec![2, 2], 4));
    let loss = c.mul(&c).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x), vec![0.0; 4]);
}

#[test]
fn non_scalar_backward_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(&random(vec![2, 2], 3).with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&random(vec![2, 3], 1));
    let b = tape.constant(&random(vec![2, 3], 2));
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::Shape { .. }));
    assert!(a.add(&tape.constant(&random(vec![3, 2], 1))).is_err());
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = random(vec![4, 3], 7);
    let err = grad_check(|_, x| Ok(x.sum()), &x, 1e-3).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn grad_check_reports_non_finite() {
    let x = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
    // 1/x via normalize of a zero row is finite; force inf through a huge scale.
    let res = grad_check(|_, x| Ok(x.scale(f32::MAX).scale(10.0).sum()), &x, 1e-3);
    assert!(matches!(res, Err(Error::NonFinite { .. })));
}

type OpFn = for<'t> fn(&'t Tape, Var<'t>) -> crate::Result<Var<'t>>;

/// One scalar function per differentiable op; each closes over fixed
/// random partners so the op's every input path is exercised.
fn op_cases() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    fn partner<'t>(t: &'t Tape, shape: Vec<usize>, seed: u64) -> Var<'t> {
        t.constant(&random(shape, seed + 100))
    }
    vec![
        ("matmul_lhs", vec![3, 4], |t, x| {
            x.matmul(&partner(t, vec![4, 2], 1))?.mul(&partner(t, vec![3, 2], 2))
                .map(|v| v.sum())
        }),
        ("matmul_rhs", vec![4, 2], |t, x| {
            partner(t, vec![3, 4], 1).matmul(&x)?.mul(&partner(t, vec![3, 2], 2)).map(|v| v.sum())
        }),
        ("matmul_t", vec![5, 4], |t, x| {
            let p = partner(t, vec![3, 4], 3);
            p.matmul_t(&x)?.mul(&partner(t, vec![3, 5], 4)).map(|v| v.sum())
        }),
        ("self_matmul_t", vec![3, 4], |t, x| {
            x.matmul_t(&x)?.mul(&partner(t, vec![3, 3], 4)).map(|v| v.sum())
        }),
        ("add_sub_mul", vec![2, 3], |t, x| {
            let p = partner(t, vec![2, 3], 5);
            x.add(&p)?.mul(&x)?.sub(&p.mul(&x)?).map(|v| v.sum())
        }),
        ("add_row_bias", vec![3], |t, x| {
            partner(t, vec![4, 3], 6).add_row(&x)?.gelu().mean().scale(3.0).add(&t.constant_from(vec![1], vec![0.0])?)
        }),
        ("concat_slice", vec![2, 3], |t, x| {
            let p = partner(t, vec![1, 3], 7);
            let c = Var::concat_rows(&[p, x, x])?;
            c.slice_rows(1, 2)?.mul(&partner(t, vec![2, 3], 8)).map(|v| v.sum())
        }),
        ("transpose", vec![2, 3], |t, x| {
            x.transpose()?.mul(&partner(t, vec![3, 2], 9)).map(|v| v.sum())
        }),
        ("gather", vec![4, 3], |t, x| {
            x.gather_rows(&[2, 0, 2])?.mul(&partner(t, vec![3, 3], 10)).map(|v| v.sum())
        }),
        ("softmax", vec![3, 4], |t, x| {
            x.scale(2.0).softmax().mul(&partner(t, vec![3, 4], 11)).map(|v| v.sum())
        }),
        ("layer_norm_x", vec![3, 5], |t, x| {
            let g = partner(t, vec![5], 12);
            let b = partner(t, vec![5], 13);
            x.layer_norm(&g, &b, 1e-5)?.mul(&partner(t, vec![3, 5], 14)).map(|v| v.sum())
        }),
        ("layer_norm_affine", vec![5], |t, x| {
            let inp = partner(t, vec![3, 5], 15);
            inp.layer_norm(&x, &x, 1e-5)?.mul(&partner(t, vec![3, 5], 16)).map(|v| v.sum())
        }),
        ("gelu", vec![3, 4], |t, x| x.scale(2.0).gelu().mul(&partner(t, vec![3, 4], 17)).map(|v| v.sum())),
        ("relu", vec![3, 4], |t, x| x.relu().mul(&partner(t, vec![3, 4], 18)).map(|v| v.sum())),
        ("pool_rows", vec![5, 3], |t, x| {
            x.pool_rows(&[vec![0, 1, 2], vec![4], vec![1, 3]])?.mul(&partner(t, vec![3, 3], 19)).map(|v| v.sum())
        }),
        ("normalize_rows", vec![3, 4], |t, x| {
            x.normalize_rows().mul(&partner(t, vec![3, 4], 20)).map(|v| v.sum())
        }),
        ("row_norms", vec![3, 4], |t, x| {
            x.row_norms().mul(&partner(t, vec![3, 1], 21)).map(|v| v.sum())
        }),
        ("cosine_matrix", vec![3, 4], |t, x| {
            x.cosine_matrix(&partner(t, vec![2, 4], 22))?.mul(&partner(t, vec![3, 2], 23)).map(|v| v.sum())
        }),
        ("cross_entropy", vec![3, 5], |_, x| x.scale(3.0).cross_entropy(&[1, 4, 0], &[0.5, 1.0, 0.25])),
        ("attention_q", vec![4, 4], |t, x| {
            let kv = partner(t, vec![3, 4], 24);
            let v = partner(t, vec![3, 4], 25);
            Var::attention(&x, &kv, &v, 2, &[(0, 3), (0, 1), (1, 3), (2, 3)])?
                .mul(&partner(t, vec![4, 4], 26))
                .map(|v| v.sum())
        }),
        ("attention_kv", vec![3, 4], |t, x| {
            let q = partner(t, vec![4, 4], 27);
            Var::attention(&q, &x, &x, 2, &[(0, 3), (0, 2), (1, 3), (0, 3)])?
                .mul(&partner(t, vec![4, 4], 28))
                .map(|v| v.sum())
        }),
    ]
}

#[test]
fn every_op_passes_grad_check_on_ten_seeds() {
    for (name, shape, f) in op_cases() {
        for seed in 0..10 {
            let x = random(shape.clone(), seed);
            let err = grad_check(f, &x, 1e-3).unwrap();
            assert!(err <= 1e-3, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.constant(&random(vec![6, 8], 42));
        let w = tape.constant(&random(vec![8, 8], 43));
        let h = x.matmul(&w).unwrap().gelu();
        let out = Var::attention(&h, &h, &h, 2, &vec![(0, 6); 6]).unwrap();
        out.softmax().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn single_key_attention_copies_value() {
    let tape = Tape::new();
    let q = tape.constant(&random(vec![2, 4], 1));
    let kv = tape.constant(&random(vec![1, 4], 2));
    let out = Var::attention(&q, &kv, &kv, 2, &[(0, 1), (0, 1)]).unwrap().to_vec();
    assert_eq!(&out[..4], kv.to_vec().as_slice());
    assert_eq!(&out[4..], kv.to_vec().as_slice());
}

#[test]
fn bad_attention_ranges_rejected() {
    let tape = Tape::new();
    let q = tape.constant(&random(vec![2, 4], 1));
    assert!(Var::attention(&q, &q, &q, 2, &[(0, 2)]).is_err());
    assert!(Var::attention(&q, &q, &q, 2, &[(0, 3), (0, 1)]).is_err());
    assert!(Var::attention(&q, &q, &q, 3, &[(0, 2), (0, 1)]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f32..30.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant_from(vec![3, 4], vals).unwrap();
        let y = x.softmax().to_vec();
        for row in y.chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(vals in prop::collection::vec(-50.0f32..50.0, 16)) {
        let tape = Tape::new();
        let x = tape.constant_from(vec![2, 8], vals).unwrap();
        let g = tape.constant_from(vec![8], vec![1.0; 8]).unwrap();
        let b = tape.constant_from(vec![8], vec![0.0; 8]).unwrap();
        let y = x.layer_norm(&g, &b, 1e-5).unwrap().to_vec();
        for row in y.chunks(8) {
            prop_assert!((row.iter().sum::<f32>() / 8.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(vals in prop::collection::vec(-1e3f32..1e3, 12)) {
        let tape = Tape::new();
        let x = tape.constant_from(vec![3, 4], vals).unwrap();
        let outs = [
            x.softmax(),
            x.normalize_rows(),
            x.gelu(),
            x.cross_entropy(&[0, 1, 2], &[1.0; 3]).unwrap(),
            Var::attention(&x, &x, &x, 2, &[(0, 3); 3]).unwrap(),
        ];
        for o in outs {
            prop_assert!(o.value().is_finite());
        }
    }
}
