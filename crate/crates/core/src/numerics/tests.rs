use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Keep clear of relu's kink so central differences stay valid.
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out * w)` for a fixed random `w`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, NumericsError> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(rand_tensor(&mut rng, &shape))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

const H: f64 = 1e-5;

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap()).unwrap();
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap()).unwrap();
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y).data().to_vec();
    assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15, "{v:?}");

    let (a, b, c) = (0.3, -1.7, 12.5);
    let x1 = tape.constant(Tensor::from_f64(&[2], &[a, b]).unwrap()).unwrap();
    let x2 = tape.constant(Tensor::from_f64(&[2], &[c + a, c + b]).unwrap()).unwrap();
    let (y1, y2) = (tape.softmax(x1).unwrap(), tape.softmax(x2).unwrap());
    for (p, q) in tape.value(y1).data().iter().zip(tape.value(y2).data()) {
        assert!((p - q).abs() < 1e-14);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros(&[4])).unwrap();
    let l = tape.cross_entropy_mean(uniform, &[2]).unwrap();
    assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

    let peaked = tape.constant(Tensor::from_f64(&[4], &[0.0, 30.0, 0.0, 0.0]).unwrap()).unwrap();
    let l = tape.cross_entropy_mean(peaked, &[1]).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-9);

    let x = tape.constant(Tensor::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap()).unwrap();
    let l = tape.cross_entropy_mean(x, &[0]).unwrap();
    assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

    let err = tape.cross_entropy_mean(x, &[2]).unwrap_err();
    assert!(matches!(err, NumericsError::TargetOutOfRange { target: 2, vocab: 2 }));
}

#[test]
fn batched_cross_entropy_is_mean_reduced() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2, 2], &[0.0, 3f64.ln(), 0.0, 0.0]).unwrap()).unwrap();
    let l = tape.cross_entropy_mean(x, &[0, 1]).unwrap();
    let expected = (4f64.ln() + 2f64.ln()) / 2.0;
    assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[3], &[1.0, -2.0, 5.0]).unwrap()).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn backward_accumulates_until_cleared() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item().unwrap(), 12.0);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(tape.backward(x), Err(NumericsError::NotScalar { .. })));

    let mut other = Tape::<f64>::new();
    let y = other.param(Tensor::scalar(1.0)).unwrap();
    assert_eq!(tape.backward(y), Err(NumericsError::ForeignVar));
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut tape = Tape::<f64>::new();
    let big = tape.constant(Tensor::from_f64(&[1], &[1e300]).unwrap()).unwrap();
    assert!(matches!(tape.mul(big, big), Err(NumericsError::NonFinite { op: "mul" })));
    assert!(tape.leaf(Tensor::from_f64(&[1], &[f64::NAN]).unwrap(), false).is_err());
}

#[test]
fn shape_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
    let c = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert!(tape.add(a, c).is_err());
    assert!(tape.slice(a, 1, 2, 2).is_err());
    assert!(tape.embedding(a, &[5]).is_err());
}

#[test]
fn gradcheck_sum_of_squares_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let err = finite_diff_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let err = finite_diff_check(
        |t, _x| t.constant(Tensor::scalar(2.5)),
        &x,
        H,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[4, 6]),
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[6, 3]),
        rand_tensor(&mut rng, &[3]),
    ];
    let targets = [0usize, 2, 1, 1, 0];
    let err = finite_diff_check_many(
        |t, v| {
            let h = t.linear(v[0], v[1], v[2])?;
            let h = t.gelu(h)?;
            let logits = t.linear(h, v[3], v[4])?;
            t.cross_entropy_mean(logits, &targets)
        },
        &inputs,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn reduction_reruns_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut rng, &[16, 8])).unwrap();
        let w = tape.param(rand_tensor(&mut rng, &[8, 8])).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let s = tape.softmax(y).unwrap();
        let l = project(&mut tape, s, 3).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).item().unwrap(), tape.grad(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

/// Builds one primitive application from random inputs; returns a scalar.
fn primitive_case(kind: usize, rows: usize, cols: usize, seed: u64) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| rand_tensor(&mut rng, shape);
    match kind {
        0 => (vec![t(&[rows, cols]), t(&[cols, 3])], Box::new(move |tp, v| {
            let o = tp.matmul(v[0], v[1])?;
            project(tp, o, seed)
        })),
        1 => (vec![t(&[rows, cols]), t(&[cols, 2]), t(&[2])], Box::new(move |tp, v| {
            let o = tp.linear(v[0], v[1], v[2])?;
            project(tp, o, seed)
        })),
        2 => (vec![t(&[rows, cols]), t(&[rows, cols])], Box::new(move |tp, v| {
            let o = tp.add(v[0], v[1])?;
            let o = tp.mul(o, v[1])?;
            let o = tp.scale(o, -0.75)?;
            project(tp, o, seed)
        })),
        3 => {
            let ids: Vec<usize> = (0..rows + 2).map(|i| (i * 7 + seed as usize) % rows).collect();
            (vec![t(&[rows, cols])], Box::new(move |tp, v| {
                let o = tp.embedding(v[0], &ids)?;
                let o = tp.gather_rows(o, &[0, ids.len() - 1, 1, 0])?;
                project(tp, o, seed)
            }))
        }
        4 => (vec![t(&[rows, cols + 1]), t(&[cols + 1]), t(&[cols + 1])], Box::new(move |tp, v| {
            let o = tp.layer_norm(v[0], v[1], v[2])?;
            project(tp, o, seed)
        })),
        5 => (vec![t(&[rows, cols])], Box::new(move |tp, v| {
            let a = tp.gelu(v[0])?;
            let b = tp.relu(v[0])?;
            let o = tp.add(a, b)?;
            project(tp, o, seed)
        })),
        6 => (vec![t(&[rows, cols + 1])], Box::new(move |tp, v| {
            let o = tp.softmax(v[0])?;
            project(tp, o, seed)
        })),
        7 => (vec![t(&[rows, cols]), t(&[rows, 2]), t(&[1, cols])], Box::new(move |tp, v| {
            let a = tp.concat(&[v[0], v[1]], 1)?;
            let b = tp.concat(&[v[0], v[2]], 0)?;
            let a = tp.slice(a, 1, 1, cols)?;
            let b = tp.slice(b, 0, 1, rows)?;
            let o = tp.add(a, b)?;
            project(tp, o, seed)
        })),
        8 => (vec![t(&[rows, cols])], Box::new(move |tp, v| {
            let a = tp.transpose(v[0])?;
            let a = tp.reshape(a, &[rows * cols])?;
            let p = project(tp, a, seed)?;
            let m = tp.mean(v[0])?;
            let s = tp.sum(v[0])?;
            let ms = tp.mul(m, s)?;
            tp.add(p, ms)
        })),
        9 => {
            let heads = 1 + (seed as usize % 2);
            let dh = 1 + (cols % 3);
            let block = 1 + rows % 4;
            let blocks = 1 + (seed as usize / 2) % 2;
            (vec![t(&[blocks * block, 3 * heads * dh])], Box::new(move |tp, v| {
                let o = tp.causal_attention(v[0], heads, block)?;
                project(tp, o, seed)
            }))
        }
        _ => {
            let targets: Vec<usize> = (0..rows).map(|i| (i + seed as usize) % (cols + 1)).collect();
            let weights: Vec<f64> = (0..rows).map(|i| 0.25 + i as f64 * 0.5).collect();
            (vec![t(&[rows, cols + 1])], Box::new(move |tp, v| tp.cross_entropy(v[0], &targets, &weights)))
        }
    }
}

const PRIMITIVES: usize = 11;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn every_primitive_matches_finite_differences(rows in 1usize..5, cols in 1usize..5, seed in 0u64..10_000) {
        for kind in 0..PRIMITIVES {
            let (inputs, f) = primitive_case(kind, rows, cols, seed);
            let err = finite_diff_check_many(|t, v| f(t, v), &inputs, H).unwrap();
            prop_assert!(err < 1e-4, "primitive {kind}: {err}");
        }
    }

    #[test]
    fn backward_is_linear(rows in 1usize..4, cols in 1usize..4, seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, &[rows, cols]);
        let w0 = rand_tensor(&mut rng, &[cols, 3]);
        let grads = |ca: f64, cb: f64| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(x0.clone()).unwrap();
            let w = tape.param(w0.clone()).unwrap();
            let h = tape.matmul(x, w).unwrap();
            let h = tape.gelu(h).unwrap();
            let l1 = tape.cross_entropy_mean(h, &vec![1; rows]).unwrap();
            let s = tape.softmax(h).unwrap();
            let l2 = project(&mut tape, s, seed).unwrap();
            let l1 = tape.scale(l1, ca).unwrap();
            let l2 = tape.scale(l2, cb).unwrap();
            let l = tape.add(l1, l2).unwrap();
            tape.backward(l).unwrap();
            (tape.grad(x).unwrap().clone(), tape.grad(w).unwrap().clone())
        };
        let (gx, gw) = grads(a, b);
        let (gx1, gw1) = grads(1.0, 0.0);
        let (gx2, gw2) = grads(0.0, 1.0);
        for (g, (g1, g2)) in gx.data().iter().chain(gw.data()).zip(gx1.data().iter().chain(gw1.data()).zip(gx2.data().iter().chain(gw2.data()))) {
            prop_assert!((g - (a * g1 + b * g2)).abs() < 1e-10);
        }
    }
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = rand_tensor(&mut rng, &[6, 12]);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(base.clone()).unwrap();
    let y = tape.causal_attention(x, 2, 6).unwrap();
    let before = tape.value(y).clone();
    let mut changed = base;
    for c in 0..12 {
        changed.data_mut()[4 * 12 + c] += 0.5;
    }
    let x2 = tape.constant(changed).unwrap();
    let y2 = tape.causal_attention(x2, 2, 6).unwrap();
    let after = tape.value(y2);
    assert_eq!(&before.data()[..4 * 4], &after.data()[..4 * 4]);
    assert_ne!(&before.data()[4 * 4..], &after.data()[4 * 4..]);
    assert_eq!(tape.stats().attention_pairs, 2 * 2 * 21);
}

#[test]
fn f32_tape_runs() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let y = tape.matmul(x, x).unwrap();
    assert_eq!(tape.value(y).data(), &[7.0, 10.0, 15.0, 22.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().shape(), &[2, 2]);
}
