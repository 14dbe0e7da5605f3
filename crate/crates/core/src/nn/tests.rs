use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{AttnMask, Tape, Tensor};
use crate::SateError;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn frontend_downsamples_by_four() {
    assert_eq!(ConvFrontend::output_len(16), 4);
    assert_eq!(ConvFrontend::output_len(17), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let fe = ConvFrontend::new(&mut store, &mut rng, "fe", 3, 8);
    for (t0, expect) in [(16, 4), (17, 5), (4, 1)] {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[t0, 3], &mut rng));
        let y = fe.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[expect, 8]);
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(
        fe.forward(&mut tape, &store, x),
        Err(SateError::InputTooShort { len: 3, min: 4 })
    ));
}

#[test]
fn frontend_constant_input_gives_constant_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let fe = ConvFrontend::new(&mut store, &mut rng, "fe", 4, 8);
    // non-zero biases so the constant is not trivially zero
    for (name, t) in store.iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[21, 4]));
    let y = fe.forward(&mut tape, &store, x).unwrap();
    let out = tape.value(y);
    assert!(out.data().iter().any(|&v| v != 0.0));
    for r in 1..out.rows() {
        assert_eq!(out.row(r), out.row(0));
    }
}

fn mha(seed: u64, d: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = MultiHeadAttention::new(&mut store, &mut rng, "mha", d, heads);
    (store, m)
}

#[test]
fn attention_single_position() {
    let (store, m) = mha(2, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(randn(&[1, 8], &mut rng));
    let mut trace = AttentionTrace::new(1);
    let y = m
        .forward(&mut tape, &store, x, x, AttnMask { key_len: 1, causal: false }, Some(&mut trace))
        .unwrap();
    assert_eq!(trace.layers[0].weights, vec![1.0, 1.0]);
    // output = out(v(x)) exactly when all weight sits on one key
    let v = m_value_projection(&mut tape, &store, x);
    let wo = store.by_name("mha.out.w").unwrap().clone();
    let bo = store.by_name("mha.out.b").unwrap().clone();
    let wo = tape.constant(wo);
    let bo = tape.constant(bo);
    let expect = tape.linear(v, wo, Some(bo)).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(expect).data());
}

fn m_value_projection(tape: &mut Tape, store: &ParamStore, x: crate::numerics::Var) -> crate::numerics::Var {
    let w = tape.constant(store.by_name("mha.v.w").unwrap().clone());
    let b = tape.constant(store.by_name("mha.v.b").unwrap().clone());
    tape.linear(x, w, Some(b)).unwrap()
}

#[test]
fn attention_masking_forces_one_hot() {
    let (store, m) = mha(4, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let q = tape.constant(randn(&[3, 8], &mut rng));
    let kv = tape.constant(randn(&[6, 8], &mut rng));
    let mut trace = AttentionTrace::new(1);
    m.forward(&mut tape, &store, q, kv, AttnMask { key_len: 1, causal: false }, Some(&mut trace))
        .unwrap();
    let layer = &trace.layers[0];
    for h in 0..4 {
        for i in 0..3 {
            assert_eq!(layer.row(h, i), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }
}

#[test]
fn attention_trace_rows_are_distributions() {
    for seed in 0..20 {
        let (store, m) = mha(seed, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[7, 8], &mut rng));
        let mut trace = AttentionTrace::new(5);
        m.forward(&mut tape, &store, x, x, AttnMask { key_len: 5, causal: false }, Some(&mut trace))
            .unwrap();
        let layer = &trace.layers[0];
        for h in 0..2 {
            for i in 0..7 {
                let row = layer.row(h, i);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert_eq!(&row[5..], &[0.0, 0.0]);
                let s: f64 = row.iter().map(|&p| p as f64).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn attention_rejects_bad_mask() {
    let (store, m) = mha(6, 8, 2);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 8]));
    assert!(m
        .forward(&mut tape, &store, x, x, AttnMask { key_len: 4, causal: false }, None)
        .is_err());
}

#[test]
fn decoder_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let dec = DecoderStack::new(&mut store, &mut rng, "dec", 2, 8, 2, 16, 0.0);
    let y0 = randn(&[6, 8], &mut rng);
    let mem = randn(&[4, 8], &mut rng);
    let run = |y: &Tensor| {
        let mut tape = Tape::new();
        let y = tape.constant(y.clone());
        let m = tape.constant(mem.clone());
        let out = dec.forward(&mut tape, &store, y, m, 4).unwrap();
        tape.value(out).clone()
    };
    let base = run(&y0);
    for j in 0..6 {
        let mut y1 = y0.clone();
        for c in 0..8 {
            y1.data_mut()[j * 8 + c] += 0.5;
        }
        let pert = run(&y1);
        for i in 0..j {
            assert_eq!(base.row(i), pert.row(i), "position {i} changed when perturbing {j}");
        }
        assert_ne!(base.row(j), pert.row(j));
    }
}

#[test]
fn encoder_padding_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let enc = EncoderStack::new(&mut store, &mut rng, "enc", 3, 8, 2, 16, 0.0);
    let x = randn(&[5, 8], &mut rng);
    let mut padded = x.data().to_vec();
    padded.extend(std::iter::repeat(0.0).take(3 * 8));
    let padded = Tensor::new(vec![8, 8], padded).unwrap();

    let mut tape = Tape::new();
    let a = tape.constant(x);
    let a = enc.forward(&mut tape, &store, a, 5, None, None).unwrap().output;
    let b = tape.constant(padded);
    let b = enc.forward(&mut tape, &store, b, 5, None, None).unwrap().output;
    for i in 0..5 {
        for (u, v) in tape.value(a).row(i).iter().zip(tape.value(b).row(i)) {
            assert!((u - v).abs() <= 1e-5);
        }
    }
}

#[test]
fn encoder_tap_and_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let enc = EncoderStack::new(&mut store, &mut rng, "enc", 4, 8, 2, 16, 0.1);
    let mut tape = Tape::new();
    let x = tape.constant(randn(&[6, 8], &mut rng));
    let mut trace = AttentionTrace::new(6);
    let out = enc.forward(&mut tape, &store, x, 6, Some(2), Some(&mut trace)).unwrap();
    assert!(out.tapped.is_some());
    assert_eq!(trace.layers.len(), 4);
    assert_eq!(enc.depth(), 4);
}

#[test]
fn positional_table_is_deterministic() {
    let a = positional_encoding(10, 8);
    assert_eq!(a, positional_encoding(10, 8));
    assert_eq!(a.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn params_bind_once_and_absorb_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut rng, "lin", 3, 2);
    let mut tape = Tape::training(0);
    let x = tape.constant(randn(&[4, 3], &mut rng));
    let a = lin.forward(&mut tape, &store, x).unwrap();
    let n = tape.len();
    let b = lin.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.len(), n + 1, "second pass reuses bound parameters");
    let s = tape.add(a, b).unwrap();
    let s = tape.sum(s).unwrap();
    tape.backward(s).unwrap();
    store.absorb_grads(&tape);
    let g = store.by_name("lin.b").unwrap().grad().unwrap();
    assert_eq!(g, &[8.0, 8.0]);

    let mut frozen = store.clone();
    frozen.freeze();
    frozen.zero_grads();
    let mut tape = Tape::new();
    let x = tape.constant(randn(&[4, 3], &mut rng));
    let y = lin.forward(&mut tape, &frozen, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    frozen.absorb_grads(&tape);
    assert!(frozen.iter().all(|(_, t)| t.grad().is_none()));
}
