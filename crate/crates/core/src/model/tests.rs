use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate, Batch, Example, SynthSpec};
use crate::nn::{AdaptorKind, ModelConfig};
use crate::numerics::{Tape, Tensor};
use crate::SateError;

fn tiny(adaptor: AdaptorKind) -> ModelConfig {
    ModelConfig {
        d_feat: 4,
        d_model: 8,
        n_heads: 2,
        d_ffn: 8,
        n_layers_acoustic: 2,
        n_layers_textual: 1,
        n_layers_decoder: 1,
        vocab_size: 5,
        ctc_layer_index: 2,
        adaptor,
        ..ModelConfig::default()
    }
}

fn tiny_data(n: usize, seed: u64) -> Vec<Example> {
    let spec = SynthSpec {
        vocab_size: 4,
        min_len: 2,
        max_len: 3,
        min_frames_per_token: 2,
        max_frames_per_token: 2,
        d_feat: 4,
        n_train: n,
        n_dev: 0,
        n_test: 0,
        seed,
        ..SynthSpec::default()
    };
    generate(&spec).unwrap().train
}

fn batch(n: usize) -> Batch {
    Batch::new(tiny_data(n, 3)).unwrap()
}

#[test]
fn interpolation_arithmetic() {
    assert!((interpolate(0.3, 2.0, 1.0) - 1.3).abs() < 1e-12);
    assert_eq!(interpolate(1.0, 2.5, 7.0), 2.5);
    assert_eq!(interpolate(0.0, 2.5, 7.0), 7.0);
}

#[test]
fn alpha_endpoints_are_exact() {
    let b = batch(3);
    for alpha in [0.0, 1.0] {
        let cfg = ModelConfig { alpha, ..tiny(AdaptorKind::Fusion) };
        let m = SateModel::new(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let l = loss_sate(&m, &mut tape, &b).unwrap();
        let want = if alpha == 1.0 { l.ctc.unwrap() } else { l.trans.unwrap() };
        assert_eq!(l.value(&tape), want);
    }
}

#[test]
fn beta_gamma_one_reduces_distillation_to_plain_loss() {
    let b = batch(3);
    let cfg = ModelConfig {
        beta: 1.0,
        gamma: 1.0,
        ..tiny(AdaptorKind::Fusion)
    };
    let teachers = TeacherBundle::new(AsrModel::new(&cfg, 7).unwrap(), MtModel::new(&cfg, 8).unwrap()).unwrap();
    for m in [AnyModel::Sate(SateModel::new(&cfg, 1).unwrap()), AnyModel::E2e(E2eModel::new(&cfg, 1).unwrap())] {
        let mut t1 = Tape::training(5);
        let plain = m.loss(&mut t1, &b, None).unwrap().value(&t1);
        let mut t2 = Tape::training(5);
        let kd = m.loss(&mut t2, &b, Some(&teachers)).unwrap();
        assert!((kd.value(&t2) - plain).abs() <= 1e-7, "{} vs {plain}", kd.value(&t2));
        assert!(kd.kd_ctc.unwrap() > 0.0 && kd.kd_trans.unwrap() > 0.0);
    }
}

#[test]
fn one_hot_teacher_matches_unsmoothed_translation_loss() {
    let cfg = ModelConfig {
        label_smoothing: 0.0,
        ..tiny(AdaptorKind::Fusion)
    };
    let m = SateModel::new(&cfg, 2).unwrap();
    let ex = &tiny_data(1, 4)[0];
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, &ex.features, None).unwrap();
    let (logits, gold) = m.head().forced(&mut tape, &m.store, &cfg, f.memory, f.len, &ex.target).unwrap();
    let ce = tape.smoothed_ce(logits, &gold, 0.0).unwrap();
    let onehot = Tensor::from_fn(&[gold.len(), cfg.vocab_size], |i| {
        f32::from(u8::from(i % cfg.vocab_size == gold[i / cfg.vocab_size]))
    });
    let lp = tape.log_softmax(logits, 1).unwrap();
    let kd = tape.soft_target_ce(lp, &onehot).unwrap();
    assert!((tape.scalar_f64(kd) - tape.scalar_f64(ce)).abs() <= 1e-6);
}

#[test]
fn matching_student_gives_teacher_entropy() {
    let z = Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let q = tape.softmax(zv, 1).unwrap();
    let q = tape.value(q).clone();
    let lp = tape.log_softmax(zv, 1).unwrap();
    let kd = tape.soft_target_ce(lp, &q).unwrap();
    // direct entropy from the logits in f64
    let zs: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
    let lse = zs.iter().map(|v| v.exp()).sum::<f64>().ln();
    let h: f64 = -zs.iter().map(|v| (v - lse).exp() * (v - lse)).sum::<f64>();
    assert!((tape.scalar_f64(kd) - h).abs() < 1e-6);
}

fn table(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, d], |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn soft_embedding_of_point_mass_is_a_row() {
    let w = table(4, 6, 0);
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    for k in 1..=4 {
        let p = Tensor::from_fn(&[1, 5], |j| f32::from(u8::from(j == k)));
        let pv = tape.constant(p);
        let s = soft_embedding(&mut tape, pv, wv).unwrap();
        assert_eq!(tape.value(s).data(), w.row(k - 1));
    }
}

#[test]
fn soft_embedding_of_uniform_is_the_mean_row() {
    let w = table(4, 6, 1);
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    // blank mass is dropped before averaging
    let p = Tensor::new(vec![1, 5], vec![0.2, 0.2, 0.2, 0.2, 0.2]).unwrap();
    let pv = tape.constant(p);
    let s = soft_embedding(&mut tape, pv, wv).unwrap();
    for j in 0..6 {
        let mean = (0..4).map(|r| w.at2(r, j) as f64).sum::<f64>() / 4.0;
        assert!((tape.value(s).data()[j] as f64 - mean).abs() < 1e-6);
    }
    // certain blank falls back to uniform
    let p = tape.constant(Tensor::new(vec![1, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let s2 = soft_embedding(&mut tape, p, wv).unwrap();
    let (a, b) = (tape.value(s).data().to_vec(), tape.value(s2).data().to_vec());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn fusion_endpoints() {
    let mut tape = Tape::new();
    let v = tape.constant(table(3, 4, 2));
    let u = tape.constant(table(3, 4, 3));
    let half = fuse(&mut tape, v, v, 0.5).unwrap();
    assert_eq!(tape.value(half).data(), tape.value(v).data());
    let one = fuse(&mut tape, v, u, 1.0).unwrap();
    assert_eq!(tape.value(one).data(), tape.value(v).data());
}

#[test]
fn mapping_adaptor_ignores_posteriors() {
    let cfg = ModelConfig {
        lambda: 1.0,
        ..tiny(AdaptorKind::Fusion)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = crate::nn::ParamStore::new();
    let a = Adaptor::new(&mut store, &mut rng, "adaptor", &cfg);
    let w = table(4, 8, 5);
    let h = table(6, 8, 6);
    let outs: Vec<Vec<f32>> = (0..2)
        .map(|s| {
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let wv = tape.constant(w.clone());
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let mut p = Tensor::from_fn(&[6, 5], |_| r.gen_range(0.0..1.0));
            for row in p.data_mut().chunks_mut(5) {
                let t: f32 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= t);
            }
            let pv = tape.constant(p);
            let out = a.forward(&mut tape, &store, hv, pv, wv).unwrap();
            tape.value(out).data().to_vec()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn adaptor_keeps_sequence_length() {
    for kind in [AdaptorKind::None, AdaptorKind::Soft, AdaptorKind::Mapping, AdaptorKind::Fusion] {
        let m = SateModel::new(&tiny(kind), 3).unwrap();
        for ex in tiny_data(5, 9) {
            let mut tape = Tape::new();
            let a = m.activations(&mut tape, &ex.features, None).unwrap();
            assert_eq!(tape.value(a.adapted).rows(), a.acoustic.len);
            assert_eq!(tape.value(a.acoustic.states).rows(), a.acoustic.len);
        }
    }
}

#[test]
fn embedding_gets_gradient_through_soft_path() {
    let mut m = SateModel::new(&tiny(AdaptorKind::Soft), 4).unwrap();
    let ex = &tiny_data(1, 5)[0];
    let mut tape = Tape::training(0);
    let a = m.activations(&mut tape, &ex.features, None).unwrap();
    let s = tape.sum(a.textual).unwrap();
    tape.backward(s).unwrap();
    m.store.absorb_grads(&tape);
    let g = m.store.by_name("embed.weight").unwrap().grad().unwrap();
    assert!(g.iter().any(|&v| v != 0.0));
    // decoder-only parameters are untouched by this loss
    assert!(m.store.by_name("embed.bos").unwrap().grad().is_none());
}

#[test]
fn teachers_never_change() {
    let cfg = tiny(AdaptorKind::Fusion);
    let teachers = TeacherBundle::new(AsrModel::new(&cfg, 1).unwrap(), MtModel::new(&cfg, 2).unwrap()).unwrap();
    let before = (
        Checkpoint::from_store(&teachers.asr().store).to_bytes(),
        Checkpoint::from_store(&teachers.mt().store).to_bytes(),
    );
    let mut student = SateModel::new(&cfg, 3).unwrap();
    let b = batch(2);
    for step in 0..3 {
        let mut tape = Tape::training(step);
        let l = loss_mtkd(&student, &mut tape, &b, &teachers).unwrap();
        tape.backward(l.total).unwrap();
        student.store.absorb_grads(&tape);
        for (_, t) in student.store.iter_mut() {
            let g: Vec<f32> = t.grad().map(|g| g.to_vec()).unwrap_or_default();
            for (x, d) in t.data_mut().iter_mut().zip(g) {
                *x -= 0.01 * d;
            }
            t.zero_grad();
        }
    }
    assert_eq!(Checkpoint::from_store(&teachers.asr().store).to_bytes(), before.0);
    assert_eq!(Checkpoint::from_store(&teachers.mt().store).to_bytes(), before.1);
}

#[test]
fn teacher_student_frame_mismatch_is_a_contract_error() {
    let cfg = tiny(AdaptorKind::Fusion);
    let other = ModelConfig {
        d_feat: 4,
        ..cfg.clone()
    };
    let teachers = TeacherBundle::new(AsrModel::new(&other, 1).unwrap(), MtModel::new(&other, 2).unwrap()).unwrap();
    let student = SateModel::new(&cfg, 3).unwrap();
    let mut ex = tiny_data(1, 1).remove(0);
    // append frames the student sees but a truncated teacher input would not
    let b = Batch::new(vec![ex.clone()]).unwrap();
    let mut tape = Tape::new();
    assert!(loss_mtkd(&student, &mut tape, &b, &teachers).is_ok());
    ex.features = ex.features.slice_rows(0, 4).unwrap();
    let q = teachers.asr().ctc_distribution(&ex.features).unwrap();
    assert_eq!(q.rows(), 1);
}

#[test]
fn pretrained_textual_encoder_is_bit_exact() {
    let cfg = tiny(AdaptorKind::Fusion);
    let asr = AsrModel::new(&cfg, 10).unwrap();
    let mt = MtModel::new(&cfg, 11).unwrap();
    let mut sate = SateModel::new(&cfg, 12).unwrap();
    let (ca, cm) = (Checkpoint::from_store(&asr.store), Checkpoint::from_store(&mt.store));
    let adaptor_before = sate.store.by_name("adaptor.map.w").unwrap().clone();
    sate.init_from_pretrained(Some(&ca), Some(&cm), PretrainFlags::ALL).unwrap();
    assert_eq!(sate.store.by_name("adaptor.map.w").unwrap(), &adaptor_before);
    let src = [1, 3, 2, 4];
    let mut t1 = Tape::new();
    let a = mt.encode(&mut t1, &src, None).unwrap();
    let mut t2 = Tape::new();
    let b = sate.encode_tokens(&mut t2, &src).unwrap();
    assert_eq!(t1.value(a).data(), t2.value(b).data());
    // acoustic side reproduces the ASR model
    let ex = &tiny_data(1, 2)[0];
    let mut t3 = Tape::new();
    let x = asr.forward(&mut t3, &ex.features, None).unwrap();
    let mut t4 = Tape::new();
    let y = sate.activations(&mut t4, &ex.features, None).unwrap();
    assert_eq!(t3.value(x.ctc_log_probs).data(), t4.value(y.acoustic.ctc_log_probs).data());
}

#[test]
fn selective_pretraining_flags() {
    let cfg = tiny(AdaptorKind::Fusion);
    let mt = MtModel::new(&cfg, 11).unwrap();
    let cm = Checkpoint::from_store(&mt.store);
    let fresh = SateModel::new(&cfg, 12).unwrap();
    let mut sate = fresh.clone();
    let flags = PretrainFlags {
        asr_encoder: false,
        mt_encoder: false,
        mt_decoder: true,
    };
    sate.init_from_pretrained(None, Some(&cm), flags).unwrap();
    let same = |n: &str, a: &crate::nn::ParamStore, b: &crate::nn::ParamStore| a.by_name(n) == b.by_name(n);
    assert!(same("decoder.final_ln.g", &sate.store, &mt.store) || mt.store.by_name("decoder.final_ln.g").is_none());
    assert!(same("decoder.layers.0.ffn.up.w", &sate.store, &mt.store));
    assert!(same("textual.layers.0.ffn.up.w", &sate.store, &fresh.store));
    assert!(same("acoustic.layers.0.ffn.up.w", &sate.store, &fresh.store));
    assert!(matches!(
        sate.init_from_pretrained(None, Some(&cm), PretrainFlags::ALL),
        Err(SateError::Config(_))
    ));
}

#[test]
fn vanilla_init_maps_asr_layers_to_the_bottom() {
    let cfg = tiny(AdaptorKind::Fusion);
    let asr = AsrModel::new(&cfg, 1).unwrap();
    let mt = MtModel::new(&cfg, 2).unwrap();
    let mut e2e = E2eModel::new(&cfg, 3).unwrap();
    let top_before = e2e.store.by_name("encoder.layers.2.ffn.up.w").unwrap().clone();
    e2e.init_from_pretrained(
        Some(&Checkpoint::from_store(&asr.store)),
        Some(&Checkpoint::from_store(&mt.store)),
        PretrainFlags::ALL,
    )
    .unwrap();
    assert_eq!(
        e2e.store.by_name("encoder.layers.1.attn.q.w"),
        asr.store.by_name("acoustic.layers.1.attn.q.w")
    );
    assert_eq!(e2e.store.by_name("encoder.layers.2.ffn.up.w").unwrap(), &top_before);
    assert_eq!(e2e.store.by_name("embed.weight"), mt.store.by_name("embed.weight"));
}

#[test]
fn shape_mismatch_names_the_parameter() {
    let cfg = tiny(AdaptorKind::Fusion);
    let wide = ModelConfig {
        d_ffn: 16,
        ..cfg.clone()
    };
    let mt = MtModel::new(&wide, 1).unwrap();
    let mut sate = SateModel::new(&cfg, 2).unwrap();
    let err = sate
        .init_from_pretrained(None, Some(&Checkpoint::from_store(&mt.store)), PretrainFlags::ALL.with_asr(false))
        .unwrap_err();
    match err {
        SateError::Checkpoint { name, .. } => assert!(name.contains("ffn"), "{name}"),
        other => panic!("{other}"),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let m = SateModel::new(&tiny(AdaptorKind::Fusion), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    let ck = Checkpoint::from_store(&m.store);
    ck.save(&p).unwrap();
    let loaded = Checkpoint::load(&p).unwrap();
    assert_eq!(loaded, ck);
    let q = dir.path().join("b.ckpt");
    loaded.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    assert!(std::fs::read(&p).unwrap().starts_with(b"SATECKPT1"));

    let mut other = SateModel::new(&tiny(AdaptorKind::Fusion), 6).unwrap();
    loaded.load_into(&mut other.store).unwrap();
    assert_eq!(Checkpoint::from_store(&other.store), ck);
}

#[test]
fn malformed_checkpoints_are_rejected() {
    assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    let mut ck = Checkpoint::new();
    ck.push("x", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    let m = SateModel::new(&tiny(AdaptorKind::Fusion), 5).unwrap();
    let mut store = m.store.clone();
    assert!(matches!(ck.load_into(&mut store), Err(SateError::Checkpoint { .. })));
}

#[test]
fn beam_one_equals_greedy_and_wider_beams_score_higher() {
    let cfg = tiny(AdaptorKind::Fusion);
    let m = SateModel::new(&cfg, 6).unwrap();
    let (mut s1, mut s4) = (0.0, 0.0);
    for ex in tiny_data(20, 8) {
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &ex.features, None).unwrap();
        let memory = tape.value(f.memory).clone();
        let g = m.head().greedy(&m.store, &cfg, &memory, 8).unwrap();
        let b1 = m.translate(&ex.features, 1, 8).unwrap();
        assert_eq!(g, b1);
        s1 += b1.score();
        s4 += m.translate(&ex.features, 4, 8).unwrap().score();
    }
    assert!(s4 >= s1);
}

#[test]
fn cascade_and_kinds() {
    let cfg = tiny(AdaptorKind::Fusion);
    let c = Cascade::new(AsrModel::new(&cfg, 1).unwrap(), MtModel::new(&cfg, 2).unwrap()).unwrap();
    for ex in tiny_data(3, 1) {
        let h = c.translate(&ex.features, 2, 6).unwrap();
        assert!(h.tokens.len() <= 6);
    }
    for k in ["asr", "mt", "e2e_st", "sate"] {
        let kind = ModelKind::parse(k).unwrap();
        assert_eq!(kind.name(), k);
        let m = AnyModel::new(kind, &cfg, 0).unwrap();
        assert_eq!(m.kind(), kind);
        let ex = &tiny_data(1, 0)[0];
        let trace = m.encoder_trace(ex).unwrap();
        let depth = match kind {
            ModelKind::Asr => 2,
            ModelKind::Mt => 1,
            _ => 3,
        };
        assert_eq!(trace.layers.len(), depth);
        let back = AnyModel::from_checkpoint(kind, &cfg, &m.checkpoint()).unwrap();
        assert_eq!(back.checkpoint(), m.checkpoint());
    }
    assert!(ModelKind::parse("rnn").is_err());
}

#[test]
fn full_losses_match_finite_differences() {
    let cfg = tiny(AdaptorKind::Fusion);
    let b = Batch::new(tiny_data(1, 21)).unwrap();
    let teachers = TeacherBundle::new(AsrModel::new(&cfg, 1).unwrap(), MtModel::new(&cfg, 2).unwrap()).unwrap();
    let sate = AnyModel::Sate(SateModel::new(&cfg, 3).unwrap());
    let r = sate.grad_check_loss(&b, None, 1e-3, 1e-3).unwrap();
    assert!(r.passed(), "sate {r:?}");
    let r = sate.grad_check_loss(&b, Some(&teachers), 1e-3, 1e-3).unwrap();
    assert!(r.passed(), "mtkd {r:?}");
}

