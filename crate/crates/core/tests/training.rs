use sate::corpus::{generate, Dataset};
use sate::harness::{average_checkpoints, run_recipe, train, Pretrained, Settings, SystemKind};
use sate::model::{AnyModel, Checkpoint, ModelKind};
use sate::SateError;

fn tiny(kind: &str) -> (Settings, Dataset) {
    let mut s = Settings::default();
    for kv in [
        "data.vocab_size=6", "data.min_len=2", "data.max_len=4", "data.n_train=30", "data.n_dev=6", "data.n_test=6",
        "model.vocab_size=7", "model.d_model=8", "model.n_heads=2", "model.d_ffn=16", "model.n_layers_acoustic=2",
        "model.n_layers_textual=1", "model.n_layers_decoder=1", "model.ctc_layer_index=2", "train.max_steps=8",
        "train.eval_interval=2", "train.keep_best=2", "train.batch_frames=150", "train.warmup=3",
    ] {
        let (k, v) = kv.split_once('=').unwrap();
        s.set(k, v).unwrap();
    }
    s.set("recipe.kind", kind).unwrap();
    let data = generate(&s.data).unwrap();
    (s, data)
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    for kind in ["sate", "asr", "mt"] {
        let (mut s, data) = tiny(kind);
        s.set("train.spec_augment", "true").unwrap();
        let a = run_recipe(&s, &data, &Pretrained::default()).unwrap();
        let b = run_recipe(&s, &data, &Pretrained::default()).unwrap();
        assert_eq!(a.outcome.last.to_bytes(), b.outcome.last.to_bytes(), "{kind}");
        assert_eq!(a.model.checkpoint().to_bytes(), b.model.checkpoint().to_bytes(), "{kind}");
        s.train.seed += 1;
        let c = run_recipe(&s, &data, &Pretrained::default()).unwrap();
        assert_ne!(a.outcome.last.to_bytes(), c.outcome.last.to_bytes(), "{kind}");
    }
}

#[test]
fn keeps_the_best_k_on_disk_and_in_memory() {
    let (mut s, data) = tiny("mt");
    let dir = tempfile::tempdir().unwrap();
    s.train.ckpt_dir = Some(dir.path().to_path_buf());
    let out = run_recipe(&s, &data, &Pretrained::default()).unwrap().outcome;
    assert_eq!(out.steps, 8);
    assert_eq!(out.best.len(), 2);
    assert!(out.best[0].score >= out.best[1].score);
    let dev_rows = out.log.rows.iter().filter(|r| r.split == "dev").count();
    assert_eq!(dev_rows, 4);
    let mut on_disk: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("step"))
        .collect();
    on_disk.sort();
    let mut expected: Vec<_> = out.best.iter().map(|r| format!("step{:07}.ckpt", r.step)).collect();
    expected.sort();
    assert_eq!(on_disk, expected);
    for r in &out.best {
        assert_eq!(&Checkpoint::load(r.path.as_ref().unwrap()).unwrap(), &r.checkpoint);
    }
    assert_eq!(Checkpoint::load(&dir.path().join("last.ckpt")).unwrap(), out.last);
}

#[test]
fn averaging_is_idempotent_on_real_checkpoints() {
    let (s, data) = tiny("sate");
    let out = run_recipe(&s, &data, &Pretrained::default()).unwrap().outcome;
    let c = &out.last;
    let avg = average_checkpoints(&[c, c, c]).unwrap();
    assert_eq!(avg.to_bytes(), c.to_bytes());
}

#[test]
fn divergence_keeps_the_last_good_parameters() {
    let (mut s, data) = tiny("mt");
    let dir = tempfile::tempdir().unwrap();
    s.train.ckpt_dir = Some(dir.path().to_path_buf());
    s.train.peak_lr = 1e30;
    let mut model = AnyModel::new(ModelKind::Mt, &s.resolved_model(), 1).unwrap();
    match train(&mut model, &data, &s.train, None) {
        Err(SateError::Diverged { step, last_good }) => {
            assert!(step >= 2);
            let kept = Checkpoint::load(&last_good.unwrap()).unwrap();
            assert!(kept.iter().all(|(_, t)| t.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn cascade_is_rejected_as_a_training_recipe() {
    let (mut s, data) = tiny("mt");
    s.recipe.kind = SystemKind::Cascade;
    assert!(run_recipe(&s, &data, &Pretrained::default()).is_err());
}
