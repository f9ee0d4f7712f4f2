use reinlab::audit::count_model;
use reinlab::checkpoint::{decode_tensors, sidecar_path, swap_adapter, Checkpoint};
use reinlab::config::default_tap_layers;
use reinlab::data::{Benchmark, BenchmarkSpec};
use reinlab::train::{evaluate_with_threads, Trainer};
use reinlab::{evaluate, train_on, Component, Error, FineTuneMode, ModelConfig, ReinConfig, ReinVariant, SegModel, Tape};
use reinlab::{TrainConfig, ViTConfig};

fn small_model(mode: FineTuneMode, k: usize) -> ModelConfig {
    let mut cfg = ModelConfig::desk(mode, k);
    cfg.vit = ViTConfig {
        image_size: 32,
        patch_size: 8,
        depth: 2,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        tap_layers: default_tap_layers(2),
    };
    cfg.rein = ReinConfig::for_backbone(&cfg.vit, 8, 4, 8, ReinVariant::LORA);
    cfg.head.num_queries = 8;
    cfg.head.embed_dim = 8;
    cfg
}

fn small_data() -> Benchmark {
    Benchmark::generate(&BenchmarkSpec {
        num_classes: 4,
        size: 32,
        train: 8,
        val: 3,
        test: 3,
        seed: 1,
    })
    .unwrap()
}

fn small_train(mode: FineTuneMode, iterations: usize) -> TrainConfig {
    TrainConfig {
        model: small_model(mode, 4),
        iterations,
        batch_size: 2,
        eval_interval: 5,
        loss_window: 5,
        lr_backbone: 1e-3,
        lr_head_and_rein: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn runs_are_deterministic() {
    let data = small_data();
    for mode in [FineTuneMode::Full, FineTuneMode::Freeze, FineTuneMode::Rein] {
        let cfg = small_train(mode, 10);
        let (a, la) = train_on(&cfg, &data).unwrap();
        let (b, lb) = train_on(&cfg, &data).unwrap();
        assert_eq!(la.to_csv(), lb.to_csv());
        assert_eq!(a.encode(), b.encode());
        assert_eq!(la.records.len(), 2);
        assert!(la.records.iter().all(|r| r.train_loss.is_finite()));
    }
}

#[test]
fn rein_mode_leaves_backbone_bits_alone() {
    let data = small_data();
    for mode in [FineTuneMode::Rein, FineTuneMode::Freeze] {
        let cfg = small_train(mode, 12);
        let init = Checkpoint::from_model(&SegModel::new(cfg.model.clone(), cfg.seed).unwrap(), 0, 0).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        for _ in 0..12 {
            t.step(&data.train).unwrap();
        }
        let done = t.checkpoint().unwrap();
        for (a, b) in init.filter(&[Component::Backbone]).zip(done.filter(&[Component::Backbone])) {
            assert!(a.tensor.bits_eq(&b.tensor), "{}", a.name);
        }
        let changed = init
            .filter(&[Component::Head])
            .zip(done.filter(&[Component::Head]))
            .any(|(a, b)| !a.tensor.bits_eq(&b.tensor));
        assert!(changed, "{mode}: head never moved");
        let names = t.optimizer().state_names(t.model().params());
        assert!(names.iter().all(|n| !n.starts_with("backbone.")));
        if mode == FineTuneMode::Rein {
            assert!(names.iter().any(|n| n.starts_with("adapter.")));
        }
    }
}

#[test]
fn full_mode_moves_the_backbone() {
    let data = small_data();
    let mut t = Trainer::new(small_train(FineTuneMode::Full, 3)).unwrap();
    let before = t.checkpoint().unwrap();
    t.step(&data.train).unwrap();
    let after = t.checkpoint().unwrap();
    assert_ne!(before.get("backbone.layer01.attn.qkv.weight"), after.get("backbone.layer01.attn.qkv.weight"));
}

#[test]
fn rein_gradients_skip_the_backbone() {
    let mut cfg = small_model(FineTuneMode::Rein, 4);
    cfg.rein.variant = ReinVariant::LORA;
    let model = SegModel::<f32>::new(cfg, 0).unwrap();
    let data = small_data();
    let s = &data.train.samples[0];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = model.batch_loss(&mut tape, &bound, &[(&s.image, &s.label)]).unwrap();
    tape.backward(loss).unwrap();
    for (p, &v) in model.params().iter().zip(bound.vars()) {
        match p.component {
            Component::Backbone => assert!(tape.grad(v).is_none(), "{}", p.name),
            _ => {
                assert!(p.tensor.requires_grad());
                assert!(tape.grad(v).is_some(), "{}", p.name);
            }
        }
    }
}

#[test]
fn logged_parameter_count_matches_audit() {
    let data = small_data();
    for mode in [FineTuneMode::Full, FineTuneMode::Freeze, FineTuneMode::Rein] {
        let cfg = small_train(mode, 5);
        let (_, log) = train_on(&cfg, &data).unwrap();
        let audit = count_model(&cfg.model).unwrap().total as usize;
        assert!(log.records.iter().all(|r| r.params == audit), "{mode}");
    }
}

#[test]
fn untrained_rein_and_freeze_score_the_same() {
    let data = small_data();
    let rein = SegModel::new(small_model(FineTuneMode::Rein, 4), 5).unwrap();
    let freeze = SegModel::new(small_model(FineTuneMode::Freeze, 4), 5).unwrap();
    assert_eq!(evaluate(&rein, &data.test).unwrap(), evaluate(&freeze, &data.test).unwrap());
}

#[test]
fn evaluation_is_repeatable_and_thread_independent() {
    let data = small_data();
    let model = SegModel::new(small_model(FineTuneMode::Freeze, 4), 0).unwrap();
    let a = evaluate_with_threads(&model, &data.val, 1).unwrap();
    assert_eq!(a, evaluate_with_threads(&model, &data.val, 1).unwrap());
    assert_eq!(a, evaluate_with_threads(&model, &data.val, 3).unwrap());
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let data = small_data();
    let model = SegModel::new(small_model(FineTuneMode::Freeze, 5), 0).unwrap();
    assert!(matches!(evaluate(&model, &data.val), Err(Error::Config(_))));
    let mut t = Trainer::new(TrainConfig {
        model: small_model(FineTuneMode::Freeze, 5),
        ..small_train(FineTuneMode::Freeze, 1)
    })
    .unwrap();
    assert!(matches!(t.step(&data.train), Err(Error::Config(_))));
}

#[test]
fn divergence_aborts_and_keeps_the_log() {
    let data = small_data();
    let mut t = Trainer::new(small_train(FineTuneMode::Rein, 20)).unwrap();
    for _ in 0..5 {
        t.step(&data.train).unwrap();
    }
    t.record(&data.val, &data.test).unwrap();
    let params = t.model_mut().params_mut();
    let id = params.id_of("head.class.weight").unwrap();
    params.tensor_mut(id).data_mut()[0] = f32::NAN;
    assert!(matches!(t.step(&data.train), Err(Error::Numeric(_))));
    assert_eq!(t.log().records.len(), 1);
    assert_eq!(t.iteration(), 5);
}

#[test]
fn memorizes_a_single_scene() {
    let data = Benchmark::generate(&BenchmarkSpec {
        num_classes: 4,
        size: 32,
        train: 1,
        val: 1,
        test: 1,
        seed: 3,
    })
    .unwrap();
    let mut model = small_model(FineTuneMode::Full, 4);
    // Small shapes need a grid finer than 8x8 to be separable.
    model.vit.patch_size = 2;
    let cfg = TrainConfig {
        model,
        iterations: 300,
        batch_size: 1,
        eval_interval: 300,
        lr_backbone: 1e-3,
        lr_head_and_rein: 1e-2,
        weight_decay: 0.0,
        flip: false,
        ..TrainConfig::default()
    };
    let (ckpt, _) = train_on(&cfg, &data).unwrap();
    let rep = evaluate(&ckpt.to_model().unwrap(), &data.train).unwrap();
    assert!(rep.mean > 0.9, "{rep:?}");
}

#[test]
fn untrained_head_is_near_chance() {
    let data = Benchmark::generate(&BenchmarkSpec {
        train: 1,
        val: 1,
        test: 20,
        ..BenchmarkSpec::default()
    })
    .unwrap();
    for seed in 0..3 {
        let model = SegModel::new(ModelConfig::desk(FineTuneMode::Freeze, 6), seed).unwrap();
        let rep = evaluate(&model, &data.test).unwrap();
        assert!(rep.mean < 2.0 / 6.0, "seed {seed}: {}", rep.mean);
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data();
    let (ckpt, _) = train_on(&small_train(FineTuneMode::Rein, 5), &data).unwrap();
    let p = dir.path().join("a.ckpt");
    ckpt.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, ckpt);
    let q = dir.path().join("b.ckpt");
    back.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    assert_eq!(std::fs::read(sidecar_path(&p)).unwrap(), std::fs::read(sidecar_path(&q)).unwrap());

    let bytes = std::fs::read(&p).unwrap();
    for cut in [0, 7, 12, 100, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&q, &bytes[..cut]).unwrap();
        assert!(matches!(Checkpoint::load(&q), Err(Error::Parse { .. })), "cut {cut}");
        assert!(decode_tensors(&bytes[..cut], "x").is_err());
    }
    assert_eq!(
        evaluate(&back.to_model().unwrap(), &data.test).unwrap(),
        evaluate(&ckpt.to_model().unwrap(), &data.test).unwrap()
    );
}

#[test]
fn swapping_adapters() {
    let data = small_data();
    let a_cfg = small_train(FineTuneMode::Rein, 10);
    let b_cfg = TrainConfig {
        lr_head_and_rein: 3e-3,
        iterations: 15,
        ..a_cfg.clone()
    };
    let (a, _) = train_on(&a_cfg, &data).unwrap();
    let (b, _) = train_on(&b_cfg, &data).unwrap();
    assert_eq!(swap_adapter(&a, &a).unwrap().encode(), a.encode());

    // Same seed, so the same frozen backbone: swapping recovers each donor.
    for (base, donor) in [(&a, &b), (&b, &a)] {
        let swapped = swap_adapter(base, donor).unwrap();
        assert_eq!(swapped.encode(), donor.encode());
        for split in [&data.val, &data.test] {
            assert_eq!(
                evaluate(&swapped.to_model().unwrap(), split).unwrap(),
                evaluate(&donor.to_model().unwrap(), split).unwrap()
            );
        }
    }

    // A freeze-mode base has no adapter; the donor's is carried over.
    let (f, _) = train_on(&small_train(FineTuneMode::Freeze, 5), &data).unwrap();
    let swapped = swap_adapter(&f, &a).unwrap();
    assert_eq!(swapped.filter(&[Component::Adapter]).count(), a.filter(&[Component::Adapter]).count());

    let mut wide = small_train(FineTuneMode::Rein, 2);
    wide.model.rein.m = 9;
    wide.model.head.num_queries = 9;
    let (w, _) = train_on(&wide, &data).unwrap();
    match swap_adapter(&a, &w) {
        Err(Error::Tensor { name, .. }) => assert!(name.starts_with("adapter.") || name.starts_with("head.")),
        other => panic!("{other:?}"),
    }
    let mut other_bb = small_train(FineTuneMode::Rein, 2);
    other_bb.model.vit.mlp_ratio = 3;
    let (o, _) = train_on(&other_bb, &data).unwrap();
    assert!(matches!(swap_adapter(&a, &o), Err(Error::Tensor { .. })));
}
