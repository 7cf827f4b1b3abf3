use phonebench::dataio::{augment_calls, synth_corpus, AugmentConfig, FrameCorpus, SynthSpec};
use phonebench::harness::{adamw_step, evaluate, train, AdamState, AdamW, TrainConfig};
use phonebench::models::{load_checkpoint, Arch, ArchConfig, Model};
use phonebench::store::ParamBuilder;
use phonebench::Tensor;

fn local_corpus(n_utts: usize, seed: u64) -> FrameCorpus {
    synth_corpus(&SynthSpec {
        n_utts,
        t_min: 40,
        t_max: 64,
        long_range_fraction: 0.0,
        cue_distance: 8,
        noise: 0.0,
        seed,
    })
    .unwrap()
}

fn small(arch: Arch) -> ArchConfig {
    ArchConfig::new(arch, 2, 32).channels(4).kernel(5).heads(2)
}

fn quick(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 8,
        seed: 5,
        max_lr: 0.01,
        augment: AugmentConfig::none(),
        ..TrainConfig::desk()
    }
}

#[test]
fn adamw_first_step_matches_closed_form() {
    let mut b = ParamBuilder::new(0);
    let id = b.constant("w", &[3], 0.5);
    let mut store = b.finish();
    let opt = AdamW {
        weight_decay: 0.1,
        ..AdamW::default()
    };
    let mut state = AdamState::new(&store);
    let g = Tensor::new([3], vec![2.0, -0.25, 0.0]).unwrap();
    let lr = 0.01;
    adamw_step(&mut store, &[(id, g.clone())], &mut state, lr, &opt).unwrap();
    // At t = 1 the bias-corrected moments are m̂ = g and v̂ = g².
    for (j, &gj) in g.data().iter().enumerate() {
        let decayed = 0.5 - lr * 0.1 * 0.5;
        let expected = decayed - lr * gj / (gj.abs() + opt.eps);
        assert!((store.get(id).data()[j] - expected).abs() < 1e-15);
    }
}

#[test]
fn adamw_trivial_cases() {
    let mut b = ParamBuilder::new(0);
    let id = b.uniform("w", &[4], 4);
    let mut store = b.finish();
    let before = store.get(id).clone();
    let zero = Tensor::zeros([4]);
    let mut state = AdamState::new(&store);
    let no_decay = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    adamw_step(&mut store, &[(id, zero.clone())], &mut state, 0.1, &no_decay).unwrap();
    assert_eq!(store.get(id), &before);
    let decay = AdamW {
        weight_decay: 0.5,
        ..AdamW::default()
    };
    adamw_step(&mut store, &[(id, zero)], &mut state, 0.1, &decay).unwrap();
    for (a, b) in store.get(id).data().iter().zip(before.data()) {
        assert!((a - b * (1.0 - 0.05)).abs() < 1e-15);
    }
    let bad = Tensor::new([4], vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
    let err = adamw_step(&mut store, &[(id, bad)], &mut state, 0.1, &decay).unwrap_err();
    assert!(err.to_string().contains('w'));
}

#[test]
fn zero_learning_rate_leaves_weights() {
    let corpus = local_corpus(6, 1);
    let cfg = small(Arch::Transformer);
    let mut model = Model::build(&cfg, 2).unwrap();
    let before = model.store().clone();
    let tc = TrainConfig {
        max_lr: 0.0,
        ..quick(3)
    };
    train(&mut model, &corpus, &tc).unwrap();
    for id in before.trainable_ids() {
        assert_eq!(before.get(id), model.store().get(id), "{}", before.name(id));
    }
}

#[test]
fn training_is_deterministic_and_checkpointed() {
    let corpus = local_corpus(10, 2);
    let cfg = small(Arch::ContextNet);
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut model = Model::build(&cfg, 3).unwrap();
        let tc = TrainConfig {
            augment: AugmentConfig::default(),
            checkpoint: Some(dir.path().join(name)),
            ..quick(6)
        };
        let report = train(&mut model, &corpus, &tc).unwrap();
        (model, report)
    };
    let (m1, r1) = run("a.ckpt");
    let (m2, r2) = run("b.ckpt");
    assert_eq!(r1.losses, r2.losses);
    assert_eq!(r1.to_csv(), r2.to_csv());
    assert_eq!(
        std::fs::read(dir.path().join("a.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b.ckpt")).unwrap()
    );
    let restored = load_checkpoint(&dir.path().join("a.ckpt")).unwrap();
    assert_eq!(restored.store(), m1.store());
    assert_eq!(m1.store(), m2.store());
}

#[test]
fn evaluation_never_augments() {
    let corpus = local_corpus(6, 3);
    let model = Model::build(&small(Arch::Conformer), 1).unwrap();
    let before = augment_calls();
    let a = evaluate(&model, &corpus, None).unwrap();
    let b = evaluate(&model, &corpus, None).unwrap();
    assert_eq!(augment_calls(), before);
    assert_eq!(a, b);
}

#[test]
fn smoke_training_fits_local_corpus() {
    let corpus = local_corpus(50, 4);
    for arch in Arch::ALL {
        let mut model = Model::build(&small(arch), 7).unwrap();
        let start = std::time::Instant::now();
        let report = train(&mut model, &corpus, &quick(200)).unwrap();
        let tail = &report.losses[report.losses.len() - 10..];
        let loss = tail.iter().sum::<f64>() / tail.len() as f64;
        let acc = evaluate(&model, &corpus, None).unwrap().accuracy;
        eprintln!("{arch}: loss {loss:.4} acc {acc:.4} in {:.1}s", start.elapsed().as_secs_f64());
        assert!(loss < 37f64.ln() / 10.0, "{arch}: final training loss {loss}");
    }
}
