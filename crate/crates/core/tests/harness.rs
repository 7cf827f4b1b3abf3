use phonebench::dataio::{subsample_labels, synth_corpus, FrameCorpus, SynthSpec, Utterance};
use phonebench::harness::{
    evaluate, fit_scaling_exponent, median, range_transfer_matrix, time_inference, timings_csv, EvalReport,
    TransferMatrix,
};
use phonebench::models::{predict, Arch, ArchConfig, Model};
use phonebench::rf::AttnRange;
use phonebench::Error;

fn corpus(n: usize) -> FrameCorpus {
    synth_corpus(&SynthSpec {
        n_utts: n,
        t_min: 60,
        t_max: 90,
        long_range_fraction: 0.2,
        cue_distance: 30,
        noise: 0.1,
        seed: 2,
    })
    .unwrap()
}

fn tiny(arch: Arch) -> ArchConfig {
    ArchConfig::new(arch, 2, 16).channels(4).kernel(3).heads(2)
}

#[test]
fn perfect_predictions_score_one() {
    let gold = [vec![1, 2, 3], vec![0, 0]];
    let r = EvalReport::from_pairs(37, gold.iter().map(|g| (g.as_slice(), g.as_slice())));
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.total, 5);
    assert_eq!(r.per_class[0].total, 2);
}

#[test]
fn evaluate_matches_manual_count() {
    let c = corpus(6);
    let model = Model::build(&tiny(Arch::Conformer), 3).unwrap();
    let (mut correct, mut total) = (0, 0);
    let mut per_class = vec![(0usize, 0usize); 37];
    for u in &c.utterances {
        let pred = predict(&model.infer(&u.features, None).unwrap());
        let gold = subsample_labels(&u.labels, pred.len());
        for (p, g) in pred.iter().zip(&gold) {
            total += 1;
            per_class[*g].1 += 1;
            if p == g {
                correct += 1;
                per_class[*g].0 += 1;
            }
        }
    }
    let r = evaluate(&model, &c, None).unwrap();
    assert_eq!((r.correct, r.total), (correct, total));
    assert_eq!(r.accuracy, correct as f64 / total as f64);
    for (k, cc) in r.per_class.iter().enumerate() {
        assert_eq!((cc.correct, cc.total), per_class[k]);
    }
}

#[test]
fn adversarial_labels_score_zero() {
    let c = corpus(4);
    let model = Model::build(&tiny(Arch::Lstm), 3).unwrap();
    let flipped: Vec<Utterance> = c
        .utterances
        .iter()
        .map(|u| {
            let pred = predict(&model.infer(&u.features, None).unwrap());
            // Every input frame gets a label different from the prediction of its output frame.
            let labels = (0..u.len())
                .map(|f| ((pred[(f / 4).min(pred.len() - 1)] + 1) % 37) as u8)
                .collect();
            Utterance::new(u.id.clone(), u.features.clone(), labels).unwrap()
        })
        .collect();
    let r = evaluate(&model, &FrameCorpus { utterances: flipped }, None).unwrap();
    assert_eq!(r.correct, 0);
    assert_eq!(r.accuracy, 0.0);
}

#[test]
fn transfer_matrix_consistency() {
    let c = corpus(4);
    let ranges = [AttnRange::Limited(1), AttnRange::Unlimited];
    let models: Vec<Model> = ranges
        .iter()
        .map(|&r| Model::build(&tiny(Arch::Transformer).range(r), 5).unwrap())
        .collect();
    let pairs: Vec<(AttnRange, &Model)> = ranges.iter().copied().zip(models.iter()).collect();
    let m = range_transfer_matrix(&pairs, &c, &ranges).unwrap();
    for (i, model) in models.iter().enumerate() {
        assert_eq!(m.accuracy[i][i], evaluate(model, &c, None).unwrap().accuracy);
        for (j, &r) in ranges.iter().enumerate() {
            assert_eq!(m.accuracy[i][j], evaluate(model, &c, Some(r)).unwrap().accuracy);
        }
    }
    let single = range_transfer_matrix(&pairs[..1], &c, &ranges[..1]).unwrap();
    assert_eq!(single.accuracy, vec![vec![evaluate(&models[0], &c, None).unwrap().accuracy]]);
    let csv = m.to_csv("h");
    assert!(csv.starts_with("# config_hash=h\ntrain_r,infer_1,infer_unlimited\n"));
}

#[test]
fn diagonal_adjacency_rule() {
    let m = |rows: Vec<Vec<f64>>| TransferMatrix {
        train: vec![AttnRange::Limited(2), AttnRange::Limited(8), AttnRange::Unlimited],
        infer: vec![AttnRange::Limited(2), AttnRange::Limited(8), AttnRange::Unlimited],
        accuracy: rows,
    };
    assert!(m(vec![vec![0.9, 0.8, 0.7], vec![0.1, 0.2, 0.3], vec![0.5, 0.6, 0.6]]).maxima_near_diagonal());
    assert!(!m(vec![vec![0.5, 0.6, 0.7], vec![0.1, 0.2, 0.3], vec![0.5, 0.6, 0.6]]).maxima_near_diagonal());
    assert!(!m(vec![vec![0.9, 0.8, 0.7], vec![0.1, 0.2, 0.3], vec![0.9, 0.6, 0.6]]).maxima_near_diagonal());
}

#[test]
fn exponent_fit_on_exact_power_laws() {
    let ts = [512, 1024, 2048, 4096, 8192];
    let linear: Vec<f64> = ts.iter().map(|&t| 0.003 * t as f64).collect();
    let quadratic: Vec<f64> = ts.iter().map(|&t| 1e-6 * (t as f64).powi(2)).collect();
    assert!((fit_scaling_exponent(&ts, &linear).unwrap() - 1.0).abs() < 1e-6);
    assert!((fit_scaling_exponent(&ts, &quadratic).unwrap() - 2.0).abs() < 1e-6);
    assert!(matches!(fit_scaling_exponent(&ts[..3], &linear[..3]), Err(Error::Fit(_))));
    assert!(matches!(fit_scaling_exponent(&[1, 2, 3, 4], &[1.0; 4]), Err(Error::Fit(_))));
    let mut bad = linear.clone();
    bad[2] = 0.0;
    assert!(matches!(fit_scaling_exponent(&ts, &bad), Err(Error::Fit(_))));
}

#[test]
fn median_of_repeats() {
    assert_eq!(median(&mut [3.0]), 3.0);
    assert_eq!(median(&mut [5.0, 1.0, 3.0]), 3.0);
    assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
}

#[test]
fn timing_shape_and_batch_sanity() {
    let model = Model::build(&ArchConfig::new(Arch::ContextNet, 2, 16).kernel(3).channels(2), 0).unwrap();
    let t = time_inference(&model, &[256, 512], 2, 1, 0).unwrap();
    assert_eq!(t.iter().map(|x| x.frames).collect::<Vec<_>>(), vec![256, 512]);
    assert!(t.iter().all(|x| x.ms_per_seq > 0.0));
    let csv = timings_csv("abc", &t);
    assert_eq!(csv.lines().nth(1), Some("T,ms"));

    // Per-sequence time is batch-independent, so total time doubles with the batch.
    let one = time_inference(&model, &[2048], 4, 5, 1).unwrap()[0].ms_per_seq * 4.0;
    let two = time_inference(&model, &[2048], 8, 5, 1).unwrap()[0].ms_per_seq * 8.0;
    let ratio = two / one;
    assert!(0.5 < ratio / 2.0 && ratio / 2.0 < 2.0, "ratio {ratio}");
}
