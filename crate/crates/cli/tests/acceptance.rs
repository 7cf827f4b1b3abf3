//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line (straight to stderr, so it shows without `--nocapture`) and then
//! asserts. A process-wide lock runs them one at a time so timings are not
//! skewed by each other.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use phonebench::dataio::{synth_corpus, AugmentConfig, FbankConfig, FrameCorpus, SynthSpec};
use phonebench::gradcheck::{layer_suite, model_suite};
use phonebench::harness::{evaluate, range_transfer_matrix, train, TrainConfig};
use phonebench::models::{Arch, ArchConfig, Model};
use phonebench::params::count_params;
use phonebench::rf::{empirical_receptive_field, model_receptive_field, AttnRange, EmpiricalRf};
use phonebench::Tensor;
use phonebench_cli::{cmd_bench, cmd_eval, cmd_fbank, cmd_params, cmd_rf, cmd_synth, cmd_train, cmd_transfer};
use phonebench_cli::{ExperimentConfig, Profile, Sweep};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "criterion {id}: {verdict} {detail}").unwrap();
}

fn randn(shape: [usize; 2], seed: u64) -> Tensor {
    let mut r = phonebench::rng::seeded(seed);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut r);
        z
    })
}

fn csv_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn criterion_1_receptive_field_labels() {
    let _g = serial();
    let start = Instant::now();
    let mut cfg = ExperimentConfig::defaults(Profile::Paper);
    let lim = |rs: &[usize]| rs.iter().map(|&r| AttnRange::Limited(r)).collect::<Vec<_>>();
    cfg.model = ArchConfig::new(Arch::Transformer, 4, 248);
    cfg.sweep = Some(vec![
        Sweep {
            range: Some(lim(&[8, 16, 32, 64])),
            ..Sweep::default()
        },
        Sweep {
            arch: Some(vec![Arch::Conformer]),
            kernel: Some(vec![9]),
            range: Some(lim(&[4, 12, 28, 60])),
            ..Sweep::default()
        },
        Sweep {
            arch: Some(vec![Arch::ContextNet]),
            kernel: Some(vec![3, 5, 9, 17, 33]),
            use_se: Some(vec![false]),
            ..Sweep::default()
        },
        Sweep {
            arch: Some(vec![Arch::ContextNet]),
            kernel: Some(vec![5]),
            depth: Some(vec![4, 8, 12, 16]),
            use_se: Some(vec![false]),
            ..Sweep::default()
        },
    ]);
    let csv = cmd_rf(&cfg).unwrap();
    let got: Vec<String> = csv_rows(&csv).into_iter().map(|r| r[5].clone()).collect();
    let want = [
        "2.60", "5.16", "10.28", "20.52", // transformer r
        "2.60", "5.16", "10.28", "20.52", // conformer r
        "1.32", "2.60", "5.16", "10.28", "20.52", // contextnet k
        "2.60", "5.16", "7.72", "10.28", // contextnet l
    ];
    let secs = start.elapsed().as_secs_f64();
    let pass = got == want && secs < 1.0;
    report("1", pass, &format!("({} labels, {secs:.3}s)", want.len()));
    assert_eq!(got, want);
    assert!(secs < 1.0);
}

/// A random small config for `arch`; `bounded` selects the bounded variant
/// (SE off, limited range) where the family has one.
fn random_config(arch: Arch, bounded: bool, r: &mut impl Rng) -> ArchConfig {
    let depth = r.random_range(1..=3);
    let heads = [1, 2, 4][r.random_range(0..3)];
    let width = match arch {
        Arch::Transformer | Arch::Conformer => heads * r.random_range(8 / heads..=32 / heads),
        _ => 2 * r.random_range(4..=16),
    };
    let kernel = 2 * r.random_range(1..=4) + 1;
    let range = if bounded {
        AttnRange::Limited(r.random_range(0..=5))
    } else {
        AttnRange::Unlimited
    };
    ArchConfig::new(arch, depth, width)
        .kernel(kernel)
        .heads(heads)
        .range(range)
        .se(!bounded)
        .ds(r.random_bool(0.5))
        .channels(r.random_range(2..=4))
}

#[test]
fn criterion_2_empirical_receptive_field() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = phonebench::rng::seeded(2024);
    let mut failures = Vec::new();
    let mut checked = 0;
    // Bounded families at T' = 64.
    for arch in [Arch::ContextNet, Arch::Transformer, Arch::Conformer] {
        for i in 0..20 {
            let cfg = random_config(arch, true, &mut rng);
            let model = Model::build(&cfg, i).unwrap();
            let symbolic = model_receptive_field(&cfg).radius.unwrap();
            let measured = empirical_receptive_field(&model, &randn([80, 256], i)).unwrap();
            checked += 1;
            match measured {
                EmpiricalRf::Bounded(r) if r.abs_diff(symbolic) <= 1 => {}
                m => failures.push(format!("{cfg:?}: {m:?} vs {symbolic}")),
            }
        }
    }
    // Global-context families at T' = 16, where the edge-to-edge effect is
    // still far above the threshold.
    for (arch, n) in [(Arch::Lstm, 20), (Arch::ContextNet, 20), (Arch::Transformer, 5), (Arch::Conformer, 5)] {
        for i in 0..n {
            let cfg = random_config(arch, false, &mut rng);
            let model = Model::build(&cfg, 100 + i).unwrap();
            let measured = empirical_receptive_field(&model, &randn([80, 64], i)).unwrap();
            checked += 1;
            if measured != EmpiricalRf::Unbounded {
                failures.push(format!("{cfg:?}: {measured:?}, expected unbounded"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 300.0;
    report("2", pass, &format!("({checked} configs, {} mismatches, {secs:.1}s)", failures.len()));
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(secs < 300.0);
}

#[test]
fn criterion_3_gradient_checks() {
    let _g = serial();
    let start = Instant::now();
    let mut results = layer_suite().unwrap();
    results.extend(model_suite().unwrap());
    let worst = results.iter().map(|(_, r)| r.max_rel).fold(0.0, f64::max);
    let min_probes = results.iter().map(|(_, r)| r.probes).min().unwrap();
    let failing: Vec<_> = results.iter().filter(|(_, r)| !r.passes()).collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = failing.is_empty() && secs < 300.0;
    report(
        "3",
        pass,
        &format!("({} checks, worst rel err {worst:.2e}, min probes {min_probes}, {secs:.1}s)", results.len()),
    );
    assert!(failing.is_empty(), "{failing:?}");
    assert!(secs < 300.0);
}

#[test]
fn criterion_4_parameter_accounting() {
    let _g = serial();
    let mut rng = phonebench::rng::seeded(44);
    let mut mismatches = 0;
    for i in 0..200 {
        let arch = Arch::ALL[i % 4];
        let mut cfg = random_config(arch, rng.random_bool(0.5), &mut rng);
        cfg.use_se = rng.random_bool(0.5);
        cfg.se_ratio = rng.random_range(1..=8);
        let model = Model::build(&cfg, i as u64).unwrap();
        let enumerated: u64 = model
            .store()
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len() as u64)
            .sum();
        if enumerated != count_params(&cfg) {
            mismatches += 1;
        }
    }
    let widths = [
        ArchConfig::new(Arch::ContextNet, 4, 352).kernel(5),
        ArchConfig::new(Arch::Lstm, 4, 336),
        ArchConfig::new(Arch::Transformer, 4, 248),
        ArchConfig::new(Arch::Conformer, 4, 192).kernel(9),
    ];
    let mut cfg = ExperimentConfig::defaults(Profile::Paper);
    cfg.sweep = Some(
        widths
            .iter()
            .map(|w| Sweep {
                arch: Some(vec![w.arch]),
                width: Some(vec![w.width]),
                kernel: Some(vec![w.kernel]),
                ..Sweep::default()
            })
            .collect(),
    );
    let totals: Vec<f64> = csv_rows(&cmd_params(&cfg).unwrap())
        .iter()
        .map(|r| r[9].parse().unwrap())
        .collect();
    let near_5m = totals.iter().all(|t| (t / 5.0e6 - 1.0).abs() <= 0.12);
    let ds = ArchConfig::new(Arch::ContextNet, 2, 352).kernel(9);
    let full = count_params(&ds.clone().ds(false)) as f64;
    let ratio = full / count_params(&ds) as f64;
    let full_ok = ratio >= 2.2 && (full / 13.0e6 - 1.0).abs() <= 0.15;
    let pass = mismatches == 0 && near_5m && full_ok;
    report(
        "4",
        pass,
        &format!("(200 fuzzed, {mismatches} mismatches; table widths {totals:?}; full conv {full} = {ratio:.2}x)"),
    );
    assert_eq!(mismatches, 0);
    assert!(near_5m, "{totals:?}");
    assert!(full_ok, "full {full}, ratio {ratio}");
}

#[test]
fn criterion_5_head_invariance() {
    let _g = serial();
    let mut ok = true;
    let mut seen = Vec::new();
    for arch in [Arch::Transformer, Arch::Conformer] {
        for width in [64, 128] {
            let counts: Vec<u64> = [2, 4, 8, 16]
                .iter()
                .map(|&h| {
                    let cfg = ArchConfig::new(arch, 2, width).heads(h).channels(4);
                    Model::build(&cfg, h as u64).unwrap().param_count()
                })
                .collect();
            ok &= counts.windows(2).all(|w| w[0] == w[1]);
            seen.push(format!("{arch} d={width}: {}", counts[0]));
        }
    }
    report("5", ok, &format!("({})", seen.join("; ")));
    assert!(ok);
}

fn corpus(long_range_fraction: f64, noise: f64, n_utts: usize, seed: u64) -> FrameCorpus {
    synth_corpus(&SynthSpec {
        n_utts,
        t_min: 100,
        t_max: 140,
        long_range_fraction,
        cue_distance: 40,
        noise,
        seed,
    })
    .unwrap()
}

fn long_range() -> &'static (FrameCorpus, FrameCorpus) {
    static DATA: OnceLock<(FrameCorpus, FrameCorpus)> = OnceLock::new();
    DATA.get_or_init(|| (corpus(0.25, 0.3, 512, 4), corpus(0.25, 0.3, 128, 99)))
}

/// Desk-scale recipe: 2K iterations of batch 8. SpecAugment is off because
/// its time masks can erase the cue the long-range frames depend on.
fn desk_training() -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        batch_size: 8,
        seed: 5,
        max_lr: 3e-3,
        augment: AugmentConfig::none(),
        ..TrainConfig::desk()
    }
}

fn trained(cfg: &ArchConfig, data: &FrameCorpus) -> Model {
    let mut model = Model::build(cfg, 7).unwrap();
    train(&mut model, data, &desk_training()).unwrap();
    model
}

/// About 88K parameters.
fn desk_transformer(range: AttnRange) -> ArchConfig {
    ArchConfig::new(Arch::Transformer, 4, 40).channels(8).heads(4).range(range)
}

fn unlimited_transformer() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| trained(&desk_transformer(AttnRange::Unlimited), &long_range().0))
}

#[test]
fn criterion_6a_long_range_benefit() {
    let _g = serial();
    let start = Instant::now();
    let (train_set, test_set) = long_range();
    let wide = evaluate(unlimited_transformer(), test_set, None).unwrap().accuracy;
    let narrow_model = trained(&desk_transformer(AttnRange::Limited(1)), train_set);
    let narrow = evaluate(&narrow_model, test_set, None).unwrap().accuracy;
    let gain = 100.0 * (wide - narrow);
    let secs = start.elapsed().as_secs_f64();
    let pass = gain >= 5.0 && secs < 1800.0;
    report(
        "6a",
        pass,
        &format!("(unlimited {wide:.3} vs r=1 {narrow:.3}, +{gain:.1} points, {secs:.0}s)"),
    );
    assert!(gain >= 5.0);
    assert!(secs < 1800.0);
}

#[test]
fn criterion_6b_local_sufficiency() {
    let _g = serial();
    let start = Instant::now();
    let train_set = corpus(0.0, 0.0, 512, 4);
    let test_set = corpus(0.0, 0.0, 128, 99);
    // Widths giving roughly 100K parameters at depth 4.
    let cfgs = [
        ArchConfig::new(Arch::ContextNet, 4, 68).channels(8),
        ArchConfig::new(Arch::Lstm, 4, 60).channels(8),
        desk_transformer(AttnRange::Unlimited),
        ArchConfig::new(Arch::Conformer, 4, 28).channels(8).heads(4),
    ];
    let mut accs = Vec::new();
    for cfg in &cfgs {
        let model = trained(cfg, &train_set);
        accs.push((cfg.arch, model.param_count(), evaluate(&model, &test_set, None).unwrap().accuracy));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = accs.iter().all(|a| a.2 >= 0.95) && secs < 1800.0;
    let detail: Vec<String> = accs.iter().map(|(a, n, acc)| format!("{a} {n} params {acc:.3}")).collect();
    report("6b", pass, &format!("({}; {secs:.0}s)", detail.join(", ")));
    assert!(accs.iter().all(|a| a.2 >= 0.95), "{accs:?}");
    assert!(secs < 1800.0);
}

#[test]
fn criterion_6c_range_transfer() {
    let _g = serial();
    let start = Instant::now();
    let (train_set, test_set) = long_range();
    let ranges = [AttnRange::Limited(2), AttnRange::Limited(8), AttnRange::Unlimited];
    let r2 = trained(&desk_transformer(ranges[0]), train_set);
    let r8 = trained(&desk_transformer(ranges[1]), train_set);
    let pairs = [(ranges[0], &r2), (ranges[1], &r8), (ranges[2], unlimited_transformer())];
    let m = range_transfer_matrix(&pairs, test_set, &ranges).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = m.maxima_near_diagonal() && secs < 1800.0;
    let rows: Vec<String> = m
        .accuracy
        .iter()
        .map(|r| r.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" "))
        .collect();
    report("6c", pass, &format!("(rows [{}], {secs:.0}s)", rows.join(" | ")));
    assert!(m.maxima_near_diagonal(), "{rows:?}");
    assert!(secs < 1800.0);
}

#[test]
fn criterion_7_scaling_exponents() {
    let _g = serial();
    let start = Instant::now();
    let mut cfg = ExperimentConfig::defaults(Profile::Desk);
    cfg.model = ArchConfig::new(Arch::Transformer, 1, 16).heads(1).kernel(5).channels(2);
    cfg.bench.batch = 8;
    cfg.bench.repeats = 3;
    cfg.bench.warmup = 1;
    cfg.bench.frames = vec![512, 1024, 2048, 4096, 8192];
    cfg.sweep = Some(vec![
        Sweep {
            arch: Some(vec![Arch::Transformer, Arch::Conformer]),
            ..Sweep::default()
        },
        Sweep {
            arch: Some(vec![Arch::ContextNet, Arch::Lstm]),
            width: Some(vec![32]),
            ..Sweep::default()
        },
    ]);
    let (_, fits) = cmd_bench(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = |arch: Arch, e: f64| match arch {
        Arch::Transformer | Arch::Conformer => e >= 1.6,
        Arch::ContextNet | Arch::Lstm => e <= 1.3,
    };
    let pass = fits.len() == 4 && fits.iter().all(|(c, e)| ok(c.arch, *e)) && secs < 600.0;
    let detail: Vec<String> = fits.iter().map(|(c, e)| format!("{} {e:.2}", c.arch)).collect();
    report("7", pass, &format!("({}; {secs:.0}s)", detail.join(", ")));
    assert_eq!(fits.len(), 4);
    for (c, e) in &fits {
        assert!(ok(c.arch, *e), "{} exponent {e}", c.arch);
    }
    assert!(secs < 600.0);
}

/// Drops the named timing columns from a CSV payload.
fn without_columns(csv: &str, drop: &[&str]) -> String {
    let mut lines = csv.lines();
    let comment = lines.next().unwrap_or_default();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !drop.contains(&header[i])).collect();
    let mut out = vec![comment.to_string()];
    for line in std::iter::once(header.join(",").as_str()).chain(lines) {
        let cells: Vec<&str> = line.split(',').collect();
        out.push(keep.iter().map(|&i| cells[i]).collect::<Vec<_>>().join(","));
    }
    out.join("\n")
}

#[test]
fn criterion_8_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::defaults(Profile::Desk);
    cfg.seed = 13;
    cfg.model = ArchConfig::new(Arch::Conformer, 1, 8).heads(2).kernel(3).channels(2);
    cfg.synth = SynthSpec {
        n_utts: 8,
        t_min: 40,
        t_max: 60,
        long_range_fraction: 0.2,
        cue_distance: 16,
        noise: 0.2,
        seed: 3,
    };
    cfg.train.iterations = 4;
    cfg.train.batch_size = 2;
    cfg.bench.frames = vec![64, 128];
    cfg.bench.repeats = 1;
    let wav = dir.path().join("tone.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&wav, spec).unwrap();
    for n in 0..4_000 {
        w.write_sample((((n * 7) % 97) as i16 - 48) * 200).unwrap();
    }
    w.finalize().unwrap();
    let run = |tag: &str| -> Vec<(String, String)> {
        let out = dir.path().join(tag);
        let ckpt = out.join("train/model.ckpt");
        let mut v = vec![
            ("rf".into(), cmd_rf(&cfg).unwrap()),
            ("params".into(), cmd_params(&cfg).unwrap()),
            ("train".into(), cmd_train(&cfg, &out.join("train")).unwrap()),
            ("eval".into(), cmd_eval(&cfg, &ckpt, Some(AttnRange::Limited(1))).unwrap()),
            (
                "transfer".into(),
                cmd_transfer(&cfg, &[ckpt.clone(), ckpt.clone()], &[AttnRange::Limited(1), AttnRange::Unlimited])
                    .unwrap(),
            ),
            ("bench".into(), without_columns(&cmd_bench(&cfg).unwrap().0, &["ms"])),
            ("synth".into(), cmd_synth(&cfg, &out.join("synth")).unwrap()),
        ];
        let feat = out.join("tone.feat");
        let fbank = cmd_fbank(&wav, &feat, &FbankConfig::default()).unwrap();
        // The payload names its output path; compare the rest.
        v.push(("fbank".into(), fbank.replace(&feat.display().to_string(), "")));
        v.push(("fbank file".into(), std::fs::read(&feat).unwrap().iter().map(|b| format!("{b:02x}")).collect()));
        v.push((
            "checkpoint".into(),
            std::fs::read(&ckpt).unwrap().iter().map(|b| format!("{b:02x}")).collect(),
        ));
        v
    };
    let a = run("a");
    let b = run("b");
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let pass = differing.is_empty();
    let names: Vec<&str> = a.iter().map(|x| x.0.as_str()).collect();
    report("8", pass, &format!("(compared {}; differing {differing:?})", names.join(", ")));
    assert!(differing.is_empty());
}
