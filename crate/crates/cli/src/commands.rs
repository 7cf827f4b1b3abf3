//! Subcommand bodies. Each returns the CSV payload it emits; file outputs are
//! written alongside.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use phonebench::dataio::{compute_fbank, load_corpus, read_wav, synth_corpus, write_corpus, write_features};
use phonebench::dataio::{FbankConfig, FrameCorpus, SynthSpec};
use phonebench::harness::{
    csv_document, evaluate, fit_scaling_exponent, range_transfer_matrix, time_inference, train,
};
use phonebench::models::{load_checkpoint, save_checkpoint, ArchConfig, Model};
use phonebench::params::{breakdown, solve_width, ParamBudget};
use phonebench::rf::{model_receptive_field, AttnRange};

use crate::config::{ExperimentConfig, SweepPoint};

/// Applies a budget, if any, by solving for the width.
pub fn materialize(point: &SweepPoint) -> Result<ArchConfig> {
    let mut cfg = point.model.clone();
    if let Some(b) = point.budget {
        cfg.width = solve_width(&cfg, ParamBudget::new(b))?;
    }
    cfg.validate().map_err(phonebench::Error::from)?;
    Ok(cfg)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn cmd_rf(cfg: &ExperimentConfig) -> Result<String> {
    let mut rows = Vec::new();
    for point in cfg.points() {
        let m = materialize(&point)?;
        let rf = model_receptive_field(&m);
        rows.push(vec![
            m.arch.to_string(),
            if m.arch.has_kernel() { m.kernel.to_string() } else { String::new() },
            if m.arch.has_attention() { m.range.to_string() } else { String::new() },
            m.depth.to_string(),
            opt(rf.frames()),
            opt(rf.seconds_label()),
            rf.bounded.to_string(),
        ]);
    }
    Ok(csv_document(
        &cfg.hash(),
        &["arch", "k", "r", "l", "frames", "seconds", "bounded"],
        &rows,
    ))
}

pub fn cmd_params(cfg: &ExperimentConfig) -> Result<String> {
    let mut rows = Vec::new();
    for point in cfg.points() {
        let m = materialize(&point)?;
        let b = breakdown(&m);
        rows.push(vec![
            m.arch.to_string(),
            m.depth.to_string(),
            m.width.to_string(),
            m.kernel.to_string(),
            m.heads.to_string(),
            opt(point.budget),
            b.frontend.to_string(),
            b.encoder.to_string(),
            b.classifier.to_string(),
            b.total().to_string(),
        ]);
    }
    Ok(csv_document(
        &cfg.hash(),
        &["arch", "depth", "width", "kernel", "heads", "budget", "frontend", "encoder", "classifier", "total"],
        &rows,
    ))
}

pub fn train_corpus(cfg: &ExperimentConfig) -> Result<FrameCorpus> {
    match &cfg.corpus.train {
        Some(p) => Ok(load_corpus(p)?),
        None => Ok(synth_corpus(&cfg.synth)?),
    }
}

/// The held-out corpus; the synthetic fallback uses a disjoint seed.
pub fn eval_corpus(cfg: &ExperimentConfig) -> Result<FrameCorpus> {
    match &cfg.corpus.eval {
        Some(p) => Ok(load_corpus(p)?),
        None => Ok(synth_corpus(&SynthSpec {
            n_utts: (cfg.synth.n_utts / 4).max(1),
            seed: cfg.synth.seed.wrapping_add(0x5eed),
            ..cfg.synth.clone()
        })?),
    }
}

/// Trains every sweep point; run `i` writes `train.csv`, `summary.json`,
/// `config.json` and `model.ckpt` under `out/run-<i>`, or directly under
/// `out` when there is no sweep.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let corpus = train_corpus(cfg)?;
    let held_out = eval_corpus(cfg)?;
    let points = cfg.points();
    let mut payload = String::new();
    for (i, point) in points.iter().enumerate() {
        let arch = materialize(point)?;
        let dir = if cfg.sweep.is_some() { out.join(format!("run-{i:03}")) } else { out.to_path_buf() };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let run_cfg = ExperimentConfig {
            model: arch.clone(),
            sweep: None,
            ..cfg.clone()
        };
        let mut model = Model::build(&arch, cfg.seed)?;
        let mut report = train(&mut model, &corpus, &cfg.resolved_train())?;
        report.config_hash = run_cfg.hash();
        report.push_eval(evaluate(&model, &held_out, None)?);
        save_checkpoint(&model, &dir.join("model.ckpt"))?;
        let csv = report.to_csv();
        std::fs::write(dir.join("train.csv"), &csv)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summary())?)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&run_cfg)?)?;
        payload.push_str(&csv);
    }
    Ok(payload)
}

fn load(path: &Path) -> Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, infer: Option<AttnRange>) -> Result<String> {
    let model = load(checkpoint)?;
    let corpus = eval_corpus(cfg)?;
    let r = evaluate(&model, &corpus, infer)?;
    let infer_r = infer.unwrap_or(model.config().range);
    Ok(csv_document(
        &cfg.hash(),
        &["arch", "train_r", "infer_r", "correct", "total", "accuracy"],
        &[vec![
            model.config().arch.to_string(),
            model.config().range.to_string(),
            infer_r.to_string(),
            r.correct.to_string(),
            r.total.to_string(),
            r.accuracy.to_string(),
        ]],
    ))
}

/// Rows are checkpoints (labelled by their trained range), columns are `infer`.
pub fn cmd_transfer(cfg: &ExperimentConfig, checkpoints: &[PathBuf], infer: &[AttnRange]) -> Result<String> {
    if checkpoints.is_empty() || infer.is_empty() {
        bail!("transfer needs at least one checkpoint and one inference range");
    }
    let models = checkpoints.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(AttnRange, &Model)> = models.iter().map(|m| (m.config().range, m)).collect();
    let m = range_transfer_matrix(&pairs, &eval_corpus(cfg)?, infer)?;
    Ok(m.to_csv(&cfg.hash()))
}

/// Times each sweep point's encoder; `ms` is a timing field. The fitted
/// exponent per point is returned alongside.
pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<(String, Vec<(ArchConfig, f64)>)> {
    let b = &cfg.bench;
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for point in cfg.points() {
        let arch = materialize(&point)?;
        let model = Model::build(&arch, cfg.seed)?;
        let timings = time_inference(&model, &b.frames, b.batch, b.repeats, b.warmup)?;
        for t in &timings {
            rows.push(vec![
                arch.arch.to_string(),
                arch.depth.to_string(),
                arch.width.to_string(),
                arch.range.to_string(),
                t.frames.to_string(),
                format!("{:.6}", t.ms_per_seq),
            ]);
        }
        if timings.len() >= 4 {
            let frames: Vec<usize> = timings.iter().map(|t| t.frames).collect();
            let ms: Vec<f64> = timings.iter().map(|t| t.ms_per_seq).collect();
            fits.push((arch, fit_scaling_exponent(&frames, &ms)?));
        }
    }
    let csv = csv_document(&cfg.hash(), &["arch", "depth", "width", "range", "T", "ms"], &rows);
    Ok((csv, fits))
}

/// Writes the synthetic corpus to `out` and lists its utterances.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let corpus = synth_corpus(&cfg.synth)?;
    write_corpus(out, &corpus)?;
    let rows: Vec<Vec<String>> = corpus
        .utterances
        .iter()
        .map(|u| vec![u.id.clone(), u.len().to_string()])
        .collect();
    Ok(csv_document(&phonebench::harness::config_hash(&cfg.synth), &["id", "frames"], &rows))
}

/// Log-mel features for one WAV file, written in the corpus feature format.
pub fn cmd_fbank(wav: &Path, out: &Path, fb: &FbankConfig) -> Result<String> {
    let (samples, rate) = read_wav(wav)?;
    if rate != fb.sample_rate {
        bail!("{} has sample rate {rate}, expected {}", wav.display(), fb.sample_rate);
    }
    let feats = compute_fbank(&samples, fb)?;
    write_features(out, &feats)?;
    Ok(csv_document(
        &phonebench::harness::config_hash(fb),
        &["path", "mels", "frames"],
        &[vec![out.display().to_string(), feats.shape()[0].to_string(), feats.shape()[1].to_string()]],
    ))
}
