//! Experiment configuration: named profile defaults, a JSON file merged on
//! top, then `--set key.path=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use phonebench::dataio::SynthSpec;
use phonebench::harness::{config_hash, TrainConfig};
use phonebench::models::{Arch, ArchConfig};
use phonebench::rf::AttnRange;
use phonebench::rng::SEED_ENV;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full recipe: 25K iterations, batch 128, the 5M-parameter Transformer.
    Paper,
    /// Laptop scale: 2K iterations, batch 16, a ~100K-parameter Transformer.
    #[default]
    Desk,
}

/// Cartesian product over the listed values; absent keys keep the base model's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub arch: Option<Vec<Arch>>,
    pub depth: Option<Vec<usize>>,
    pub width: Option<Vec<usize>>,
    pub kernel: Option<Vec<usize>>,
    pub range: Option<Vec<AttnRange>>,
    pub heads: Option<Vec<usize>>,
    pub use_se: Option<Vec<bool>>,
    pub use_ds: Option<Vec<bool>>,
    /// Parameter budgets; each expanded config gets its width solved per budget.
    pub budget: Option<Vec<u64>>,
}

/// One expanded sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub model: ArchConfig,
    pub budget: Option<u64>,
}

impl Sweep {
    pub fn expand(&self, base: &ArchConfig) -> Vec<SweepPoint> {
        fn axis<T: Clone>(list: &Option<Vec<T>>, base: T) -> Vec<T> {
            list.clone().unwrap_or_else(|| vec![base])
        }
        let mut out = Vec::new();
        for arch in axis(&self.arch, base.arch) {
            for depth in axis(&self.depth, base.depth) {
                for width in axis(&self.width, base.width) {
                    for kernel in axis(&self.kernel, base.kernel) {
                        for range in axis(&self.range, base.range) {
                            for heads in axis(&self.heads, base.heads) {
                                for use_se in axis(&self.use_se, base.use_se) {
                                    for use_ds in axis(&self.use_ds, base.use_ds) {
                                        let model = ArchConfig {
                                            arch,
                                            depth,
                                            width,
                                            kernel,
                                            range,
                                            heads,
                                            use_se,
                                            use_ds,
                                            ..base.clone()
                                        };
                                        match &self.budget {
                                            None => out.push(SweepPoint { model, budget: None }),
                                            Some(bs) => out.extend(bs.iter().map(|&b| SweepPoint {
                                                model: model.clone(),
                                                budget: Some(b),
                                            })),
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Encoder frames per sequence.
    pub frames: Vec<usize>,
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
}

/// Corpus manifests; when absent, a synthetic corpus is generated from `synth`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub synth: SynthSpec,
    /// `None` runs the base model alone; an empty list yields no rows.
    pub sweep: Option<Vec<Sweep>>,
    pub bench: BenchConfig,
}

impl ExperimentConfig {
    pub fn defaults(profile: Profile) -> Self {
        let synth = SynthSpec {
            n_utts: 512,
            t_min: 100,
            t_max: 140,
            long_range_fraction: 0.25,
            cue_distance: 40,
            noise: 0.3,
            seed: 0,
        };
        let frames = vec![512, 1024, 2048, 4096, 8192];
        match profile {
            Profile::Paper => Self {
                profile,
                seed: 0,
                model: ArchConfig::new(Arch::Transformer, 4, 248),
                train: TrainConfig::paper(),
                corpus: CorpusConfig::default(),
                synth,
                sweep: None,
                bench: BenchConfig {
                    frames,
                    batch: 64,
                    repeats: 5,
                    warmup: 1,
                },
            },
            Profile::Desk => Self {
                profile,
                seed: 0,
                model: ArchConfig::new(Arch::Transformer, 4, 40).channels(8),
                train: TrainConfig::desk(),
                corpus: CorpusConfig::default(),
                synth,
                sweep: None,
                bench: BenchConfig {
                    frames,
                    batch: 8,
                    repeats: 3,
                    warmup: 1,
                },
            },
        }
    }

    /// Resolves profile defaults, an optional JSON file, `--set` overrides,
    /// and the seed environment variable, in that order.
    pub fn resolve(profile: Option<Profile>, file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let file_value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let v: Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                if !v.is_object() {
                    bail!("config {} must be a JSON object", p.display());
                }
                Some(v)
            }
            None => None,
        };
        let file_profile = file_value
            .as_ref()
            .and_then(|v| v.get("profile"))
            .map(|p| serde_json::from_value::<Profile>(p.clone()))
            .transpose()
            .context("invalid profile in config file")?;
        let profile = profile.or(file_profile).unwrap_or_default();
        let mut value = serde_json::to_value(Self::defaults(profile))?;
        if let Some(v) = file_value {
            merge(&mut value, v);
        }
        value["profile"] = serde_json::to_value(profile)?;
        for set in sets {
            apply_set(&mut value, set)?;
        }
        let mut cfg: Self = serde_json::from_value(value).context("invalid configuration")?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={seed} is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    /// The seed used by training and synthetic corpora.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        match &self.sweep {
            None => vec![SweepPoint {
                model: self.model.clone(),
                budget: None,
            }],
            Some(sweeps) => sweeps.iter().flat_map(|s| s.expand(&self.model)).collect(),
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a string.
fn apply_set(root: &mut Value, set: &str) -> Result<()> {
    let Some((path, raw)) = set.split_once('=') else {
        bail!("--set expects key.path=value, got `{set}`");
    };
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("--set {path}: `{}` is not an object", keys[..i].join("."));
        };
        if !map.contains_key(*key) && i + 1 < keys.len() {
            map.insert(key.to_string(), Value::Object(Default::default()));
        }
        if i + 1 == keys.len() {
            map.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = map.get_mut(*key).expect("inserted above");
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Ok(())
}
