//! On-disk corpus: a manifest of feature/label file pairs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::N_CLASSES;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"PBFK";
pub const LABEL_MAGIC: &[u8; 4] = b"PBLB";
pub const FORMAT_VERSION: u32 = 1;

/// One utterance at the 10 ms input rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[n_mels × T]`.
    pub features: Tensor,
    pub labels: Vec<u8>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, features: Tensor, labels: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if features.rank() != 2 {
            return Err(Error::Utterance {
                id,
                reason: format!("features must be [n_mels×T], got {:?}", features.shape()),
            });
        }
        if features.dim(1) != labels.len() {
            return Err(Error::Utterance {
                id,
                reason: format!(
                    "{} feature frames but {} labels",
                    features.dim(1),
                    labels.len()
                ),
            });
        }
        if let Some((frame, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= N_CLASSES)
        {
            return Err(Error::Utterance {
                id,
                reason: format!("label {l} at frame {frame} is outside 0..{N_CLASSES}"),
            });
        }
        Ok(Self {
            id,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameCorpus {
    pub utterances: Vec<Utterance>,
}

impl FrameCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::len).sum()
    }
}

/// Labels at the subsampled rate: the 10 ms label at each output frame's
/// center input frame `4t` (clamped to the last frame).
pub fn subsample_labels(labels: &[u8], t_out: usize) -> Vec<usize> {
    (0..t_out)
        .map(|t| labels[(4 * t).min(labels.len() - 1)] as usize)
        .collect()
}

/// Placeholder 37-class inventory; index 0 is silence.
pub const DEFAULT_CLASSES: [&str; N_CLASSES] = [
    "sil", "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g",
    "hh", "ih", "iy", "jh", "k", "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th",
    "uh", "uw", "v", "z",
];

pub fn read_class_map(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.len() != N_CLASSES {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "class map lists {} names, expected {N_CLASSES}",
                names.len()
            ),
        });
    }
    Ok(names)
}

pub fn write_class_map(path: &Path, names: &[&str]) -> Result<()> {
    let mut text = names.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (m, t) = (features.dim(0), features.dim(1));
    let mut buf = Vec::with_capacity(16 + 4 * m * t);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn header<'a>(
    path: &Path,
    bytes: &'a [u8],
    magic: &[u8; 4],
    fields: usize,
) -> Result<(Vec<u32>, &'a [u8])> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let need = 4 + 4 * (fields + 1);
    if bytes.len() < need {
        return Err(bad("truncated header".into()));
    }
    if &bytes[..4] != magic {
        return Err(bad(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let words: Vec<u32> = bytes[4..need]
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if words[0] != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", words[0])));
    }
    Ok((words[1..].to_vec(), &bytes[need..]))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, body) = header(path, &bytes, FEATURE_MAGIC, 2)?;
    let (m, t) = (dims[0] as usize, dims[1] as usize);
    if body.len() != 4 * m * t || m == 0 || t == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "payload of {} bytes does not match {m}×{t} f32 values",
                body.len()
            ),
        });
    }
    let data = body
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new([m, t], data)
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + labels.len());
    buf.extend_from_slice(LABEL_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    buf.extend_from_slice(labels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, body) = header(path, &bytes, LABEL_MAGIC, 1)?;
    if body.len() != dims[0] as usize {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("header says {} labels, payload has {}", dims[0], body.len()),
        });
    }
    Ok(body.to_vec())
}

/// Loads a `<id>\t<features>\t<labels>` manifest; relative paths resolve
/// against the manifest's directory.
pub fn load_corpus(manifest: &Path) -> Result<FrameCorpus> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut utterances = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, feat, lab] = cols[..] else {
            return Err(Error::Format {
                path: manifest.to_path_buf(),
                reason: format!(
                    "line {}: expected 3 tab-separated fields, got {}",
                    n + 1,
                    cols.len()
                ),
            });
        };
        let wrap = |e: Error| Error::Utterance {
            id: id.to_string(),
            reason: e.to_string(),
        };
        let features = read_features(&base.join(feat)).map_err(wrap)?;
        let labels = read_labels(&base.join(lab)).map_err(wrap)?;
        utterances.push(Utterance::new(id, features, labels)?);
    }
    Ok(FrameCorpus { utterances })
}

/// Writes every utterance under `dir` and returns the manifest path.
pub fn write_corpus(dir: &Path, corpus: &FrameCorpus) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for u in &corpus.utterances {
        let feat = format!("{}.feat", u.id);
        let lab = format!("{}.lab", u.id);
        write_features(&dir.join(&feat), &u.features)?;
        write_labels(&dir.join(&lab), &u.labels)?;
        manifest.push_str(&format!("{}\t{feat}\t{lab}\n", u.id));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
