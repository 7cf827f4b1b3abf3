use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::csv_document;
use crate::dataio::{subsample_labels, FrameCorpus};
use crate::error::Result;
use crate::models::{predict, Model};
use crate::rf::AttnRange;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassCount>,
}

impl EvalReport {
    /// Tallies frame-level predictions against reference labels.
    pub fn from_pairs<'a>(
        n_classes: usize,
        pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>,
    ) -> Self {
        let mut per_class = vec![ClassCount::default(); n_classes];
        for (pred, gold) in pairs {
            for (&p, &g) in pred.iter().zip(gold) {
                per_class[g].total += 1;
                if p == g {
                    per_class[g].correct += 1;
                }
            }
        }
        let correct = per_class.iter().map(|c| c.correct).sum();
        let total = per_class.iter().map(|c| c.total).sum();
        Self {
            correct,
            total,
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            per_class,
        }
    }

    /// Accuracy per reference class; `None` for classes absent from the corpus.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.per_class
            .iter()
            .map(|c| (c.total > 0).then(|| c.correct as f64 / c.total as f64))
            .collect()
    }
}

/// Frame accuracy at the subsampled rate of a frozen model.
///
/// `range_override` replaces the trained attention range at inference.
pub fn evaluate(
    model: &Model,
    corpus: &FrameCorpus,
    range_override: Option<AttnRange>,
) -> Result<EvalReport> {
    let outputs: Vec<(Vec<usize>, Vec<usize>)> = corpus
        .utterances
        .par_iter()
        .map(|u| {
            let logits = model.infer(&u.features, range_override)?;
            let pred = predict(&logits);
            let gold = subsample_labels(&u.labels, pred.len());
            Ok((pred, gold))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_pairs(
        model.config().n_classes,
        outputs.iter().map(|(p, g)| (p.as_slice(), g.as_slice())),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub train: Vec<AttnRange>,
    pub infer: Vec<AttnRange>,
    /// `accuracy[row = train range][col = inference range]`.
    pub accuracy: Vec<Vec<f64>>,
}

impl TransferMatrix {
    /// Column index of each row's maximum (first on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        self.accuracy
            .iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Whether every row attains its maximum within one column of the diagonal.
    pub fn maxima_near_diagonal(&self) -> bool {
        self.accuracy.iter().enumerate().all(|(i, row)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter()
                .enumerate()
                .any(|(j, &v)| v == m && i.abs_diff(j) <= 1)
        })
    }

    pub fn to_csv(&self, hash: &str) -> String {
        let mut header = vec!["train_r".to_string()];
        header.extend(self.infer.iter().map(|r| format!("infer_{r}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = self
            .train
            .iter()
            .zip(&self.accuracy)
            .map(|(r, row)| {
                std::iter::once(r.to_string())
                    .chain(row.iter().map(f64::to_string))
                    .collect()
            })
            .collect();
        csv_document(hash, &header, &rows)
    }
}

/// Evaluates every trained model under every inference range.
pub fn range_transfer_matrix(
    models: &[(AttnRange, &Model)],
    corpus: &FrameCorpus,
    infer: &[AttnRange],
) -> Result<TransferMatrix> {
    let mut accuracy = Vec::with_capacity(models.len());
    for (_, m) in models {
        let row = infer
            .iter()
            .map(|&r| evaluate(m, corpus, Some(r)).map(|e| e.accuracy))
            .collect::<Result<Vec<_>>>()?;
        accuracy.push(row);
    }
    Ok(TransferMatrix {
        train: models.iter().map(|(r, _)| *r).collect(),
        infer: infer.to_vec(),
        accuracy,
    })
}
