use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::EvalReport;

/// SHA-256 of the canonical (key-sorted, compact) JSON encoding.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let canonical = serde_json::to_value(value)
        .map(|v| v.to_string())
        .unwrap_or_default();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// A CSV document: `# config_hash=…` comment, header row, then rows.
pub fn csv_document(hash: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("# config_hash={hash}\n{}\n", header.join(","));
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn new(config_hash: String) -> Self {
        Self {
            config_hash,
            ..Self::default()
        }
    }

    pub fn push_step(&mut self, loss: f64, lr: f64, grad_norm: f64) {
        self.losses.push(loss);
        self.lrs.push(lr);
        self.grad_norms.push(grad_norm);
    }

    pub fn push_eval(&mut self, report: EvalReport) {
        self.evals.push(EvalRecord {
            iteration: self.losses.len(),
            report,
        });
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// One row per iteration and per evaluation; no timing columns.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<Vec<String>> = (0..self.losses.len())
            .map(|i| {
                vec![
                    "step".into(),
                    i.to_string(),
                    self.losses[i].to_string(),
                    self.lrs[i].to_string(),
                    self.grad_norms[i].to_string(),
                    String::new(),
                ]
            })
            .collect();
        for e in &self.evals {
            rows.push(vec![
                "eval".into(),
                e.iteration.to_string(),
                String::new(),
                String::new(),
                String::new(),
                e.report.accuracy.to_string(),
            ]);
        }
        csv_document(
            &self.config_hash,
            &["kind", "iteration", "loss", "lr", "grad_norm", "accuracy"],
            &rows,
        )
    }

    /// Summary with final metrics; `wall_seconds` is the only timing field.
    pub fn summary(&self) -> serde_json::Value {
        let last = self.evals.last().map(|e| &e.report);
        serde_json::json!({
            "config_hash": self.config_hash,
            "iterations": self.losses.len(),
            "final_loss": self.final_loss(),
            "accuracy": last.map(|r| r.accuracy),
            "per_class": last.map(|r| r.per_class_accuracy()),
            "wall_seconds": self.wall_seconds,
        })
    }
}
