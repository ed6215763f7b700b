//! Per-round records, the JSONL log and the end-of-run summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub id: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Scalars uploaded by this client in this round.
    pub uploaded_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySnapshot {
    pub data: Vec<Vec<f64>>,
    pub model: Vec<Vec<f64>>,
    pub total: Vec<Vec<f64>>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub method: Method,
    pub clients: Vec<ClientRecord>,
    pub mean_accuracy: f64,
    pub worst_accuracy: f64,
    pub best_accuracy: f64,
    /// Aggregation weights (personalized aggregation only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilaritySnapshot>,
    /// Set when the similarity rows were all zero and clients kept their own cores.
    #[serde(default)]
    pub fell_back_to_local: bool,
}

pub(crate) fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// `(mean, worst, best)` of a non-empty list.
pub fn spread(values: &[f64]) -> (f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let worst = values.iter().copied().fold(f64::INFINITY, f64::min);
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, worst, best)
}

impl RoundRecord {
    pub fn accuracies(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.eval_accuracy).collect()
    }
}

/// Appends one JSON object per line.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, record: &RoundRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub upload_params_per_client_round: u64,
    pub total_upload_params: u64,
    pub total_upload_bytes: u64,
    pub total_download_params: u64,
    /// One-off mixture-summary upload (CE-LoRA only).
    pub gmm_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub mean_accuracy: f64,
    pub worst_accuracy: f64,
    pub best_accuracy: f64,
    pub final_accuracy: Vec<f64>,
    pub heterogeneity: f64,
    pub comm: CommSummary,
}

/// `client,accuracy` rows for the final round.
pub fn final_accuracy_csv(record: &RoundRecord) -> String {
    let mut s = String::from("client,accuracy\n");
    for c in &record.clients {
        s.push_str(&format!("{},{:?}\n", c.id, c.eval_accuracy));
    }
    s
}
