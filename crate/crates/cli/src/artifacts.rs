//! On-disk run artifacts shared by `train` and `analyze`.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sparseattn::model::{ModelConfig, TrainConfig, TrainRecord};
use sparseattn::schedule::SparsityConfig;

use crate::Failure;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const CHECKPOINT: &str = "checkpoint.bin";

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_name: String,
    pub model: ModelConfig,
    pub sparsity: SparsityConfig,
    pub training: TrainConfig,
    pub seed: u64,
    pub corpus_source: String,
    pub out_dir: String,
    pub tool_version: String,
}

/// Final results of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_name: String,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub param_count: usize,
    pub final_val_accuracy: f64,
    pub final_val_loss: f64,
    pub final_train_loss: f64,
    /// Scheduled target per layer.
    pub target_per_layer: Vec<f64>,
    pub target_mean: f64,
    /// Achieved sparsity of the final model on the validation split.
    pub per_layer_sparsity: Vec<f64>,
    pub per_layer_head_sparsity: Vec<Vec<f64>>,
    pub mean_sparsity: f64,
    pub per_layer_entropy: Vec<f64>,
    pub per_head_entropy: Vec<Vec<f64>>,
    pub mean_entropy: f64,
    pub entropy_base: String,
}

pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "epoch",
    "train_loss",
    "val_loss",
    "val_accuracy",
    "mean_sparsity",
    "mean_entropy",
];

/// Formats like C's `%.6g`.
pub fn fmt_g(v: f64) -> String {
    const SIG: i32 = 6;
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", (SIG - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..SIG).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (SIG - 1 - exp) as usize, v)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_metrics(path: &Path, records: &[TrainRecord]) -> Result<(), Failure> {
    let io = |e: csv::Error| Failure::data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            fmt_g(r.train_loss),
            fmt_g(r.val_loss),
            fmt_g(r.val_accuracy),
            fmt_g(r.mean_sparsity),
            fmt_g(r.mean_entropy),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}
