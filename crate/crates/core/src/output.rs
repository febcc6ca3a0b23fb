//! Persistent experiment artifacts: the metrics CSV, the per-round plan log
//! (JSON lines), and the scheme-comparison summary table.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One evaluated round in the metrics CSV.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub cumulative_latency_s: f64,
    pub t_d_s: f64,
    pub t_c_s: f64,
    pub t_u_s: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub scheme: String,
    pub seed: u64,
}

pub const METRICS_HEADER: &str =
    "round,cumulative_latency_s,t_d_s,t_c_s,t_u_s,train_loss,test_accuracy,scheme,seed";

impl MetricsRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.cumulative_latency_s,
            self.t_d_s,
            self.t_c_s,
            self.t_u_s,
            self.train_loss,
            self.test_accuracy,
            self.scheme,
            self.seed
        )
    }
}

/// One layer's line in a client's plan-log entry.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlanLayerEntry {
    pub layer: String,
    pub m: u32,
    /// Normalized importance weight in effect when the plan was chosen.
    pub weight: f64,
    pub d_k: usize,
    /// Planner's expected squared update error at the chosen level.
    pub predicted_error: f64,
    pub ber: f64,
}

/// One client's chosen plan for one round.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlanLogEntry {
    pub round: u32,
    pub client: usize,
    pub layers: Vec<PlanLayerEntry>,
    pub numerator: f64,
    pub denominator: f64,
    pub score: f64,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(contents.as_bytes()).map_err(io_err)
}

/// Write `metrics.csv` and `plans.jsonl` into `out_dir` (created if absent).
pub fn write_outputs(rows: &[MetricsRow], plans: &[PlanLogEntry], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for row in rows {
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    write_file(&out_dir.join("metrics.csv"), &csv)?;

    let mut jsonl = String::new();
    for entry in plans {
        jsonl.push_str(
            &serde_json::to_string(entry)
                .map_err(|e| Error::format(format!("plan log serialization: {e}")))?,
        );
        jsonl.push('\n');
    }
    write_file(&out_dir.join("plans.jsonl"), &jsonl)
}

/// One scheme's result in the comparison summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEntry {
    pub scheme: String,
    /// Round and cumulative latency when the target was first met, if ever.
    pub reached: Option<(u32, f64)>,
    pub final_accuracy: f64,
}

/// Render the scheme-comparison table: per-scheme latency to the target
/// accuracy plus the headline saving of the layerwise scheme over the
/// model-wide AM baseline.
pub fn render_summary(entries: &[SummaryEntry], target_accuracy: f64) -> String {
    let mut text = format!("latency to reach test accuracy >= {target_accuracy}\n\n");
    text.push_str(&format!(
        "{:<12} {:>8} {:>8} {:>16} {:>11}\n",
        "scheme", "reached", "rounds", "latency_s", "final_acc"
    ));
    for e in entries {
        match e.reached {
            Some((round, latency)) => text.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>16.3} {:>11.4}\n",
                e.scheme, "yes", round, latency, e.final_accuracy
            )),
            None => text.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>16} {:>11.4}\n",
                e.scheme, "no", "-", "-", e.final_accuracy
            )),
        }
    }
    let lat = |name: &str| {
        entries
            .iter()
            .find(|e| e.scheme == name)
            .and_then(|e| e.reached.map(|(_, l)| l))
    };
    if let (Some(ours), Some(am)) = (lat("layerwise"), lat("am")) {
        if am > 0.0 {
            text.push_str(&format!(
                "\nsaving (layerwise vs am): {:.1}%\n",
                (1.0 - ours / am) * 100.0
            ));
        }
    }
    text
}

/// Write `summary.txt` for a comparison run.
pub fn write_summary(entries: &[SummaryEntry], target_accuracy: f64, path: &Path) -> Result<()> {
    write_file(path, &render_summary(entries, target_accuracy))
}
