//! Run reports and sweep tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::EvalMetrics;
use crate::error::Result;
use crate::model::HeadSite;
use crate::pruning::SparsityReport;

/// Table files of a run, relative to `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRefs {
    /// Per-head logit differences and gains.
    pub gains: String,
    /// Per-head probing-time components.
    pub components: String,
    pub probe_ranking: Option<String>,
}

/// Held-out results of one run. Serializes to the same bytes for the same
/// config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub dense: EvalMetrics,
    pub pruned: EvalMetrics,
    pub recovered: EvalMetrics,
    /// `(recovered − pruned) / (dense − pruned)` accuracy; absent when
    /// pruning cost nothing.
    pub gap_recovered: Option<f64>,
    pub selected_heads: Vec<HeadSite>,
    pub sparsity: SparsityReport,
    /// Mean component-training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub tables: TableRefs,
    pub config: ExperimentConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run {}", self.run_id);
        let _ = writeln!(s, "{:<10} {:>9} {:>11}", "model", "accuracy", "perplexity");
        for (name, m) in [("dense", &self.dense), ("pruned", &self.pruned), ("recovered", &self.recovered)] {
            let _ = writeln!(s, "{name:<10} {:>9.4} {:>11.4}", m.accuracy, m.perplexity);
        }
        match self.gap_recovered {
            Some(g) => {
                let _ = writeln!(s, "gap recovered {g:.4}");
            }
            None => s.push_str("gap recovered n/a\n"),
        }
        let heads: Vec<String> = self.selected_heads.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "heads {}", heads.join(" "));
        let _ = writeln!(
            s,
            "sparsity {:.4} overhead {:.6}",
            self.sparsity.global_sparsity, self.sparsity.overhead
        );
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    HeadFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub accuracy: f64,
    pub gap_recovered: Option<f64>,
    pub overhead: f64,
    pub run_id: String,
}

/// `value,accuracy,gap_recovered,overhead,run_id`.
pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let name = match axis {
        SweepAxis::K => "k",
        SweepAxis::HeadFraction => "head_fraction",
    };
    let mut s = format!("{name},accuracy,gap_recovered,overhead,run_id\n");
    for r in rows {
        let gap = r.gap_recovered.map(|g| format!("{g:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.6},{gap},{:.9},{}", r.value, r.accuracy, r.overhead, r.run_id);
    }
    s
}
