//! Plain-text tables with machine-readable JSON twins.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::error::Result;
use crate::inference::{mismatch_analysis, Conflict, InferenceMode, MismatchReport};
use crate::model::checkpoint::Checkpoint;
use crate::model::Heads;
use crate::train::{collect_logits, evaluate, ModeEval};

pub const ACCURACY_HEADERS: [&str; 5] = ["Model", "Accuracy (%)", "Epoch", "Inference Time", "# Params"];

pub const HIERARCHY_HEADERS: [&str; 5] = [
    "Model",
    "Super Accuracy (%)",
    "Serious Errors (%)",
    "Containment Violations",
    "Samples",
];

/// `40833976` → `40.8M`.
pub fn format_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

/// Per-sample seconds as milliseconds.
pub fn format_time(seconds: f64) -> String {
    format!("{:.3} ms", seconds * 1e3)
}

/// Pipe-separated table; columns padded to the widest cell.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(headers.to_vec());
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

fn provenance(digest: &str, seed: u64) -> String {
    format!("# config_digest={digest}\n# seed={seed}\n")
}

/// Evaluation of one checkpoint on one record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub seed: u64,
    pub model: String,
    pub epoch: usize,
    pub parameter_count: usize,
    pub dataset: String,
    pub rows: Vec<ModeEval>,
}

pub fn eval_report(ckpt: &Checkpoint, records: &[DatasetRecord], dataset: &str, modes: &[InferenceMode]) -> Result<EvalReport> {
    let rows = modes
        .iter()
        .map(|&m| evaluate(&ckpt.model, records, &ckpt.taxonomy, ckpt.meta.normalization, 128, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        config_digest: ckpt.meta.config_digest.clone(),
        seed: ckpt.meta.seed,
        model: ckpt.meta.config.name.clone(),
        epoch: ckpt.meta.epoch,
        parameter_count: ckpt.model.parameter_count(),
        dataset: dataset.to_string(),
        rows,
    })
}

impl EvalReport {
    fn row_label(mode: InferenceMode) -> String {
        format!("SG with {mode}")
    }

    /// The accuracy table followed by the hierarchy audit table.
    pub fn render(&self) -> String {
        let acc: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    Self::row_label(r.mode),
                    format!("{:.2}", r.metrics.finer_top1 * 100.0),
                    (self.epoch + 1).to_string(),
                    format_time(r.seconds_per_sample),
                    format_params(self.parameter_count),
                ]
            })
            .collect();
        let hier: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    Self::row_label(r.mode),
                    format!("{:.2}", r.metrics.super_top1 * 100.0),
                    format!("{:.2}", r.metrics.serious_error_rate * 100.0),
                    r.metrics.containment_violations.to_string(),
                    r.metrics.samples.to_string(),
                ]
            })
            .collect();
        let mut out = provenance(&self.config_digest, self.seed);
        let _ = writeln!(out, "# model={} dataset={}", self.model, self.dataset);
        out.push_str(&render_table(&ACCURACY_HEADERS, &acc));
        out.push('\n');
        out.push_str(&render_table(&HIERARCHY_HEADERS, &hier));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config_digest: String,
    pub seed: u64,
    pub model: String,
    pub epoch: usize,
    pub dataset: String,
    pub summary: MismatchReport,
    pub conflicts: Vec<Conflict>,
}

pub fn analysis_report(ckpt: &Checkpoint, records: &[DatasetRecord], dataset: &str) -> Result<AnalysisReport> {
    let l = collect_logits(&ckpt.model, records, ckpt.meta.normalization, 128, Heads::Both)?;
    let (summary, conflicts) = mismatch_analysis(&l.super_logits, &l.finer_logits, &l.labels, &ckpt.taxonomy)?;
    Ok(AnalysisReport {
        config_digest: ckpt.meta.config_digest.clone(),
        seed: ckpt.meta.seed,
        model: ckpt.meta.config.name.clone(),
        epoch: ckpt.meta.epoch,
        dataset: dataset.to_string(),
        summary,
        conflicts,
    })
}

impl AnalysisReport {
    /// The four-column mismatch table, then one line per conflicting sample
    /// (`index truth super_argmax finer_argmax tsi_finer`, names from `names`).
    pub fn render(&self, super_name: impl Fn(usize) -> String, finer_name: impl Fn(usize) -> String) -> String {
        let mut out = provenance(&self.config_digest, self.seed);
        let _ = writeln!(
            out,
            "# model={} dataset={} epoch={} samples={}",
            self.model,
            self.dataset,
            self.epoch + 1,
            self.summary.total_samples
        );
        let row = self.summary.row().iter().map(usize::to_string).collect();
        out.push_str(&render_table(&MismatchReport::HEADERS, &[row]));
        if !self.conflicts.is_empty() {
            out.push('\n');
            let rows: Vec<Vec<String>> = self
                .conflicts
                .iter()
                .map(|c| {
                    vec![
                        c.index.to_string(),
                        finer_name(c.truth),
                        super_name(c.super_argmax),
                        finer_name(c.finer_argmax),
                        finer_name(c.tsi_finer),
                    ]
                })
                .collect();
            out.push_str(&render_table(
                &["Sample", "Truth", "SC argmax", "FC argmax", "TSI finer"],
                &rows,
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_formatting() {
        assert_eq!(format_params(40_833_976), "40.8M");
        assert_eq!(format_params(34_006_948), "34.0M");
        assert_eq!(format_params(1_500), "1.5K");
        assert_eq!(format_params(12), "12");
    }

    #[test]
    fn table_layout() {
        let t = render_table(&["A", "Long header"], &[vec!["xyz".into(), "1".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "| A   | Long header |");
        assert_eq!(lines[1], "|-----|-------------|");
        assert_eq!(lines[2], "| xyz | 1           |");
    }
}
