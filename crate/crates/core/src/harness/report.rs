use serde::{Deserialize, Serialize};

use super::{MeanStd, ResultBundle, SweepTable};

/// Comparison table over result bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub markdown: String,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub setting: String,
    pub seeds_ok: usize,
    pub seeds_total: usize,
    /// Dev-set metric means and spreads, keyed like [`super::flatten_metrics`].
    pub dev: std::collections::BTreeMap<String, MeanStd>,
}

/// Rate columns shown as percentages, in table order.
const RATE_COLUMNS: [(&str, &str); 8] = [
    ("cor_p", "Cor P"),
    ("cor_r", "Cor R"),
    ("cor_f05", "Cor F0.5"),
    ("exp_p", "Exp P"),
    ("exp_r", "Exp R"),
    ("exp_f1", "Exp F1"),
    ("exp_f05", "Exp F0.5"),
    ("type_acc", "Acc"),
];

/// Per-seed mean TP+FP totals.
const COUNT_COLUMNS: [(&str, &str); 2] = [("cor_predicted", "Pred. edits"), ("exp_predicted", "Pred. evidence")];

fn cell(m: Option<&MeanStd>, scale: f64, digits: usize) -> String {
    match m {
        None => "-".into(),
        Some(m) if m.n > 1 => format!("{:.digits$} ± {:.digits$}", m.mean * scale, m.std * scale),
        Some(m) => format!("{:.digits$}", m.mean * scale),
    }
}

fn header(first: &str) -> String {
    let mut cols = vec![first.to_string(), "Seeds".into()];
    cols.extend(RATE_COLUMNS.iter().map(|c| c.1.to_string()));
    cols.extend(COUNT_COLUMNS.iter().map(|c| c.1.to_string()));
    format!("| {} |\n|{}\n", cols.join(" | "), "---|".repeat(cols.len()))
}

fn line(first: &str, b: &ResultBundle) -> String {
    let mut cols = vec![first.to_string(), format!("{}/{}", b.succeeded(), b.seeds.len())];
    cols.extend(RATE_COLUMNS.iter().map(|c| cell(b.dev.get(c.0), 100.0, 2)));
    cols.extend(COUNT_COLUMNS.iter().map(|c| cell(b.dev.get(c.0), 1.0, 1)));
    format!("| {} |\n", cols.join(" | "))
}

/// Dev-set comparison of systems: percentages as mean ± std over seeds and
/// the number of predicted edits and evidence words per system.
pub fn render_report(bundles: &[ResultBundle]) -> Report {
    let mut md = header("System");
    let mut rows = Vec::with_capacity(bundles.len());
    for b in bundles {
        md += &line(&b.name, b);
        rows.push(ReportRow {
            system: b.name.clone(),
            setting: b.setting.clone(),
            seeds_ok: b.succeeded(),
            seeds_total: b.seeds.len(),
            dev: b.dev.clone(),
        });
    }
    let failed: Vec<String> = bundles
        .iter()
        .flat_map(|b| {
            b.seeds.iter().filter_map(move |s| match &s.outcome {
                super::SeedOutcome::Failed { error } => Some(format!("- {} seed {}: {error}", b.name, s.seed)),
                _ => None,
            })
        })
        .collect();
    if !failed.is_empty() {
        md += "\nFailed seeds:\n";
        md += &failed.join("\n");
        md.push('\n');
    }
    Report { markdown: md, rows }
}

pub fn render_sweep(table: &SweepTable) -> String {
    let mut md = header(table.param.symbol());
    for row in &table.rows {
        match &row.bundle {
            Some(b) => md += &line(&row.value.to_string(), b),
            None => md += &format!("| {} | failed: {} |\n", row.value, row.error.as_deref().unwrap_or("")),
        }
    }
    md
}
