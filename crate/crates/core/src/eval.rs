//! Held-out evaluation and the k / β ablation harness.
//!
//! Preference accuracy is the fraction of pairs whose implicit-reward margin
//! favors the chosen response, with ties counted as one half.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::align::{alignment_scores, select_top_k, selection_stats};
use crate::corpus::{split_dataset, PreferenceDataset};
use crate::error::{Error, Result};
use crate::fsio;
use crate::policy::BigramPolicy;
use crate::train::{train_with, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub mean_margin: f64,
    pub wins: usize,
    pub ties: usize,
    pub pairs: usize,
}

pub fn preference_accuracy(
    policy: &BigramPolicy,
    reference: &BigramPolicy,
    dataset: &PreferenceDataset,
    beta: f64,
) -> Result<AccuracyReport> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::validation("beta", format!("must be positive, got {beta}")));
    }
    let pol = policy.log_prob_table();
    let rf = reference.log_prob_table();
    let (mut wins, mut ties, mut margin_sum) = (0usize, 0usize, 0.0);
    for pair in &dataset.pairs {
        let rw = pol.token_log_probs(&pair.prompt, &pair.chosen).sum()
            - rf.token_log_probs(&pair.prompt, &pair.chosen).sum();
        let rl = pol.token_log_probs(&pair.prompt, &pair.rejected).sum()
            - rf.token_log_probs(&pair.prompt, &pair.rejected).sum();
        let margin = beta * (rw - rl);
        if margin > 0.0 {
            wins += 1;
        } else if margin == 0.0 {
            ties += 1;
        }
        margin_sum += margin;
    }
    let n = dataset.len();
    Ok(AccuracyReport {
        accuracy: (wins as f64 + 0.5 * ties as f64) / n as f64,
        mean_margin: margin_sum / n as f64,
        wins,
        ties,
        pairs: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionQuality {
    pub precision: f64,
    pub recall: f64,
    pub pairs: usize,
}

/// Mean selection precision/recall of freshly computed masks against the
/// corpus annotations.
pub fn selection_quality_report(
    policy: &BigramPolicy,
    reference: &BigramPolicy,
    dataset: &PreferenceDataset,
    k_percent: f64,
) -> Result<SelectionQuality> {
    if !dataset.is_annotated() {
        return Err(Error::Config(
            "selection quality needs divergent_positions on every pair; use a generated corpus".into(),
        ));
    }
    let pol = policy.log_prob_table();
    let rf = reference.log_prob_table();
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for pair in &dataset.pairs {
        let scores = alignment_scores(
            &rf.token_log_probs(&pair.prompt, &pair.chosen),
            &pol.token_log_probs(&pair.prompt, &pair.chosen),
            &rf.token_log_probs(&pair.prompt, &pair.rejected),
            &pol.token_log_probs(&pair.prompt, &pair.rejected),
        )?;
        let mask = select_top_k(&scores, k_percent)?;
        let s = selection_stats(&mask, pair)?;
        p_sum += s.precision;
        r_sum += s.recall;
    }
    let n = dataset.len() as f64;
    Ok(SelectionQuality {
        precision: p_sum / n,
        recall: r_sum / n,
        pairs: dataset.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub preference_accuracy: f64,
    pub mean_margin: f64,
    pub selection_precision: Option<f64>,
    pub selection_recall: Option<f64>,
    pub k_percent: f64,
    pub pairs: usize,
}

/// Accuracy on any dataset, plus selection quality when annotations exist.
pub fn evaluate(
    policy: &BigramPolicy,
    reference: &BigramPolicy,
    dataset: &PreferenceDataset,
    beta: f64,
    k_percent: f64,
) -> Result<EvalReport> {
    let acc = preference_accuracy(policy, reference, dataset, beta)?;
    let sel = if dataset.is_annotated() {
        Some(selection_quality_report(policy, reference, dataset, k_percent)?)
    } else {
        crate::align::validate_k_percent(k_percent)?;
        None
    };
    Ok(EvalReport {
        preference_accuracy: acc.accuracy,
        mean_margin: acc.mean_margin,
        selection_precision: sel.map(|s| s.precision),
        selection_recall: sel.map(|s| s.recall),
        k_percent,
        pairs: acc.pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TopKPercent,
    Beta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::TopKPercent => "top_k_percent",
            SweepAxis::Beta => "beta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub preference_accuracy: Option<f64>,
    pub selection_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub k_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    pub heldout_fraction: f64,
    pub split_seed: u64,
}

fn check_increasing(name: &str, values: &[f64]) -> Result<()> {
    if values
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::validation(name, "values must be strictly increasing"));
    }
    Ok(())
}

/// Trains one cell per value from the same initial policy and evaluates
/// each on the held-out split. Accuracy is scored against `initial`,
/// selection precision against the training `reference`. A failing cell
/// records its error and the remaining cells still run.
pub fn sweep(
    dataset: &PreferenceDataset,
    base: &TrainConfig,
    initial: &BigramPolicy,
    reference: &BigramPolicy,
    spec: &SweepSpec,
) -> Result<Vec<SweepTable>> {
    if spec.k_values.is_empty() && spec.beta_values.is_empty() {
        return Err(Error::validation("sweep", "give at least one k or beta value"));
    }
    check_increasing("k_values", &spec.k_values)?;
    check_increasing("beta_values", &spec.beta_values)?;
    let (train_set, heldout) = split_dataset(dataset, spec.heldout_fraction, spec.split_seed)?;

    let mut base = base.clone();
    base.metrics_path = None;
    base.checkpoint_path = None;

    let run_cell = |config: &TrainConfig| -> Result<(f64, Option<f64>)> {
        let report = train_with(&train_set, config, initial.clone(), reference)?;
        let acc = preference_accuracy(&report.policy, initial, &heldout, config.beta)?;
        let precision = if heldout.is_annotated() {
            Some(selection_quality_report(&report.policy, reference, &heldout, config.k_percent)?.precision)
        } else {
            None
        };
        Ok((acc.accuracy, precision))
    };
    let run_axis = |axis: SweepAxis, values: &[f64]| -> SweepTable {
        let rows = values
            .iter()
            .map(|&value| {
                let mut cfg = base.clone();
                match axis {
                    SweepAxis::TopKPercent => cfg.k_percent = value,
                    SweepAxis::Beta => cfg.beta = value,
                }
                match run_cell(&cfg) {
                    Ok((acc, prec)) => SweepRow {
                        value,
                        preference_accuracy: Some(acc),
                        selection_precision: prec,
                        error: None,
                    },
                    Err(e) => SweepRow {
                        value,
                        preference_accuracy: None,
                        selection_precision: None,
                        error: Some(format!("{}={value}: {e}", axis.name())),
                    },
                }
            })
            .collect();
        SweepTable {
            axis,
            rows,
            config: base.clone(),
        }
    };

    let mut tables = Vec::new();
    if !spec.k_values.is_empty() {
        tables.push(run_axis(SweepAxis::TopKPercent, &spec.k_values));
    }
    if !spec.beta_values.is_empty() {
        tables.push(run_axis(SweepAxis::Beta, &spec.beta_values));
    }
    Ok(tables)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Aligned text tables for humans and line-delimited JSON for tools.
pub fn render_report(tables: &[SweepTable]) -> (String, String) {
    let mut text = String::new();
    let mut machine = String::new();
    for (i, table) in tables.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let axis = table.axis.name();
        let width = axis.len().max(8);
        writeln!(
            text,
            "{axis:<width$}  {:>19}  {:>19}",
            "preference_accuracy", "selection_precision"
        )
        .unwrap();
        for row in &table.rows {
            write!(
                text,
                "{:<width$}  {:>19}  {:>19}",
                row.value,
                fmt_opt(row.preference_accuracy),
                fmt_opt(row.selection_precision)
            )
            .unwrap();
            if let Some(e) = &row.error {
                write!(text, "  error: {e}").unwrap();
            }
            text.push('\n');
        }

        writeln!(machine, "{}", json!({ "table": axis, "config": table.config })).unwrap();
        for row in &table.rows {
            let mut obj = serde_json::to_value(row).expect("row serializes");
            obj.as_object_mut().unwrap().insert("axis".into(), json!(axis));
            writeln!(machine, "{obj}").unwrap();
        }
    }
    (text, machine)
}

/// Inverse of the machine-readable half of [`render_report`].
pub fn parse_report(text: &str, path: &Path) -> Result<Vec<SweepTable>> {
    let err = |line: usize, field: &str, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        field: field.into(),
        message,
    };
    let mut tables: Vec<SweepTable> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| err(i + 1, "<record>", e.to_string()))?;
        if let Some(axis) = v.get("table") {
            let axis: SweepAxis =
                serde_json::from_value(axis.clone()).map_err(|e| err(i + 1, "table", e.to_string()))?;
            let config: TrainConfig = serde_json::from_value(v.get("config").cloned().unwrap_or(Value::Null))
                .map_err(|e| err(i + 1, "config", e.to_string()))?;
            tables.push(SweepTable {
                axis,
                rows: Vec::new(),
                config,
            });
        } else {
            let row: SweepRow = serde_json::from_value(v).map_err(|e| err(i + 1, "<row>", e.to_string()))?;
            tables
                .last_mut()
                .ok_or_else(|| err(i + 1, "table", "row before any table header".into()))?
                .rows
                .push(row);
        }
    }
    Ok(tables)
}

pub fn save_report(tables: &[SweepTable], path: &Path) -> Result<()> {
    fsio::write_atomic(path, render_report(tables).1.as_bytes())
}
