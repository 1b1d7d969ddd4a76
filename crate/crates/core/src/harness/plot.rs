//! Plot-ready summaries of a campaign directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::harness::campaign::{run_dir, SCORECARD_FILE, TIMING_FILE};
use crate::metrics::summarize;
use crate::model::Provenance;
use crate::table::{self, Table};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRACE_FILE: &str = "trace.csv";
/// Time steps exported in the representative filtering trace.
pub const TRACE_STEPS: usize = 30;

#[derive(Debug, Clone)]
pub struct PlotBundle {
    pub summary: PathBuf,
    /// Absent when no run left held-out estimates on disk.
    pub trace: Option<PathBuf>,
}

fn numeric(table: &Table, row: &[String], col: &str) -> Result<f64> {
    let i = table.column(col).ok_or_else(|| invalid(format!("column {col} missing")))?;
    row[i].parse::<f64>().map_err(|e| invalid(format!("column {col}: {e}")))
}

fn text<'a>(table: &Table, row: &'a [String], col: &str) -> Result<&'a str> {
    let i = table.column(col).ok_or_else(|| invalid(format!("column {col} missing")))?;
    Ok(&row[i])
}

type Key = (String, usize);

/// Reads campaign tables and writes `summary.csv` (mean, Q1, Q3 per
/// method, size and metric) plus `trace.csv` for one representative run.
///
/// Quartiles interpolate linearly between order statistics. Non-finite
/// values are left out of a summary.
pub fn emit_plot_data(results: &Path) -> Result<PlotBundle> {
    let cards_path = results.join(SCORECARD_FILE);
    if !cards_path.exists() {
        return Err(Error::EmptyCampaign(results.display().to_string()));
    }
    let cards = table::read_table(&cards_path)?;
    if cards.rows.is_empty() {
        return Err(Error::EmptyCampaign(results.display().to_string()));
    }
    let provenance = cards.provenance.clone().unwrap_or_default();

    let mut groups: BTreeMap<Key, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    let metrics = ["param_corr", "param_rmse", "state_mse", "objective_final"];
    for row in &cards.rows {
        let key = (text(&cards, row, "method")?.to_string(), numeric(&cards, row, "n")? as usize);
        let entry = groups.entry(key).or_default();
        for m in metrics {
            entry.entry(m).or_default().push(numeric(&cards, row, m)?);
        }
    }
    let timing_path = results.join(TIMING_FILE);
    if timing_path.exists() {
        let timings = table::read_table(&timing_path)?;
        for row in &timings.rows {
            let key = (text(&timings, row, "method")?.to_string(), numeric(&timings, row, "n")? as usize);
            groups
                .entry(key)
                .or_default()
                .entry("wall_time_per_iteration")
                .or_default()
                .push(numeric(&timings, row, "wall_time_per_iteration")?);
        }
    }

    let mut rows = Vec::new();
    for ((method, n), by_metric) in &groups {
        for (metric, values) in by_metric {
            let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
            let (mean, q1, q3) = summarize(&finite).map_or((f64::NAN, f64::NAN, f64::NAN), |s| (s.mean, s.q1, s.q3));
            rows.push(vec![
                method.clone(),
                n.to_string(),
                metric.to_string(),
                format!("{mean}"),
                format!("{q1}"),
                format!("{q3}"),
                finite.len().to_string(),
            ]);
        }
    }
    let summary = results.join(SUMMARY_FILE);
    let header: Vec<String> = ["method", "n", "metric", "mean", "q1", "q3", "count"].map(String::from).to_vec();
    table::write_rows(&summary, &provenance, &header, &rows)?;

    let trace = write_trace(results, &cards, &groups, &provenance)?;
    Ok(PlotBundle { summary, trace })
}

/// The run (largest size, preferring BP) whose parameter correlation is
/// nearest the group mean, exported for its first steps in long format.
fn write_trace(results: &Path, cards: &Table, groups: &BTreeMap<Key, BTreeMap<&str, Vec<f64>>>, provenance: &Provenance) -> Result<Option<PathBuf>> {
    let largest = groups.keys().map(|k| k.1).max().unwrap_or(0);
    let method = if groups.contains_key(&("bp".to_string(), largest)) {
        "bp".to_string()
    } else {
        match groups.keys().find(|k| k.1 == largest) {
            Some(k) => k.0.clone(),
            None => return Ok(None),
        }
    };
    let corrs: Vec<f64> = groups[&(method.clone(), largest)]["param_corr"]
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    let mean = if corrs.is_empty() { 0.0 } else { corrs.iter().sum::<f64>() / corrs.len() as f64 };
    let mut best: Option<(f64, usize)> = None;
    for row in &cards.rows {
        if text(cards, row, "method")? != method || numeric(cards, row, "n")? as usize != largest {
            continue;
        }
        let corr = numeric(cards, row, "param_corr")?;
        let dist = if corr.is_finite() { (corr - mean).abs() } else { f64::INFINITY };
        let rep = numeric(cards, row, "replicate")? as usize;
        if best.is_none_or(|(d, r)| dist < d || (dist == d && rep < r)) {
            best = Some((dist, rep));
        }
    }
    let Some((_, replicate)) = best else { return Ok(None) };
    let dir = run_dir(results, largest, replicate);
    let truth_path = dir.join("crossval_truth.csv");
    if !truth_path.exists() {
        return Ok(None);
    }
    let truth = table::read_series(&truth_path)?;
    let mut sources = vec![("truth".to_string(), truth)];
    let mut methods: Vec<&String> = groups.keys().filter(|k| k.1 == largest).map(|k| &k.0).collect();
    methods.sort();
    for m in methods {
        let p = dir.join(m).join("crossval_states.csv");
        if p.exists() {
            sources.push((m.clone(), table::read_series(&p)?));
        }
    }
    let mut rows = Vec::new();
    for (source, series) in &sources {
        for (t, x) in series.iter().take(TRACE_STEPS).enumerate() {
            for (node, v) in x.iter().enumerate() {
                rows.push(vec![(t + 1).to_string(), node.to_string(), source.clone(), format!("{v}")]);
            }
        }
    }
    let path = results.join(TRACE_FILE);
    let header: Vec<String> = ["t", "node", "source", "value"].map(String::from).to_vec();
    let prov = Provenance {
        config_hash: provenance.config_hash.clone(),
        seed: provenance.seed,
    };
    table::write_rows(&path, &prov, &header, &rows)?;
    Ok(Some(path))
}
