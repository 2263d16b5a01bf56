//! CSV/SVG report emission.
//!
//! Every CSV has a header row, uses `.` as decimal separator and `\n` line
//! endings. Floats are printed with Rust's shortest round-trip formatting, so
//! reports are byte-stable for a given state. Missing values are empty cells.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::history::{EvalRecord, RunHistory};
use super::pipeline::RunState;
use super::svg::{render_tradeoff, Series};
use crate::error::{Error, Result};
use crate::pruner::SparsityReport;

pub const SPARSITY_CSV: &str = "sparsity.csv";
pub const EXITS_CSV: &str = "exits.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const HULL_CSV: &str = "hull.csv";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const CONFIG_ECHO: &str = "config.echo";
pub const TRADEOFF_SVG: &str = "tradeoff.svg";

/// The CSV files a completed run produces.
pub const CSV_FILES: [&str; 5] = [SPARSITY_CSV, EXITS_CSV, CURVE_CSV, HULL_CSV, ROUNDS_CSV];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sparsity_csv(report: &SparsityReport) -> String {
    let mut s = String::from("layer,role,total,nnz,sparsity\n");
    for r in report.rows.iter().chain(std::iter::once(&report.global)) {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.param.layer_name, r.param.role.as_str(), r.total, r.nnz, r.sparsity
        );
    }
    s
}

pub fn exits_csv(history: &RunHistory) -> String {
    let mut s = String::from("round,phase,exit_index,forced_accuracy,cumulative_flops\n");
    for e in &history.evaluations {
        for (j, acc) in e.forced_accuracy.iter().enumerate() {
            if let Some(acc) = acc {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    e.round,
                    e.phase.as_str(),
                    j,
                    acc,
                    e.cumulative_cost[j]
                );
            }
        }
    }
    s
}

fn exit_count(history: &RunHistory) -> usize {
    history
        .evaluations
        .first()
        .map_or(0, |e| e.forced_accuracy.len())
}

pub fn curve_csv(history: &RunHistory) -> String {
    let k = exit_count(history);
    let mut s = String::from("round,threshold,accuracy,expected_flops");
    for j in 0..k {
        let _ = write!(s, ",exit_fraction_{j}");
    }
    s.push('\n');
    for e in &history.evaluations {
        for p in &e.points {
            let _ = write!(s, "{},{},{},{}", e.round, p.threshold, p.accuracy, p.expected_flops);
            for f in &p.exit_fractions {
                let _ = write!(s, ",{f}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn hull_csv(history: &RunHistory) -> String {
    let mut s = String::from("round,vertex_flops,vertex_accuracy\n");
    for e in &history.evaluations {
        for (f, a) in &e.hull {
            let _ = writeln!(s, "{},{},{}", e.round, f, a);
        }
    }
    s
}

pub fn rounds_csv(history: &RunHistory) -> String {
    let k = exit_count(history);
    let mut s = String::from(
        "round,phase,global_sparsity,scope_sparsity,newly_masked,loss_first,loss_last,loss_mean",
    );
    for j in 0..k {
        let _ = write!(s, ",pre_accuracy_exit_{j}");
    }
    for j in 0..k {
        let _ = write!(s, ",post_accuracy_exit_{j}");
    }
    s.push('\n');
    for r in &history.rounds {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.phase.as_str(),
            r.global_sparsity,
            r.scope_sparsity,
            r.newly_masked,
            opt(r.loss_first),
            opt(r.loss_last),
            opt(r.loss_mean)
        );
        for a in r.pre_accuracy.iter().chain(&r.post_accuracy) {
            let _ = write!(s, ",{}", opt(*a));
        }
        s.push('\n');
    }
    s
}

/// Baseline and final curves of a run, for plotting.
fn curve_series(history: &RunHistory) -> Vec<Series> {
    let with_curve: Vec<&EvalRecord> = history
        .evaluations
        .iter()
        .filter(|e| !e.points.is_empty())
        .collect();
    let mut series = Vec::new();
    let mut push = |e: &EvalRecord, label: String, color: &str| {
        series.push(Series {
            label,
            color: color.to_string(),
            points: e.points.iter().map(|p| (p.expected_flops, p.accuracy)).collect(),
            line: e.hull.clone(),
        });
    };
    if let Some(first) = with_curve.first() {
        push(first, format!("before pruning (round {})", first.round), "#000000");
    }
    if with_curve.len() > 1 {
        let last = with_curve[with_curve.len() - 1];
        push(last, format!("after round {}", last.round), "#d62728");
    }
    series
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes every report for `state` into `dir` and returns the written paths.
pub fn emit_reports(state: &RunState, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let history = &state.history;
    let report = crate::pruner::sparsity_report(state.net.params(), &state.masks);
    let title = format!("Approach {}: accuracy vs expected FLOPs", state.config.approach.number());
    let files = [
        (SPARSITY_CSV, sparsity_csv(&report)),
        (EXITS_CSV, exits_csv(history)),
        (CURVE_CSV, curve_csv(history)),
        (HULL_CSV, hull_csv(history)),
        (ROUNDS_CSV, rounds_csv(history)),
        (CONFIG_ECHO, state.config.to_text()),
        (TRADEOFF_SVG, render_tradeoff(&title, &curve_series(history))),
    ];
    files
        .iter()
        .map(|(name, contents)| write_file(dir, name, contents))
        .collect()
}
