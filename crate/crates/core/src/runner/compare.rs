//! Side-by-side comparison of two completed runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::reports::{CONFIG_ECHO, CURVE_CSV, EXITS_CSV};
use super::svg::{render, Series};
use crate::error::{Error, Result};
use crate::flopsmeter::{time_share_envelope, OperatingPoint, TradeoffCurve};

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const EXITS_COMPARISON_CSV: &str = "exits_comparison.csv";
pub const ENVELOPES_CSV: &str = "envelopes.csv";
pub const SUMMARY_TXT: &str = "comparison_summary.txt";
pub const COMPARISON_SVG: &str = "comparison.svg";

/// Number of matched accuracy levels in `comparison.csv`.
pub const ACCURACY_LEVELS: usize = 11;
/// Envelopes closer than this at the highest common budget count as "close".
pub const CLOSE_ACCURACY: f64 = 0.02;

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::data(format!("{} is empty", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(Error::data(format!(
                    "{} line {}: {} cells, header has {}",
                    path.display(),
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("missing column {name}")))
    }
}

fn num<T: std::str::FromStr>(cell: &str, what: &str) -> Result<T> {
    cell.parse()
        .map_err(|_| Error::data(format!("bad {what} value {cell:?}")))
}

/// Forced-exit accuracy of one evaluation, as read back from `exits.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitSnapshot {
    pub round: u32,
    pub phase: String,
    /// `(exit_index, forced_accuracy)`.
    pub accuracy: Vec<(usize, f64)>,
}

/// What `compare_runs` needs from one run directory.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    /// First evaluation with all heads attached (the "before pruning" curve).
    pub baseline: TradeoffCurve,
    pub final_curve: TradeoffCurve,
    pub baseline_round: u32,
    pub final_round: u32,
    pub exit_baseline: ExitSnapshot,
    pub exit_final: ExitSnapshot,
}

fn read_curves(path: &Path) -> Result<Vec<(u32, Vec<OperatingPoint>)>> {
    let csv = Csv::read(path)?;
    let (c_round, c_t, c_acc, c_f) = (
        csv.column("round")?,
        csv.column("threshold")?,
        csv.column("accuracy")?,
        csv.column("expected_flops")?,
    );
    let frac_cols: Vec<usize> = (0..)
        .map_while(|j| csv.column(&format!("exit_fraction_{j}")).ok())
        .collect();
    let mut curves: Vec<(u32, Vec<OperatingPoint>)> = Vec::new();
    for row in &csv.rows {
        let round: u32 = num(&row[c_round], "round")?;
        let point = OperatingPoint {
            threshold: num(&row[c_t], "threshold")?,
            accuracy: num(&row[c_acc], "accuracy")?,
            expected_flops: num(&row[c_f], "expected_flops")?,
            exit_fractions: frac_cols
                .iter()
                .map(|&c| num(&row[c], "exit_fraction"))
                .collect::<Result<_>>()?,
        };
        match curves.last_mut() {
            Some((r, pts)) if *r == round => pts.push(point),
            _ => curves.push((round, vec![point])),
        }
    }
    Ok(curves)
}

fn read_exits(path: &Path) -> Result<Vec<ExitSnapshot>> {
    let csv = Csv::read(path)?;
    let (c_round, c_phase, c_exit, c_acc) = (
        csv.column("round")?,
        csv.column("phase")?,
        csv.column("exit_index")?,
        csv.column("forced_accuracy")?,
    );
    let mut snaps: Vec<ExitSnapshot> = Vec::new();
    for row in &csv.rows {
        let round: u32 = num(&row[c_round], "round")?;
        let phase = &row[c_phase];
        let entry = (num(&row[c_exit], "exit_index")?, num(&row[c_acc], "forced_accuracy")?);
        match snaps.last_mut() {
            Some(s) if s.round == round && &s.phase == phase => s.accuracy.push(entry),
            _ => snaps.push(ExitSnapshot {
                round,
                phase: phase.clone(),
                accuracy: vec![entry],
            }),
        }
    }
    Ok(snaps)
}

/// Reads the artifacts of a completed run directory.
pub fn load_run_summary(dir: &Path) -> Result<RunSummary> {
    let echo = dir.join(CONFIG_ECHO);
    let text = fs::read_to_string(&echo).map_err(|e| Error::io(&echo, e))?;
    let config = ExperimentConfig::parse(&text)?;
    let curves = read_curves(&dir.join(CURVE_CSV))?;
    let (Some(first), Some(last)) = (curves.first().cloned(), curves.last().cloned()) else {
        return Err(Error::data(format!("{} has no curve rows", dir.display())));
    };
    let snaps = read_exits(&dir.join(EXITS_CSV))?;
    let exit_baseline = snaps
        .iter()
        .find(|s| s.phase == "baseline")
        .cloned()
        .ok_or_else(|| Error::data(format!("{} has no baseline exits", dir.display())))?;
    let exit_final = snaps.last().cloned().expect("baseline exists");
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        config,
        baseline_round: first.0,
        final_round: last.0,
        baseline: time_share_envelope(first.1)?,
        final_curve: time_share_envelope(last.1)?,
        exit_baseline,
        exit_final,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelRow {
    pub accuracy_level: f64,
    pub flops_a1: f64,
    pub flops_a2: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<LevelRow>,
    /// Run 1 needs no more FLOPs than run 2 at the lowest common level;
    /// `None` without a common accuracy range.
    pub a1_cheaper_at_low_accuracy: Option<bool>,
    pub highest_common_budget: f64,
    /// `|acc1 − acc2|` at the highest common budget, when both reach it.
    pub accuracy_gap_at_budget: Option<f64>,
    pub close_at_high_accuracy: Option<bool>,
    /// Mean expected FLOPs over the threshold grid, baseline vs final,
    /// for each run.
    pub mean_flops: [(f64, f64); 2],
    pub summary: String,
}

fn mean_flops(curve: &TradeoffCurve) -> f64 {
    curve.points.iter().map(|p| p.expected_flops).sum::<f64>() / curve.points.len() as f64
}

/// Matches the final envelopes of two runs at evenly spaced accuracy levels.
pub fn compare_summaries(a: &RunSummary, b: &RunSummary) -> Result<Comparison> {
    if a.config.network != b.config.network {
        return Err(Error::Comparison(format!(
            "{} and {} use different network configurations",
            a.dir.display(),
            b.dir.display()
        )));
    }
    let (c1, c2) = (&a.final_curve, &b.final_curve);
    let lo = c1.min_accuracy().max(c2.min_accuracy());
    let hi = c1.max_accuracy().min(c2.max_accuracy());
    let mut rows = Vec::new();
    if lo <= hi {
        for i in 0..ACCURACY_LEVELS {
            let level = if i + 1 == ACCURACY_LEVELS {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (ACCURACY_LEVELS - 1) as f64
            };
            if let (Some(f1), Some(f2)) = (c1.flops_for(level), c2.flops_for(level)) {
                rows.push(LevelRow {
                    accuracy_level: level,
                    flops_a1: f1,
                    flops_a2: f2,
                    ratio: if f2 > 0.0 { f1 / f2 } else { f64::NAN },
                });
            }
        }
    }
    let a1_cheaper_at_low_accuracy = rows.first().map(|r| r.flops_a1 <= r.flops_a2);
    let budget = c1.max_flops().min(c2.max_flops());
    let accuracy_gap_at_budget = match (c1.accuracy_at(budget), c2.accuracy_at(budget)) {
        (Some(x), Some(y)) => Some((x - y).abs()),
        _ => None,
    };
    let close_at_high_accuracy = accuracy_gap_at_budget.map(|g| g <= CLOSE_ACCURACY);
    let mean = [
        (mean_flops(&a.baseline), mean_flops(c1)),
        (mean_flops(&b.baseline), mean_flops(c2)),
    ];

    let mut s = String::new();
    let flag = |v: Option<bool>| match v {
        Some(true) => "yes",
        Some(false) => "no (flagged)",
        None => "undetermined",
    };
    let _ = writeln!(s, "run_1: {} (approach {}, final round {})", a.dir.display(), a.config.approach.number(), a.final_round);
    let _ = writeln!(s, "run_2: {} (approach {}, final round {})", b.dir.display(), b.config.approach.number(), b.final_round);
    let _ = writeln!(s, "common_accuracy_range: {lo} .. {hi}");
    let _ = writeln!(s, "matched_levels: {}", rows.len());
    let _ = writeln!(
        s,
        "run_1_flops_le_run_2_at_lowest_level: {}",
        flag(a1_cheaper_at_low_accuracy)
    );
    if let Some(r) = rows.first() {
        let _ = writeln!(s, "  level {} : {} vs {} (ratio {})", r.accuracy_level, r.flops_a1, r.flops_a2, r.ratio);
    }
    let _ = writeln!(s, "highest_common_budget: {budget}");
    match accuracy_gap_at_budget {
        Some(g) => {
            let _ = writeln!(s, "accuracy_gap_at_budget: {g}");
        }
        None => {
            let _ = writeln!(s, "accuracy_gap_at_budget: undetermined");
        }
    }
    let _ = writeln!(
        s,
        "within_{}_points_at_budget: {}",
        CLOSE_ACCURACY * 100.0,
        flag(close_at_high_accuracy)
    );
    for (k, (base, fin)) in mean.iter().enumerate() {
        let _ = writeln!(
            s,
            "observation run_{}: mean expected FLOPs over thresholds {} at round {} -> {} at round {} ({})",
            k + 1,
            base,
            [a.baseline_round, b.baseline_round][k],
            fin,
            [a.final_round, b.final_round][k],
            if fin > base { "up" } else if fin < base { "down" } else { "unchanged" }
        );
    }
    Ok(Comparison {
        rows,
        a1_cheaper_at_low_accuracy,
        highest_common_budget: budget,
        accuracy_gap_at_budget,
        close_at_high_accuracy,
        mean_flops: mean,
        summary: s,
    })
}

fn comparison_csv(c: &Comparison) -> String {
    let mut s = String::from("accuracy_level,flops_a1,flops_a2,ratio\n");
    for r in &c.rows {
        let _ = writeln!(s, "{},{},{},{}", r.accuracy_level, r.flops_a1, r.flops_a2, r.ratio);
    }
    s
}

fn exits_comparison_csv(a: &RunSummary, b: &RunSummary) -> String {
    let mut s = String::from("run,stage,round,exit_index,forced_accuracy\n");
    for (k, run) in [a, b].iter().enumerate() {
        for (stage, snap) in [("baseline", &run.exit_baseline), ("final", &run.exit_final)] {
            for (j, acc) in &snap.accuracy {
                let _ = writeln!(s, "{},{},{},{},{}", k + 1, stage, snap.round, j, acc);
            }
        }
    }
    s
}

fn envelopes_csv(a: &RunSummary, b: &RunSummary) -> String {
    let mut s = String::from("run,stage,vertex_flops,vertex_accuracy\n");
    for (k, run) in [a, b].iter().enumerate() {
        for (stage, curve) in [("baseline", &run.baseline), ("final", &run.final_curve)] {
            for v in &curve.hull {
                let _ = writeln!(s, "{},{},{},{}", k + 1, stage, v.flops, v.accuracy);
            }
        }
    }
    s
}

fn series(run: &RunSummary, label: &str, color: &str) -> Series {
    Series {
        label: format!("{label} (approach {})", run.config.approach.number()),
        color: color.to_string(),
        points: run
            .final_curve
            .points
            .iter()
            .map(|p| (p.expected_flops, p.accuracy))
            .collect(),
        line: run.final_curve.hull.iter().map(|v| (v.flops, v.accuracy)).collect(),
    }
}

/// Compares two completed run directories and writes the comparison
/// artifacts into `out`.
pub fn compare_runs(run_1: &Path, run_2: &Path, out: &Path) -> Result<Comparison> {
    let a = load_run_summary(run_1)?;
    let b = load_run_summary(run_2)?;
    let c = compare_summaries(&a, &b)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let svg = render(
        "Final envelopes",
        "expected FLOPs per sample",
        "accuracy",
        &[series(&a, "run 1", "#1f77b4"), series(&b, "run 2", "#d62728")],
    );
    for (name, contents) in [
        (COMPARISON_CSV, comparison_csv(&c)),
        (EXITS_COMPARISON_CSV, exits_comparison_csv(&a, &b)),
        (ENVELOPES_CSV, envelopes_csv(&a, &b)),
        (SUMMARY_TXT, c.summary.clone()),
        (COMPARISON_SVG, svg),
    ] {
        let path = out.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    }
    Ok(c)
}
