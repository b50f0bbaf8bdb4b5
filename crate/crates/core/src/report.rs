//! Aggregation of run reports across seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::RunReport;

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// Session index, or `None` for the row of means over incremental sessions.
    pub session: Option<usize>,
    pub all: MeanStd,
    pub old: MeanStd,
    pub new: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AggregateRow>,
}

fn check_compatible(reports: &[RunReport]) -> Result<()> {
    let first = &reports[0];
    let mut reference = first.config.clone();
    reference.seed = 0;
    let shape = |r: &RunReport| -> Vec<(usize, usize, usize)> {
        r.sessions
            .iter()
            .map(|s| (s.metrics.n_all, s.metrics.n_old, s.metrics.n_new))
            .collect()
    };
    for (i, r) in reports.iter().enumerate().skip(1) {
        let mut cfg = r.config.clone();
        cfg.seed = 0;
        if cfg != reference {
            return Err(Error::IncompatibleReports(format!(
                "report {i} was produced with a different training config"
            )));
        }
        if shape(r) != shape(first) {
            return Err(Error::IncompatibleReports(format!(
                "report {i} has a different session layout"
            )));
        }
    }
    Ok(())
}

/// Per-session mean and std of All/Old/New, plus a final row with the means
/// over incremental sessions.
pub fn aggregate(reports: &[RunReport]) -> Result<AggregateTable> {
    if reports.is_empty() {
        return Err(Error::invalid("report aggregation needs at least one report"));
    }
    check_compatible(reports)?;
    let sessions = reports[0].sessions.len();
    let column = |f: &dyn Fn(&RunReport) -> f64| -> MeanStd {
        MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>())
    };
    let mut rows: Vec<AggregateRow> = (0..sessions)
        .map(|t| AggregateRow {
            session: Some(reports[0].sessions[t].session),
            all: column(&|r| r.sessions[t].metrics.acc_all),
            old: column(&|r| r.sessions[t].metrics.acc_old),
            new: column(&|r| r.sessions[t].metrics.acc_new),
        })
        .collect();
    rows.push(AggregateRow {
        session: None,
        all: column(&|r| r.session_means().0),
        old: column(&|r| r.session_means().1),
        new: column(&|r| r.session_means().2),
    });
    Ok(AggregateTable {
        seeds: reports.iter().map(|r| r.seed).collect(),
        rows,
    })
}

pub const AGGREGATE_CSV_HEADER: &str = "session,all_mean,all_std,old_mean,old_std,new_mean,new_std";

impl AggregateTable {
    /// One row per session; the trailing `mean` row holds mA/mO/mN.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{AGGREGATE_CSV_HEADER}\n");
        for r in &self.rows {
            let label = r.session.map_or("mean".to_string(), |s| s.to_string());
            writeln!(
                out,
                "{label},{},{},{},{},{},{}",
                r.all.mean, r.all.std, r.old.mean, r.old.std, r.new.mean, r.new.std
            )
            .unwrap();
        }
        out
    }

    /// Percent table in the `mean±std` style.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:>8} {:>14} {:>14} {:>14}\n", "session", "All", "Old", "New");
        let cell = |m: MeanStd| format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std);
        for r in &self.rows {
            let label = r.session.map_or("mean".to_string(), |s| s.to_string());
            writeln!(out, "{label:>8} {:>14} {:>14} {:>14}", cell(r.all), cell(r.old), cell(r.new)).unwrap();
        }
        out
    }
}
