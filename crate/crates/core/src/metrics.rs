//! Release metrics: size, duration, fault rate, review frequency, customer
//! acceptance and change ratio per release, plus the report table and the
//! release-over-release trend check.
//!
//! Historical rows carry their fault rate as published; rows with a known
//! fault count derive it from `faults / KLOC`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

pub const RELEASES_FILE: &str = "releases.jsonl";
pub const REPORT_HEADER: &str = "Size  Time  Fault/KLOC  FTR  Acceptance  Change";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseRecord {
    pub index: u32,
    pub size_loc: u64,
    pub duration_months: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faults: Option<u64>,
    pub fault_rate_per_kloc: f64,
    pub ftr_frequency_pct: f64,
    pub acceptance_pct: f64,
    pub change_ratio_pct: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("lines of code must be positive")]
    ZeroLoc,
    #[error("trend needs at least two releases")]
    TooFewRecords,
    #[error("report line {line}: {message}")]
    BadReport { line: usize, message: String },
    #[error("release {index}: {message}")]
    InvalidRecord { index: u32, message: String },
}

pub fn fault_rate(faults: u64, loc: u64) -> Result<f64, MetricsError> {
    if loc == 0 {
        return Err(MetricsError::ZeroLoc);
    }
    Ok(faults as f64 * 1000.0 / loc as f64)
}

impl ReleaseRecord {
    /// A release with a known fault count; the rate is derived.
    pub fn measured(
        index: u32,
        size_loc: u64,
        duration_months: u32,
        faults: u64,
        ftr_frequency_pct: f64,
        acceptance_pct: f64,
        change_ratio_pct: f64,
    ) -> Result<Self, MetricsError> {
        Ok(ReleaseRecord {
            index,
            size_loc,
            duration_months,
            faults: Some(faults),
            fault_rate_per_kloc: fault_rate(faults, size_loc)?,
            ftr_frequency_pct,
            acceptance_pct,
            change_ratio_pct,
        })
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |message: &str| MetricsError::InvalidRecord {
            index: self.index,
            message: message.to_owned(),
        };
        if self.index == 0 {
            return Err(bad("index is 1-based"));
        }
        if self.size_loc == 0 {
            return Err(MetricsError::ZeroLoc);
        }
        let rate_ok = self.fault_rate_per_kloc.is_finite() && self.fault_rate_per_kloc >= 0.0;
        if !rate_ok {
            return Err(bad("fault rate must be a non-negative number"));
        }
        if let Some(f) = self.faults {
            if (fault_rate(f, self.size_loc)? - self.fault_rate_per_kloc).abs() > 1e-9 {
                return Err(bad("fault rate disagrees with fault count"));
            }
        }
        Ok(())
    }
}

fn pct(v: f64) -> String {
    format!("{v}%")
}

fn render_row(r: &ReleaseRecord) -> String {
    format!(
        "{}  {}  {:.2}  {}  {}  {}",
        r.size_loc,
        r.duration_months,
        r.fault_rate_per_kloc,
        pct(r.ftr_frequency_pct),
        pct(r.acceptance_pct),
        pct(r.change_ratio_pct)
    )
}

/// Header plus one row per release, in release order. Columns are
/// separated by two spaces; percentages print as in the source table
/// (`3%`, `1.75%`).
pub fn render_report(records: &[ReleaseRecord]) -> String {
    let mut sorted: Vec<&ReleaseRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.index);
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in sorted {
        let _ = writeln!(out, "{}", render_row(r));
    }
    out
}

/// Rows get indices 1, 2, ... in table order.
pub fn parse_report(text: &str) -> Result<Vec<ReleaseRecord>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => {
            return Err(MetricsError::BadReport {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let err = |message: &str| MetricsError::BadReport {
                line: i + 1,
                message: message.to_owned(),
            };
            let cols: Vec<&str> = line.split("  ").collect();
            let [size, time, rate, ftr, acc, change] = cols[..] else {
                return Err(err("expected 6 columns"));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            let pct = |s: &str| s.strip_suffix('%').ok_or_else(|| err("missing %")).and_then(num);
            Ok(ReleaseRecord {
                index: i as u32,
                size_loc: size.parse().map_err(|_| err("bad size"))?,
                duration_months: time.parse().map_err(|_| err("bad time"))?,
                faults: None,
                fault_rate_per_kloc: num(rate)?,
                ftr_frequency_pct: pct(ftr)?,
                acceptance_pct: pct(acc)?,
                change_ratio_pct: pct(change)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrendViolation {
    pub series: &'static str,
    /// Index (1-based release number) of the later release of the pair.
    pub release: u32,
}

/// Pass iff fault rate strictly decreases, acceptance never decreases and
/// change ratio never increases from one release to the next.
pub fn trend_check(records: &[ReleaseRecord]) -> Result<Vec<TrendViolation>, MetricsError> {
    if records.len() < 2 {
        return Err(MetricsError::TooFewRecords);
    }
    let mut out = Vec::new();
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let checks = [
            ("fault_rate", b.fault_rate_per_kloc < a.fault_rate_per_kloc),
            ("acceptance", b.acceptance_pct >= a.acceptance_pct),
            ("change_ratio", b.change_ratio_pct <= a.change_ratio_pct),
        ];
        for (series, ok) in checks {
            if !ok {
                out.push(TrendViolation {
                    series,
                    release: b.index,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{RELEASES_FILE}: {0}")]
    Format(#[from] JsonlError),
    #[error("{RELEASES_FILE}: {0}")]
    Invalid(#[from] MetricsError),
}

pub fn load_releases(dir: &Path) -> Result<Vec<ReleaseRecord>, LoadError> {
    let records: Vec<ReleaseRecord> = jsonl::parse(&std::fs::read_to_string(dir.join(RELEASES_FILE))?)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}
