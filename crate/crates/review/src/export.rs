//! Unblinded analysis export and four-group summaries.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use impress_core::stats::{bootstrap_mean, paired_exceedance_test, two_sample_exceedance_test, BootstrapConfig, ExceedanceResult};

use crate::config::Dimension;
use crate::domain::Origin;
use crate::ReviewError;

pub const GROUPS: [&str; 4] = ["orig_own", "llm_own", "orig_other", "llm_other"];

pub fn group_label(origin: Origin, own_case: bool) -> &'static str {
    match (origin, own_case) {
        (Origin::Original, true) => GROUPS[0],
        (Origin::Generated, true) => GROUPS[1],
        (Origin::Original, false) => GROUPS[2],
        (Origin::Generated, false) => GROUPS[3],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRow {
    pub reader_id: String,
    pub session_id: String,
    pub case_id: String,
    pub report_id: String,
    pub origin: Origin,
    pub style_owner: String,
    pub own_case: bool,
    pub group: String,
    pub scores: BTreeMap<String, u8>,
    pub utility: u8,
    pub comment: String,
    pub submitted_at: String,
}

impl ExportRow {
    pub fn score(&self, key: &str) -> Option<f64> {
        if key == "utility" {
            Some(self.utility as f64)
        } else {
            self.scores.get(key).map(|v| *v as f64)
        }
    }
}

/// Fixed leading columns, one column per configured dimension in config
/// order, then utility and free text.
pub fn write_csv<W: Write>(rows: &[ExportRow], dimensions: &[Dimension], w: W) -> Result<(), ReviewError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = vec![
        "reader_id",
        "session_id",
        "case_id",
        "report_id",
        "origin",
        "style_owner",
        "own_case",
        "group",
    ];
    header.extend(dimensions.iter().map(|d| d.key.as_str()));
    header.extend(["utility", "comment", "submitted_at"]);
    out.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = vec![
            r.reader_id.clone(),
            r.session_id.clone(),
            r.case_id.clone(),
            r.report_id.clone(),
            r.origin.as_str().into(),
            r.style_owner.clone(),
            r.own_case.to_string(),
            r.group.clone(),
        ];
        rec.extend(
            dimensions
                .iter()
                .map(|d| r.scores.get(&d.key).map(u8::to_string).unwrap_or_default()),
        );
        rec.extend([r.utility.to_string(), r.comment.clone(), r.submitted_at.clone()]);
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| ReviewError::Io(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub score: String,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean and bootstrap CI of utility and each dimension per group. Groups
/// without assessments are omitted.
pub fn summarize(rows: &[ExportRow], dimensions: &[Dimension], cfg: BootstrapConfig) -> Result<Vec<GroupSummary>, ReviewError> {
    if rows.is_empty() {
        return Err(ReviewError::EmptyStudy);
    }
    let keys: Vec<&str> = std::iter::once("utility")
        .chain(dimensions.iter().map(|d| d.key.as_str()))
        .collect();
    let mut out = Vec::new();
    for group in GROUPS {
        for key in &keys {
            let values: Vec<f64> = rows.iter().filter(|r| r.group == group).filter_map(|r| r.score(key)).collect();
            if values.is_empty() {
                continue;
            }
            let b = bootstrap_mean(&values, cfg)?;
            out.push(GroupSummary {
                group: group.to_string(),
                score: key.to_string(),
                n: values.len(),
                mean: b.estimate,
                ci_low: b.ci_low,
                ci_high: b.ci_high,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupContrast {
    pub first: String,
    pub second: String,
    pub score: String,
    pub paired: bool,
    pub n_first: usize,
    pub n_second: usize,
    pub result: ExceedanceResult,
}

/// Compares `score` between two groups. When every case in both groups
/// has a partner for the same reader and report (original and generated
/// impressions of one report) the test is paired; otherwise the groups
/// are resampled independently.
pub fn contrast(rows: &[ExportRow], first: &str, second: &str, score: &str, cfg: BootstrapConfig) -> Result<GroupContrast, ReviewError> {
    let pick = |g: &str| -> BTreeMap<(String, String), f64> {
        rows.iter()
            .filter(|r| r.group == g)
            .filter_map(|r| r.score(score).map(|v| ((r.reader_id.clone(), r.report_id.clone()), v)))
            .collect()
    };
    let (a, b) = (pick(first), pick(second));
    if a.is_empty() || b.is_empty() {
        return Err(ReviewError::EmptyStudy);
    }
    let paired = a.len() == b.len() && a.keys().all(|k| b.contains_key(k));
    let result = if paired {
        let (x, y): (Vec<f64>, Vec<f64>) = a.iter().map(|(k, v)| (*v, b[k])).unzip();
        paired_exceedance_test(&x, &y, cfg)?
    } else {
        let x: Vec<f64> = a.values().copied().collect();
        let y: Vec<f64> = b.values().copied().collect();
        two_sample_exceedance_test(&x, &y, cfg)?
    };
    Ok(GroupContrast {
        first: first.to_string(),
        second: second.to_string(),
        score: score.to_string(),
        paired,
        n_first: a.len(),
        n_second: b.len(),
        result,
    })
}
