//! Review cases, assessments and the client-facing payloads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use impress_core::corpus::Report;

use crate::config::Dimension;
use crate::ReviewError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Generated,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Original => "original",
            Origin::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ReviewError> {
        match s {
            "original" => Ok(Origin::Original),
            "generated" => Ok(Origin::Generated),
            other => Err(ReviewError::Validation(format!("unknown origin {other:?}"))),
        }
    }
}

/// A case in the pool with its server-side truth. `style_owner` is the
/// dictating physician; generated candidates are rendered in that
/// physician's style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewCase {
    pub case_id: String,
    pub report_id: String,
    pub findings: String,
    #[serde(default)]
    pub indications: String,
    pub candidate: String,
    pub origin: Origin,
    pub style_owner: String,
}

/// One original and, where available, one generated case per report.
pub fn build_pool(reports: &[Report], generated: &BTreeMap<String, String>) -> Vec<ReviewCase> {
    let mut pool = Vec::new();
    for r in reports {
        let case = |origin: Origin, candidate: &str| ReviewCase {
            case_id: format!("{}:{}", r.report_id, origin.as_str()),
            report_id: r.report_id.clone(),
            findings: r.findings.clone(),
            indications: r.indications.clone(),
            candidate: candidate.to_string(),
            origin,
            style_owner: r.physician_id.clone(),
        };
        pool.push(case(Origin::Original, &r.impression));
        if let Some(text) = generated.get(&r.report_id) {
            pool.push(case(Origin::Generated, text));
        }
    }
    pool
}

pub fn read_pool_jsonl(text: &str) -> Result<Vec<ReviewCase>, ReviewError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ReviewError::Validation(format!("pool line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub key: String,
    pub label: String,
    pub description: String,
    pub min: u8,
    pub max: u8,
}

/// What the client needs to render the scoring form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringSchema {
    pub dimensions: Vec<ScaleSpec>,
    pub utility: ScaleSpec,
    pub comment_required: bool,
}

pub const DIMENSION_RANGE: (u8, u8) = (1, 3);
pub const UTILITY_RANGE: (u8, u8) = (1, 5);

impl ScoringSchema {
    pub fn new(dimensions: &[Dimension]) -> Self {
        ScoringSchema {
            dimensions: dimensions
                .iter()
                .map(|d| ScaleSpec {
                    key: d.key.clone(),
                    label: d.label.clone(),
                    description: d.description.clone(),
                    min: DIMENSION_RANGE.0,
                    max: DIMENSION_RANGE.1,
                })
                .collect(),
            utility: ScaleSpec {
                key: "utility".into(),
                label: "Overall utility".into(),
                description: "How usable the impression is as written.".into(),
                min: UTILITY_RANGE.0,
                max: UTILITY_RANGE.1,
            },
            comment_required: false,
        }
    }
}

/// Client payload for one case. Deliberately carries nothing that
/// identifies who dictated the report or how the impression was made.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasePayload {
    pub case_id: String,
    pub position: usize,
    pub total: usize,
    pub findings: String,
    pub indications: String,
    pub impression: String,
    pub schema: ScoringSchema,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextCase {
    Case(CasePayload),
    Complete { total: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub case_id: String,
    pub scores: BTreeMap<String, u8>,
    pub utility: u8,
    #[serde(default)]
    pub comment: String,
}

impl Submission {
    /// Every configured dimension present and within range, no unknown
    /// keys, utility within range.
    pub fn validate(&self, dimensions: &[Dimension]) -> Result<(), ReviewError> {
        for d in dimensions {
            match self.scores.get(&d.key) {
                None => return Err(ReviewError::Validation(format!("dimension {:?} is missing", d.key))),
                Some(v) if !(DIMENSION_RANGE.0..=DIMENSION_RANGE.1).contains(v) => {
                    return Err(ReviewError::Validation(format!(
                        "dimension {:?} score {v} outside {}-{}",
                        d.key, DIMENSION_RANGE.0, DIMENSION_RANGE.1
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(k) = self.scores.keys().find(|k| !dimensions.iter().any(|d| &d.key == *k)) {
            return Err(ReviewError::Validation(format!("unknown dimension {k:?}")));
        }
        if !(UTILITY_RANGE.0..=UTILITY_RANGE.1).contains(&self.utility) {
            return Err(ReviewError::Validation(format!(
                "utility score {} outside {}-{}",
                self.utility, UTILITY_RANGE.0, UTILITY_RANGE.1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acknowledgment {
    pub case_id: String,
    /// Cases scored so far in this session.
    pub scored: usize,
    pub total: usize,
    /// True when this replaced an earlier assessment of the same case.
    pub replaced: bool,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub session_id: String,
    pub cursor: usize,
    pub total: usize,
    pub complete: bool,
}
