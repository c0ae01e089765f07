//! Report records: loading, validation, PHI guard scanning and seeded splits.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate report_id {report_id:?} on line {line} (first seen on line {first_line})")]
    DuplicateId { report_id: String, first_line: usize, line: usize },
    #[error("split sizes {train}+{val}+{test} do not sum to corpus size {total}")]
    SizeMismatch {
        train: usize,
        val: usize,
        test: usize,
        total: usize,
    },
    #[error("invalid pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },
    #[error("serialization error: {0}")]
    Serialize(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortTag {
    Train,
    Val,
    Test,
    External,
}

/// One exam record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub exam_description: String,
    pub physician_id: String,
    pub findings: String,
    #[serde(default)]
    pub indications: String,
    pub impression: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_tag: Option<CohortTag>,
}

/// A single field-level invariant violation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldIssue {
    pub field: &'static str,
    pub message: String,
}

impl Report {
    pub fn validate(&self) -> Result<(), Vec<FieldIssue>> {
        let mut issues = Vec::new();
        let mut require = |field: &'static str, value: &str| {
            if value.trim().is_empty() {
                issues.push(FieldIssue {
                    field,
                    message: "must be non-empty".to_string(),
                });
            }
        };
        require("report_id", &self.report_id);
        require("physician_id", &self.physician_id);
        require("findings", &self.findings);
        require("impression", &self.impression);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One JSON object per line.
    Jsonl,
    /// Header row with the `Report` field names.
    Csv,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

/// A record that was skipped during loading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordIssue {
    pub line: usize,
    pub report_id: Option<String>,
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}", self.line)?;
        if let Some(id) = &self.report_id {
            write!(f, " ({id})")?;
        }
        write!(f, ": {}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub reports: Vec<Report>,
    pub issues: Vec<RecordIssue>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LoadedCorpus, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_corpus(BufReader::new(file), format).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::io(path, source),
        other => other,
    })
}

/// Reads records, keeping valid ones and collecting per-record issues.
/// Duplicate ids are a hard error.
pub fn read_corpus<R: BufRead>(reader: R, format: CorpusFormat) -> Result<LoadedCorpus, CorpusError> {
    let mut parsed: Vec<(usize, Result<Report, RecordIssue>)> = Vec::new();
    match format {
        CorpusFormat::Jsonl => {
            for (idx, line) in reader.lines().enumerate() {
                let line_no = idx + 1;
                let line = line.map_err(|source| CorpusError::Io {
                    path: "<reader>".into(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let record = serde_json::from_str::<Report>(&line).map_err(|e| RecordIssue {
                    line: line_no,
                    report_id: serde_json::from_str::<serde_json::Value>(&line)
                        .ok()
                        .and_then(|v| v.get("report_id").and_then(|r| r.as_str()).map(str::to_string)),
                    field: missing_field(&e.to_string()).unwrap_or("record").to_string(),
                    message: e.to_string(),
                });
                parsed.push((line_no, record));
            }
        }
        CorpusFormat::Csv => {
            let mut rdr = csv::Reader::from_reader(reader);
            for (idx, row) in rdr.deserialize::<CsvReport>().enumerate() {
                // header is line 1
                let line_no = idx + 2;
                let record = row.map(Report::from).map_err(|e| RecordIssue {
                    line: line_no,
                    report_id: None,
                    field: "record".into(),
                    message: e.to_string(),
                });
                parsed.push((line_no, record));
            }
        }
    }

    let mut out = LoadedCorpus::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line, record) in parsed {
        let report = match record {
            Ok(r) => r,
            Err(issue) => {
                out.issues.push(issue);
                continue;
            }
        };
        if let Some(&first_line) = seen.get(&report.report_id) {
            return Err(CorpusError::DuplicateId {
                report_id: report.report_id,
                first_line,
                line,
            });
        }
        seen.insert(report.report_id.clone(), line);
        match report.validate() {
            Ok(()) => out.reports.push(report),
            Err(issues) => out.issues.extend(issues.into_iter().map(|i| RecordIssue {
                line,
                report_id: Some(report.report_id.clone()),
                field: i.field.to_string(),
                message: i.message,
            })),
        }
    }
    Ok(out)
}

fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvReport {
    report_id: String,
    exam_description: String,
    physician_id: String,
    findings: String,
    #[serde(default)]
    indications: String,
    impression: String,
    #[serde(default)]
    cohort_tag: Option<CohortTag>,
}

impl From<CsvReport> for Report {
    fn from(r: CsvReport) -> Self {
        Report {
            report_id: r.report_id,
            exam_description: r.exam_description,
            physician_id: r.physician_id,
            findings: r.findings,
            indications: r.indications,
            impression: r.impression,
            cohort_tag: r.cohort_tag,
        }
    }
}

pub fn write_corpus(path: &Path, reports: &[Report], format: CorpusFormat) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus_to(&mut w, reports, format)?;
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn write_corpus_to<W: Write>(w: W, reports: &[Report], format: CorpusFormat) -> Result<(), CorpusError> {
    match format {
        CorpusFormat::Jsonl => {
            let mut w = w;
            for r in reports {
                serde_json::to_writer(&mut w, r).map_err(|e| CorpusError::Serialize(e.to_string()))?;
                w.write_all(b"\n").map_err(|source| CorpusError::Io {
                    path: "<writer>".into(),
                    source,
                })?;
            }
        }
        CorpusFormat::Csv => {
            let mut wtr = csv::Writer::from_writer(w);
            for r in reports {
                wtr.serialize(CsvReport {
                    report_id: r.report_id.clone(),
                    exam_description: r.exam_description.clone(),
                    physician_id: r.physician_id.clone(),
                    findings: r.findings.clone(),
                    indications: r.indications.clone(),
                    impression: r.impression.clone(),
                    cohort_tag: r.cohort_tag,
                })
                .map_err(|e| CorpusError::Serialize(e.to_string()))?;
            }
            wtr.flush().map_err(|source| CorpusError::Io {
                path: "<writer>".into(),
                source,
            })?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        SplitSizes { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// A partition of report ids. Serialized as the split manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl CorpusSplit {
    pub fn cohort_of(&self, report_id: &str) -> Option<CohortTag> {
        if self.train_ids.iter().any(|i| i == report_id) {
            Some(CohortTag::Train)
        } else if self.val_ids.iter().any(|i| i == report_id) {
            Some(CohortTag::Val)
        } else if self.test_ids.iter().any(|i| i == report_id) {
            Some(CohortTag::Test)
        } else {
            None
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), CorpusError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| CorpusError::Serialize(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| CorpusError::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Serialize(e.to_string()))
    }
}

/// Seeded shuffle of the ids (in input order), sliced train/val/test.
pub fn split_corpus(reports: &[Report], sizes: SplitSizes, seed: u64) -> Result<CorpusSplit, CorpusError> {
    if sizes.total() != reports.len() {
        return Err(CorpusError::SizeMismatch {
            train: sizes.train,
            val: sizes.val,
            test: sizes.test,
            total: reports.len(),
        });
    }
    let mut ids: Vec<String> = reports.iter().map(|r| r.report_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test_ids = ids.split_off(sizes.train + sizes.val);
    let val_ids = ids.split_off(sizes.train);
    Ok(CorpusSplit {
        seed,
        train_ids: ids,
        val_ids,
        test_ids,
    })
}

/// Uses ingestion cohort tags when every report carries one, otherwise
/// falls back to a seeded split. External-tagged reports land in none of
/// the three sets.
pub fn resolve_split(reports: &[Report], sizes: SplitSizes, seed: u64) -> Result<CorpusSplit, CorpusError> {
    if !reports.is_empty() && reports.iter().all(|r| r.cohort_tag.is_some()) {
        let mut split = CorpusSplit {
            seed,
            train_ids: vec![],
            val_ids: vec![],
            test_ids: vec![],
        };
        for r in reports {
            let id = r.report_id.clone();
            match r.cohort_tag {
                Some(CohortTag::Train) => split.train_ids.push(id),
                Some(CohortTag::Val) => split.val_ids.push(id),
                Some(CohortTag::Test) => split.test_ids.push(id),
                _ => {}
            }
        }
        return Ok(split);
    }
    split_corpus(reports, sizes, seed)
}

/// A pattern hit in one report field. Offsets are byte offsets into the field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PhiFinding {
    pub report_id: String,
    pub field: &'static str,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub pattern: String,
}

/// Date-like and identifier-like patterns suitable as a default guard.
pub const DEFAULT_PHI_PATTERNS: &[&str] = &[
    r"\b\d{1,2}/\d{1,2}/\d{2,4}\b",
    r"\b\d{4}-\d{2}-\d{2}\b",
    r"\b(?:MRN|mrn)[:#]?\s*\d+\b",
    r"\b\d{7,}\b",
    r"\(?\b\d{3}\)?[-. ]\d{3}[-. ]\d{4}\b",
];

pub fn compile_patterns(patterns: &[&str]) -> Result<Vec<Regex>, CorpusError> {
    patterns
        .iter()
        .map(|p| {
            Regex::new(p).map_err(|e| CorpusError::Pattern {
                pattern: p.to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Advisory scan; an empty result means the report passed.
pub fn phi_scan(report: &Report, patterns: &[&str]) -> Result<Vec<PhiFinding>, CorpusError> {
    let compiled = compile_patterns(patterns)?;
    Ok(phi_scan_compiled(report, &compiled))
}

pub fn phi_scan_compiled(report: &Report, patterns: &[Regex]) -> Vec<PhiFinding> {
    let fields: [(&'static str, &str); 4] = [
        ("exam_description", &report.exam_description),
        ("findings", &report.findings),
        ("indications", &report.indications),
        ("impression", &report.impression),
    ];
    let mut out = Vec::new();
    for (field, text) in fields {
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        for re in patterns {
            for m in re.find_iter(text) {
                if seen.insert((m.start(), m.end())) {
                    out.push(PhiFinding {
                        report_id: report.report_id.clone(),
                        field,
                        start: m.start(),
                        end: m.end(),
                        text: m.as_str().to_string(),
                        pattern: re.as_str().to_string(),
                    });
                }
            }
        }
    }
    out
}
