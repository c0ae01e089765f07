//! Exam-level Deauville score extraction and agreement scoring.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Report;
use crate::stats::{bootstrap_ci_named, BootstrapConfig, BootstrapSummary, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeauvilleError {
    #[error("no cases to compare")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {0} outside 1-5")]
    OutOfRange(u8),
    #[error("weighted kappa undefined: expected disagreement is zero")]
    DegenerateKappa,
    #[error("no generated impression for {0:?}")]
    MissingGenerated(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// How the exam-level value was chosen among the mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Single,
    /// Mention attached to overall/summary wording.
    Overall,
    /// Largest of several mentions.
    Maximum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    /// Byte offsets into the impression text.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub ds: u8,
    pub rule_id: String,
    pub overall: bool,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeauvilleExtraction {
    pub report_id: String,
    pub ds: Option<u8>,
    pub evidence: Option<Evidence>,
    /// Pattern that produced the chosen mention.
    pub rule_id: Option<String>,
    pub resolution: Option<Resolution>,
    pub mentions: usize,
}

const NUM: &str = r"(?P<n>[1-5]|iv|v|i{1,3}|one|two|three|four|five)";
const NUM2: &str = r"(?:\s*(?:-|/|to|or)\s*(?P<m>[1-5]|iv|v|i{1,3}|one|two|three|four|five))?";

/// Ordered pattern cascade. Earlier rules win when spans overlap.
static RULES: LazyLock<Vec<(&'static str, Regex)>> = LazyLock::new(|| {
    let r = |p: String| Regex::new(&p).expect("deauville pattern");
    vec![
        (
            "deauville_score",
            r(format!(
                r"(?i)\bdeauville\s+(?:criteria\s+|5-point\s+scale\s+|five-point\s+scale\s+)?(?:score|grade|category)s?\s*(?:(?:is|was|of|=|:)\s*)*{NUM}\b{NUM2}\b"
            )),
        ),
        ("deauville_bare", r(format!(r"(?i)\bdeauville\s*(?:[:=]\s*)?{NUM}\b{NUM2}\b"))),
        (
            "ds_abbrev",
            r(format!(r"\bDS\s*(?:(?:is|was|of|=|:)\s*)*(?i:{NUM})\b(?i:{NUM2})\b")),
        ),
        (
            "score_on_deauville",
            r(format!(
                r"(?i)\b(?:score|grade|uptake)\s+(?:of\s+)?{NUM}\b{NUM2}\s+(?:on|by|per)\s+(?:the\s+)?deauville\b"
            )),
        ),
    ]
});

static OVERALL_BEFORE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:overall|in summary|summary|exam[- ]level|global(?:ly)?|final|highest)\b").expect("overall pattern")
});
static OVERALL_AFTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^\s*(?:overall|globally)\b").expect("overall pattern"));

fn numeral(s: &str) -> Option<u8> {
    Some(match s.to_ascii_lowercase().as_str() {
        "1" | "i" | "one" => 1,
        "2" | "ii" | "two" => 2,
        "3" | "iii" | "three" => 3,
        "4" | "iv" | "four" => 4,
        "5" | "v" | "five" => 5,
        _ => return None,
    })
}

/// Returns true when the regex of `rule_id` matches `text` in full.
pub fn evidence_rematches(rule_id: &str, text: &str) -> bool {
    RULES
        .iter()
        .find(|(id, _)| *id == rule_id)
        .and_then(|(_, re)| re.find(text))
        .is_some_and(|m| m.start() == 0 && m.end() == text.len())
}

fn clause_start(text: &str, at: usize) -> usize {
    text[..at].rfind(['.', ';', '\n']).map(|i| i + 1).unwrap_or(0)
}

/// All DS mentions in `text`, in text order.
pub fn find_mentions(text: &str) -> Vec<Mention> {
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::new();
    for (rule_id, re) in RULES.iter() {
        for caps in re.captures_iter(text) {
            let whole = caps.get(0).expect("group 0");
            if taken.iter().any(|&(s, e)| whole.start() < e && s < whole.end()) {
                continue;
            }
            // "Deauville 5-point scale" names the scale rather than a score.
            let rest = &text[whole.end()..];
            if rest.starts_with("-point") || rest.starts_with(" point") {
                continue;
            }
            let Some(first) = caps.name("n").and_then(|m| numeral(m.as_str())) else {
                continue;
            };
            let ds = caps.name("m").and_then(|m| numeral(m.as_str())).map_or(first, |m| m.max(first));
            let before = &text[clause_start(text, whole.start())..whole.start()];
            let overall = OVERALL_BEFORE.is_match(before) || OVERALL_AFTER.is_match(rest);
            taken.push((whole.start(), whole.end()));
            out.push(Mention {
                ds,
                rule_id: rule_id.to_string(),
                overall,
                evidence: Evidence {
                    start: whole.start(),
                    end: whole.end(),
                    text: whole.as_str().to_string(),
                },
            });
        }
    }
    out.sort_by_key(|m| m.evidence.start);
    out
}

/// Exam-level DS: an overall/summary mention wins (the largest if several),
/// otherwise the maximum over all mentions.
pub fn extract_ds(report_id: &str, text: &str) -> DeauvilleExtraction {
    let mentions = find_mentions(text);
    let overall: Vec<&Mention> = mentions.iter().filter(|m| m.overall).collect();
    let (pool, resolution) = match (mentions.len(), overall.is_empty()) {
        (1, _) => (mentions.iter().collect::<Vec<_>>(), Resolution::Single),
        (_, false) => (overall, Resolution::Overall),
        _ => (mentions.iter().collect(), Resolution::Maximum),
    };
    // Earliest among equal maxima, so the evidence is stable.
    let chosen = pool.into_iter().fold(None::<&Mention>, |best, m| match best {
        Some(b) if b.ds >= m.ds => Some(b),
        _ => Some(m),
    });
    DeauvilleExtraction {
        report_id: report_id.to_string(),
        ds: chosen.map(|m| m.ds),
        evidence: chosen.map(|m| m.evidence.clone()),
        rule_id: chosen.map(|m| m.rule_id.clone()),
        resolution: chosen.map(|_| resolution),
        mentions: mentions.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsCase {
    pub report_id: String,
    pub reference_ds: u8,
    pub extraction: DeauvilleExtraction,
}

/// Reports whose reference impression carries an exam-level DS.
pub fn filter_ds_cases(reports: &[Report]) -> Vec<DsCase> {
    reports
        .iter()
        .filter_map(|r| {
            let ex = extract_ds(&r.report_id, &r.impression);
            ex.ds.map(|ds| DsCase {
                report_id: r.report_id.clone(),
                reference_ds: ds,
                extraction: ex,
            })
        })
        .collect()
}

pub type Confusion = [[u64; 5]; 5];

/// `confusion[pred-1][ref-1]` counts.
pub fn confusion_matrix(pred: &[u8], reference: &[u8]) -> Result<Confusion, DeauvilleError> {
    if pred.len() != reference.len() {
        return Err(DeauvilleError::LengthMismatch(pred.len(), reference.len()));
    }
    let mut c = [[0u64; 5]; 5];
    for (&p, &r) in pred.iter().zip(reference) {
        for v in [p, r] {
            if !(1..=5).contains(&v) {
                return Err(DeauvilleError::OutOfRange(v));
            }
        }
        c[(p - 1) as usize][(r - 1) as usize] += 1;
    }
    Ok(c)
}

/// Linearly weighted kappa from a confusion matrix.
pub fn kappa_from_confusion(c: &Confusion) -> Result<f64, DeauvilleError> {
    let n: u64 = c.iter().flatten().sum();
    if n == 0 {
        return Err(DeauvilleError::Empty);
    }
    let rows: Vec<f64> = c.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..5).map(|j| c.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let nf = n as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..5 {
        for j in 0..5 {
            let w = (i as f64 - j as f64).abs() / 4.0;
            observed += w * c[i][j] as f64 / nf;
            expected += w * rows[i] * cols[j] / (nf * nf);
        }
    }
    if expected == 0.0 {
        return Err(DeauvilleError::DegenerateKappa);
    }
    Ok(1.0 - observed / expected)
}

pub fn weighted_kappa(pred: &[u8], reference: &[u8]) -> Result<f64, DeauvilleError> {
    if pred.is_empty() {
        return Err(DeauvilleError::Empty);
    }
    kappa_from_confusion(&confusion_matrix(pred, reference)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub report_id: String,
    pub reference_ds: u8,
    pub generated_ds: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    /// DS-bearing reference cases compared.
    pub n: usize,
    /// Exact matches over `n`; an absent generated DS counts as a miss.
    pub accuracy: f64,
    pub accuracy_ci: (f64, f64),
    /// Over the `n - generated_absent` cases with a generated DS.
    pub kappa_linear: Option<f64>,
    pub kappa_ci: Option<(f64, f64)>,
    pub kappa_degenerate: bool,
    pub kappa_n: usize,
    pub generated_absent: usize,
    /// `confusion[generated-1][reference-1]`, absent cases excluded.
    pub confusion: Confusion,
    pub cases: Vec<CaseOutcome>,
}

impl AgreementResult {
    pub fn write_summary_csv<W: Write>(&self, model: &str, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "model",
            "n",
            "accuracy",
            "accuracy_ci_low",
            "accuracy_ci_high",
            "kappa_linear",
            "kappa_ci_low",
            "kappa_ci_high",
            "kappa_n",
            "generated_absent",
        ])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        wtr.write_record([
            model.to_string(),
            self.n.to_string(),
            self.accuracy.to_string(),
            self.accuracy_ci.0.to_string(),
            self.accuracy_ci.1.to_string(),
            opt(self.kappa_linear),
            opt(self.kappa_ci.map(|c| c.0)),
            opt(self.kappa_ci.map(|c| c.1)),
            self.kappa_n.to_string(),
            self.generated_absent.to_string(),
        ])?;
        wtr.flush()
    }

    /// Rows are generated DS 1-5 plus `absent`, columns reference DS 1-5.
    pub fn write_confusion_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["generated", "ref_1", "ref_2", "ref_3", "ref_4", "ref_5"])?;
        for (i, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(row.iter().map(|c| c.to_string()));
            wtr.write_record(&rec)?;
        }
        let mut absent = vec![0u64; 5];
        for c in self.cases.iter().filter(|c| c.generated_ds.is_none()) {
            absent[(c.reference_ds - 1) as usize] += 1;
        }
        let mut rec = vec!["absent".to_string()];
        rec.extend(absent.iter().map(|c| c.to_string()));
        wtr.write_record(&rec)?;
        wtr.flush()
    }
}

fn accuracy_of(cases: &[(u8, Option<u8>)]) -> f64 {
    cases.iter().filter(|(r, g)| Some(*r) == *g).count() as f64 / cases.len() as f64
}

fn kappa_of(pairs: &[(u8, u8)]) -> f64 {
    let (p, r): (Vec<u8>, Vec<u8>) = pairs.iter().map(|&(r, g)| (g, r)).unzip();
    weighted_kappa(&p, &r).unwrap_or(f64::NAN)
}

/// Compares generated against reference impressions on the DS-bearing
/// reference cases. Inputs are keyed by report id; references without a DS
/// are ignored, and every remaining reference needs a generated impression.
pub fn ds_agreement(
    generated: &BTreeMap<String, String>,
    references: &BTreeMap<String, String>,
    config: BootstrapConfig,
) -> Result<AgreementResult, DeauvilleError> {
    let mut cases = Vec::new();
    for (id, text) in references {
        let Some(reference_ds) = extract_ds(id, text).ds else {
            continue;
        };
        let gen = generated.get(id).ok_or_else(|| DeauvilleError::MissingGenerated(id.clone()))?;
        cases.push(CaseOutcome {
            report_id: id.clone(),
            reference_ds,
            generated_ds: extract_ds(id, gen).ds,
        });
    }
    agreement_from_outcomes(cases, config)
}

/// Cases are sorted by report id first, so the intervals do not depend on
/// input order.
pub fn agreement_from_outcomes(mut cases: Vec<CaseOutcome>, config: BootstrapConfig) -> Result<AgreementResult, DeauvilleError> {
    cases.sort_by(|a, b| a.report_id.cmp(&b.report_id));
    if cases.is_empty() {
        return Err(DeauvilleError::Empty);
    }
    let all: Vec<(u8, Option<u8>)> = cases.iter().map(|c| (c.reference_ds, c.generated_ds)).collect();
    let present: Vec<(u8, u8)> = all.iter().filter_map(|&(r, g)| g.map(|g| (r, g))).collect();
    let mut confusion = [[0u64; 5]; 5];
    for &(r, g) in &present {
        confusion[(g - 1) as usize][(r - 1) as usize] += 1;
    }
    let acc: BootstrapSummary = bootstrap_ci_named("accuracy", &all, accuracy_of, config)?;
    let (kappa_linear, kappa_degenerate) = match kappa_from_confusion(&confusion) {
        Ok(k) => (Some(k), false),
        Err(DeauvilleError::DegenerateKappa) => (None, true),
        Err(_) => (None, false),
    };
    let kappa_ci = if kappa_linear.is_some() {
        bootstrap_ci_named("kappa_linear", &present, kappa_of, config)
            .ok()
            .map(|s| (s.ci_low, s.ci_high))
    } else {
        None
    };
    Ok(AgreementResult {
        n: all.len(),
        accuracy: acc.estimate,
        accuracy_ci: (acc.ci_low, acc.ci_high),
        kappa_linear,
        kappa_ci,
        kappa_degenerate,
        kappa_n: present.len(),
        generated_absent: all.len() - present.len(),
        confusion,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(text: &str) -> Option<u8> {
        extract_ds("r", text).ds
    }

    #[test]
    fn direct_phrases() {
        assert_eq!(ds("Residual nodal uptake, Deauville score 3."), Some(3));
        assert_eq!(ds("No abnormal uptake identified."), None);
        assert_eq!(ds("Deauville IV."), Some(4));
        assert_eq!(ds("DS of two"), Some(2));
    }

    #[test]
    fn overall_precedence() {
        let e = extract_ds("r", "Deauville 5 in the mediastinum; overall Deauville score 4.");
        assert_eq!(e.ds, Some(4));
        assert_eq!(e.resolution, Some(Resolution::Overall));
        assert_eq!(e.mentions, 2);
    }

    #[test]
    fn maximum_without_overall() {
        let e = extract_ds("r", "Cervical node Deauville 2. Splenic lesion Deauville 4.");
        assert_eq!(e.ds, Some(4));
        assert_eq!(e.resolution, Some(Resolution::Maximum));
    }

    #[test]
    fn scale_name_is_not_a_score() {
        assert_eq!(ds("Response assessed using the Deauville 5-point scale."), None);
    }

    #[test]
    fn evidence_rematches_its_rule() {
        let text = "Complete metabolic response, DS: 1.";
        let e = extract_ds("r", text);
        let ev = e.evidence.unwrap();
        assert_eq!(&text[ev.start..ev.end], ev.text);
        assert!(evidence_rematches(&e.rule_id.unwrap(), &ev.text));
    }

    #[test]
    fn kappa_perfect_and_degenerate() {
        assert_eq!(weighted_kappa(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5]).unwrap(), 1.0);
        assert_eq!(weighted_kappa(&[3, 3], &[3, 3]), Err(DeauvilleError::DegenerateKappa));
    }

    #[test]
    fn kappa_reversed_by_hand() {
        // O: all mass on the anti-diagonal, sum w*O = (4+2+0+2+4)/4/5 = 0.6.
        // E: uniform 1/25 per cell, sum w*E = 40/4/25 = 0.4.
        let k = weighted_kappa(&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1]).unwrap();
        assert!((k - (1.0 - 0.6 / 0.4)).abs() < 1e-12);
    }

    #[test]
    fn filter_counts() {
        let mk = |id: &str, imp: &str| Report {
            report_id: id.into(),
            exam_description: "PET".into(),
            physician_id: "P1".into(),
            findings: "f".into(),
            indications: String::new(),
            impression: imp.into(),
            cohort_tag: None,
        };
        let reports: Vec<Report> = (0..10)
            .map(|i| {
                if i < 4 {
                    mk(&format!("R{i}"), &format!("Deauville score {}.", i + 1))
                } else {
                    mk(&format!("R{i}"), "No suspicious uptake.")
                }
            })
            .collect();
        assert_eq!(filter_ds_cases(&reports).len(), 4);
        assert!(filter_ds_cases(&reports[4..]).is_empty());
    }

    #[test]
    fn identity_and_total_absence() {
        let refs: BTreeMap<String, String> = (0..12)
            .map(|i| (format!("R{i}"), format!("Nodes. Deauville score {}.", i % 5 + 1)))
            .collect();
        let cfg = BootstrapConfig {
            trials: 200,
            ..BootstrapConfig::with_seed(1)
        };
        let same = ds_agreement(&refs, &refs, cfg).unwrap();
        assert_eq!(same.accuracy, 1.0);
        assert_eq!(same.kappa_linear, Some(1.0));
        let stripped: BTreeMap<String, String> = refs.keys().map(|k| (k.clone(), "Nodes.".to_string())).collect();
        let none = ds_agreement(&stripped, &refs, cfg).unwrap();
        assert_eq!(none.accuracy, 0.0);
        assert_eq!(none.generated_absent, 12);
        assert_eq!(none.kappa_linear, None);
        assert!(ds_agreement(&refs, &BTreeMap::new(), cfg).is_err());
    }
}
