//! Synthetic PET/CT lymphoma reports in two dictation styles.
//!
//! Findings mention one to three hypermetabolic lesions followed by normal
//! organ-by-organ statements padded to a target word count. Impressions are
//! a deterministic function of the lesions and the physician's style, so a
//! model can learn them. A fixed number of references carry a Deauville
//! score sentence.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CohortTag, Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    /// Numbered list, full sentences, explicit negatives.
    Verbose,
    /// One short line per lesion.
    Terse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_reports: usize,
    /// References that carry a DS sentence (at most `n_reports`).
    pub n_ds: usize,
    pub physicians_per_style: usize,
    pub findings_words: (usize, usize),
    pub max_lesions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_reports: 200,
            n_ds: 0,
            physicians_per_style: 1,
            findings_words: (250, 500),
            max_lesions: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lesion {
    pub side: &'static str,
    pub site: &'static str,
    pub size_cm: f64,
    pub suv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub reports: Vec<Report>,
    pub styles: BTreeMap<String, Style>,
    /// Planted DS per report id.
    pub planted_ds: BTreeMap<String, u8>,
}

impl SyntheticCorpus {
    pub fn physicians_with(&self, style: Style) -> Vec<&str> {
        self.styles.iter().filter(|(_, s)| **s == style).map(|(p, _)| p.as_str()).collect()
    }
}

const SIDES: [&str; 3] = ["left", "right", "bilateral"];
const SITES: [&str; 8] = [
    "cervical lymph node",
    "supraclavicular lymph node",
    "axillary lymph node",
    "mediastinal lymph node",
    "hilar lymph node",
    "retroperitoneal lymph node",
    "iliac lymph node",
    "inguinal lymph node",
];
const EXAMS: [&str; 3] = ["PET/CT skull base to thigh", "PET/CT whole body", "PET/CT lymphoma restaging"];
const INDICATIONS: [&str; 5] = [
    "Hodgkin lymphoma, interim assessment after two cycles of chemotherapy.",
    "Diffuse large B-cell lymphoma, initial staging.",
    "Follicular lymphoma, restaging after therapy.",
    "Hodgkin lymphoma, end of treatment evaluation.",
    "",
];
const NORMAL: [&str; 16] = [
    "Physiologic uptake is seen in the brain, myocardium, liver, and urinary tract.",
    "The salivary glands and tonsils demonstrate symmetric physiologic activity.",
    "No hypermetabolic pulmonary nodules are identified.",
    "The lungs are clear without consolidation or effusion.",
    "The heart is normal in size and there is no pericardial effusion.",
    "The liver demonstrates homogeneous background activity without focal lesions.",
    "The spleen is normal in size with uptake below the liver.",
    "The adrenal glands are unremarkable.",
    "The pancreas and kidneys show no suspicious focal uptake.",
    "Bowel activity is physiologic and nonfocal.",
    "The bladder is unremarkable with expected excreted tracer.",
    "Bone marrow uptake is diffuse and homogeneous without focal lesions.",
    "No lytic or blastic osseous lesions are seen on the CT images.",
    "Degenerative changes are present in the lower lumbar spine.",
    "The thyroid gland shows no focal hypermetabolism.",
    "The visualized soft tissues are unremarkable.",
];

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn lesion_sentence(l: &Lesion) -> String {
    format!(
        "There is a hypermetabolic {} {} measuring {:.1} cm with SUVmax {:.1}.",
        l.side, l.site, l.size_cm, l.suv
    )
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Impression for `lesions` in `style`, with an optional DS sentence.
pub fn render_impression(lesions: &[Lesion], style: Style, ds: Option<u8>) -> String {
    match style {
        Style::Verbose => {
            let mut items: Vec<String> = lesions
                .iter()
                .map(|l| {
                    format!(
                        "Hypermetabolic {} {} measuring {:.1} cm with SUVmax {:.1}, consistent with active lymphoma.",
                        l.side, l.site, l.size_cm, l.suv
                    )
                })
                .collect();
            items.push("No other suspicious hypermetabolic foci are identified.".into());
            if let Some(ds) = ds {
                items.push(format!("Overall Deauville score {ds}."));
            }
            items
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{}. {}", i + 1, s))
                .collect::<Vec<_>>()
                .join("\n")
        }
        Style::Terse => {
            let mut parts: Vec<String> = lesions
                .iter()
                .map(|l| {
                    format!(
                        "{} {} node SUV {:.1}.",
                        capitalize(l.side),
                        l.site.split(' ').next().unwrap_or(""),
                        l.suv
                    )
                })
                .collect();
            if let Some(ds) = ds {
                parts.push(format!("DS {ds}."));
            }
            parts.join(" ")
        }
    }
}

fn sample_lesions(rng: &mut ChaCha8Rng, max: usize) -> Vec<Lesion> {
    let k = rng.random_range(1..=max.max(1));
    let mut sites: Vec<usize> = (0..SITES.len()).collect();
    sites.shuffle(rng);
    sites.truncate(k);
    sites.sort();
    sites
        .into_iter()
        .map(|s| Lesion {
            side: SIDES[rng.random_range(0..SIDES.len())],
            site: SITES[s],
            size_cm: round1(rng.random_range(0.8..4.5)),
            suv: round1(rng.random_range(2.5..18.0)),
        })
        .collect()
}

fn render_findings(rng: &mut ChaCha8Rng, lesions: &[Lesion], words: (usize, usize)) -> String {
    let target = rng.random_range(words.0..=words.1.max(words.0));
    let mut sentences: Vec<String> = lesions.iter().map(lesion_sentence).collect();
    let mut count: usize = sentences.iter().map(|s| s.split_whitespace().count()).sum();
    let mut pool: Vec<&str> = NORMAL.to_vec();
    pool.shuffle(rng);
    let mut i = 0;
    while count < target {
        let s = pool[i % pool.len()];
        let w = s.split_whitespace().count();
        // Stop short rather than overshoot the upper bound.
        if count + w > words.1.max(words.0) && count >= words.0 {
            break;
        }
        sentences.push(s.to_string());
        count += w;
        i += 1;
    }
    sentences.join(" ")
}

pub fn generate(config: &SynthConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut styles = BTreeMap::new();
    let per = config.physicians_per_style.max(1);
    for (i, style) in [Style::Verbose, Style::Terse].into_iter().enumerate() {
        for j in 0..per {
            styles.insert(format!("P{:02}", i * per + j + 1), style);
        }
    }
    let physicians: Vec<(String, Style)> = styles.iter().map(|(p, s)| (p.clone(), *s)).collect();

    let mut ds_flags = vec![false; config.n_reports];
    ds_flags.iter_mut().take(config.n_ds).for_each(|f| *f = true);
    ds_flags.shuffle(&mut rng);

    let mut reports = Vec::with_capacity(config.n_reports);
    let mut planted_ds = BTreeMap::new();
    for (i, has_ds) in ds_flags.into_iter().enumerate() {
        let report_id = format!("S{:05}", i + 1);
        let (physician, style) = &physicians[i % physicians.len()];
        let lesions = sample_lesions(&mut rng, config.max_lesions);
        let findings = render_findings(&mut rng, &lesions, config.findings_words);
        let ds = has_ds.then(|| rng.random_range(1..=5u8));
        if let Some(d) = ds {
            planted_ds.insert(report_id.clone(), d);
        }
        reports.push(Report {
            report_id,
            exam_description: EXAMS[rng.random_range(0..EXAMS.len())].to_string(),
            physician_id: physician.clone(),
            findings,
            indications: INDICATIONS[rng.random_range(0..INDICATIONS.len())].to_string(),
            impression: render_impression(&lesions, *style, ds),
            cohort_tag: None::<CohortTag>,
        });
    }
    SyntheticCorpus {
        reports,
        styles,
        planted_ds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deauville::{extract_ds, filter_ds_cases};

    #[test]
    fn findings_word_counts_in_range() {
        let c = generate(&SynthConfig {
            n_reports: 50,
            ..Default::default()
        });
        for r in &c.reports {
            let w = r.findings.split_whitespace().count();
            assert!((250..=500).contains(&w), "{w}");
            assert!(r.validate().is_ok());
        }
    }

    #[test]
    fn verbose_is_at_least_twice_terse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let l = sample_lesions(&mut rng, 3);
            let v = render_impression(&l, Style::Verbose, None).split_whitespace().count();
            let t = render_impression(&l, Style::Terse, None).split_whitespace().count();
            assert!(v >= 2 * t, "{v} vs {t}");
        }
    }

    #[test]
    fn planted_ds_recovered() {
        let c = generate(&SynthConfig {
            n_reports: 300,
            n_ds: 37,
            findings_words: (20, 40),
            seed: 4,
            ..Default::default()
        });
        let cases = filter_ds_cases(&c.reports);
        assert_eq!(cases.len(), 37);
        for case in cases {
            assert_eq!(Some(&case.reference_ds), c.planted_ds.get(&case.report_id));
        }
        for r in &c.reports {
            assert_eq!(extract_ds(&r.report_id, &r.findings).ds, None);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            n_reports: 20,
            seed: 11,
            ..Default::default()
        };
        assert_eq!(generate(&cfg), generate(&cfg));
    }
}
