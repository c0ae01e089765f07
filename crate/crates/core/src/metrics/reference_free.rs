//! Source-only statistics: compression, extractive fragment coverage and
//! density, novel bigrams, and source unigram overlap.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use super::lexical::{normalize, rouge_n};
use super::likelihood::{gen_score, GenDirection, SequenceScorer};

/// Greedy extractive fragments of `summary` found in `article`.
pub fn extractive_fragments<S: AsRef<str>>(article: &[S], summary: &[S]) -> Vec<usize> {
    let mut fragments = Vec::new();
    let mut i = 0;
    while i < summary.len() {
        let mut best = 0;
        for j in 0..article.len() {
            if summary[i].as_ref() == article[j].as_ref() {
                let mut k = 0;
                while i + k < summary.len() && j + k < article.len() && summary[i + k].as_ref() == article[j + k].as_ref() {
                    k += 1;
                }
                best = best.max(k);
            }
        }
        if best > 0 {
            fragments.push(best);
            i += best;
        } else {
            i += 1;
        }
    }
    fragments
}

pub fn compression_ratio(source_tokens: usize, hyp_tokens: usize) -> f64 {
    if hyp_tokens == 0 {
        0.0
    } else {
        source_tokens as f64 / hyp_tokens as f64
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ReferenceFreeScores {
    pub values: BTreeMap<String, f64>,
    /// Sub-metrics that could not be computed, with the reason.
    pub skipped: Vec<(String, String)>,
}

pub const REFERENCE_FREE_STATS: [&str; 5] = ["compression", "coverage", "density", "novel_bigrams", "source_overlap"];

pub fn reference_free_stat(name: &str, source: &[String], hyp: &[String]) -> Option<f64> {
    let n = hyp.len() as f64;
    Some(match name {
        "compression" => compression_ratio(source.len(), hyp.len()),
        "coverage" | "density" => {
            if hyp.is_empty() {
                return Some(0.0);
            }
            let frags = extractive_fragments(source, hyp);
            if name == "coverage" {
                frags.iter().sum::<usize>() as f64 / n
            } else {
                frags.iter().map(|f| (f * f) as f64).sum::<f64>() / n
            }
        }
        "novel_bigrams" => {
            if hyp.len() < 2 {
                return Some(0.0);
            }
            let src: HashSet<(&str, &str)> = source.windows(2).map(|w| (w[0].as_str(), w[1].as_str())).collect();
            let novel = hyp.windows(2).filter(|w| !src.contains(&(w[0].as_str(), w[1].as_str()))).count();
            novel as f64 / (hyp.len() - 1) as f64
        }
        "source_overlap" => rouge_n(hyp, source, 1).precision,
        _ => return None,
    })
}

/// All source-conditioned scores for one case. The likelihood sub-metric
/// is only present when a scorer is supplied.
pub fn reference_free_scores(source: &str, hypothesis: &str, scorer: Option<&dyn SequenceScorer>) -> ReferenceFreeScores {
    let src = normalize(source);
    let hyp = normalize(hypothesis);
    let mut out = ReferenceFreeScores::default();
    for name in REFERENCE_FREE_STATS {
        if let Some(v) = reference_free_stat(name, &src, &hyp) {
            out.values.insert(name.to_string(), v);
        }
    }
    match scorer {
        Some(s) => match gen_score(s, source, hypothesis, GenDirection::SrcToHyp) {
            Ok(v) => {
                out.values.insert("gen_src_hyp".into(), v);
            }
            Err(e) => out.skipped.push(("gen_src_hyp".into(), e.to_string())),
        },
        None => out.skipped.push(("gen_src_hyp".into(), "no scorer model supplied".into())),
    }
    for (name, reason) in &out.skipped {
        tracing::info!(metric = %name, %reason, "reference-free sub-metric skipped");
    }
    out
}
