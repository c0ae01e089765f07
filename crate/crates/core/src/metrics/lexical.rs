//! N-gram and sequence overlap metrics over a shared normalization.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

/// Lowercase, split punctuation from words, drop whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}]+|[^\s\p{L}\p{N}]").expect("normalizer regex"));
    let lower = text.to_lowercase();
    re.find_iter(&lower).map(|m| m.as_str().to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f: 0.0,
    };

    pub fn from_counts(matched: usize, hyp_total: usize, ref_total: usize) -> Prf {
        if matched == 0 || hyp_total == 0 || ref_total == 0 {
            return Prf::ZERO;
        }
        Prf::from_pr(matched as f64 / hyp_total as f64, matched as f64 / ref_total as f64)
    }

    pub fn from_pr(precision: f64, recall: f64) -> Prf {
        let f = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f }
    }
}

pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

fn clipped_overlap(h: &HashMap<Vec<&str>, usize>, r: &HashMap<Vec<&str>, usize>) -> usize {
    h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum()
}

pub fn rouge_n<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> Prf {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = clipped_overlap(&h, &r);
    Prf::from_counts(matched, hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: F is the harmonic mean of LCS precision and recall.
pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Prf {
    Prf::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

/// Sentence BLEU-4 with uniform weights and the brevity penalty.
/// Orders above one use add-one smoothing of numerator and denominator
/// so short or partially matching hypotheses do not collapse to zero.
pub fn bleu<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    const MAX_ORDER: usize = 4;
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matched = clipped_overlap(&h, &r) as f64;
        let total = hyp.len().saturating_sub(n - 1) as f64;
        let p = if n == 1 { matched / total } else { (matched + 1.0) / (total + 1.0) };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / MAX_ORDER as f64;
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// chrF with character n-grams up to 6 and beta = 2; whitespace is
/// removed before counting. Orders for which either side has no n-grams
/// are left out of the average.
pub fn chrf<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    const MAX_ORDER: usize = 6;
    const BETA: f64 = 2.0;
    let h: Vec<char> = hyp.iter().flat_map(|t| t.as_ref().chars()).collect();
    let r: Vec<char> = reference.iter().flat_map(|t| t.as_ref().chars()).collect();
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=MAX_ORDER {
        if h.len() < n || r.len() < n {
            continue;
        }
        let hc = char_ngrams(&h, n);
        let rc = char_ngrams(&r, n);
        let matched: usize = hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
        p_sum += matched as f64 / (h.len() - n + 1) as f64;
        r_sum += matched as f64 / (r.len() - n + 1) as f64;
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let (p, rc) = (p_sum / orders as f64, r_sum / orders as f64);
    let b2 = BETA * BETA;
    if p + rc == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * rc / (b2 * p + rc)
    }
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    for w in chars.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// METEOR-style score using exact unigram matches only.
///
/// Each hypothesis token is aligned to an unused reference token with the
/// same form, preferring the position right after the previous alignment
/// so contiguous runs stay in one chunk.
pub fn meteor<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    const ALPHA: f64 = 0.9;
    const BETA: f64 = 3.0;
    const GAMMA: f64 = 0.5;
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    let mut last: Option<usize> = None;
    for (i, h) in hyp.iter().enumerate() {
        let h = h.as_ref();
        let next = last
            .map(|j| j + 1)
            .filter(|&j| j < reference.len() && !used[j] && reference[j].as_ref() == h);
        let chosen = next.or_else(|| (0..reference.len()).find(|&j| !used[j] && reference[j].as_ref() == h));
        if let Some(j) = chosen {
            used[j] = true;
            alignment.push((i, j));
            last = Some(j);
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = GAMMA * (chunks as f64 / m as f64).powf(BETA);
    fmean * (1.0 - penalty)
}

/// Document frequencies of reference n-grams (orders 1..=4) for the
/// TF-IDF n-gram cosine.
#[derive(Debug, Clone, Default)]
pub struct CiderContext {
    doc_freq: HashMap<Vec<String>, usize>,
    num_docs: usize,
}

impl CiderContext {
    pub const MAX_ORDER: usize = 4;

    pub fn from_references<I, T>(references: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[String]>,
    {
        let mut ctx = CiderContext::default();
        for r in references {
            let r = r.as_ref();
            ctx.num_docs += 1;
            for n in 1..=Self::MAX_ORDER {
                for g in ngram_counts(r, n).into_keys() {
                    *ctx.doc_freq.entry(g.into_iter().map(str::to_string).collect()).or_insert(0) += 1;
                }
            }
        }
        ctx
    }

    /// Smoothed IDF, strictly positive so a one-document context still works.
    fn idf(&self, gram: &[&str]) -> f64 {
        let key: Vec<String> = gram.iter().map(|s| s.to_string()).collect();
        let df = self.doc_freq.get(&key).copied().unwrap_or(0) as f64;
        ((1.0 + self.num_docs as f64) / (1.0 + df)).ln() + 1.0
    }

    /// Mean over orders of the cosine between TF-IDF vectors; orders where
    /// neither side has n-grams are skipped.
    pub fn score<S: AsRef<str>>(&self, hyp: &[S], reference: &[S]) -> f64 {
        let mut total = 0.0;
        let mut orders = 0usize;
        for n in 1..=Self::MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            if h.is_empty() && r.is_empty() {
                continue;
            }
            orders += 1;
            if h.is_empty() || r.is_empty() {
                continue;
            }
            let weight = |g: &Vec<&str>, c: usize| c as f64 * self.idf(g);
            let hv: HashMap<&Vec<&str>, f64> = h.iter().map(|(g, c)| (g, weight(g, *c))).collect();
            let rv: HashMap<&Vec<&str>, f64> = r.iter().map(|(g, c)| (g, weight(g, *c))).collect();
            let dot: f64 = hv.iter().map(|(g, w)| w * rv.get(g).copied().unwrap_or(0.0)).sum();
            let hn = hv.values().map(|w| w * w).sum::<f64>().sqrt();
            let rn = rv.values().map(|w| w * w).sum::<f64>().sqrt();
            total += dot / (hn * rn);
        }
        if orders == 0 {
            0.0
        } else {
            total / orders as f64
        }
    }
}

pub const LEXICAL_METRICS: [&str; 7] = ["rouge1", "rouge2", "rougeL", "bleu", "chrf", "meteor", "cider"];

/// All lexical metrics for one pair, on raw `[0, 1]` scales. CIDEr uses a
/// context built from this single reference.
pub fn lexical_metrics(hypothesis: &str, reference: &str) -> BTreeMap<&'static str, f64> {
    let h = normalize(hypothesis);
    let r = normalize(reference);
    let cider = CiderContext::from_references([&r]);
    BTreeMap::from([
        ("rouge1", rouge_n(&h, &r, 1).f),
        ("rouge2", rouge_n(&h, &r, 2).f),
        ("rougeL", rouge_l(&h, &r).f),
        ("bleu", bleu(&h, &r)),
        ("chrf", chrf(&h, &r)),
        ("meteor", meteor(&h, &r)),
        ("cider", cider.score(&h, &r)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        normalize(s)
    }

    #[test]
    fn normalizer_splits_punctuation() {
        assert_eq!(
            toks("SUVmax 7.2, Left-sided."),
            vec!["suvmax", "7", ".", "2", ",", "left", "-", "sided", "."]
        );
    }

    #[test]
    fn rouge_l_hand_case() {
        let h = toks("the cat sat on the mat");
        let r = toks("the cat lay on a mat");
        assert_eq!(lcs_len(&h, &r), 4);
        let s = rouge_l(&h, &r);
        assert!((s.precision - 4.0 / 6.0).abs() < 1e-12);
        assert!((s.recall - 4.0 / 6.0).abs() < 1e-12);
        assert!((s.f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_disjoint() {
        let t = "Hypermetabolic cervical adenopathy, Deauville score 4.";
        let m = lexical_metrics(t, t);
        for k in ["rouge1", "rouge2", "rougeL", "chrf", "bleu", "cider"] {
            assert!((m[k] - 1.0).abs() < 1e-12, "{k} = {}", m[k]);
        }
        let d = lexical_metrics("alpha beta gamma", "delta epsilon zeta");
        assert_eq!(d["rougeL"], 0.0);
        assert_eq!(d["rouge1"], 0.0);
        assert_eq!(d["bleu"], 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_zero() {
        let m = lexical_metrics("", "some reference text here");
        assert!(m.values().all(|v| *v == 0.0), "{m:?}");
    }

    #[test]
    fn meteor_identity_is_one_chunk() {
        let h = toks("a b c d");
        let expected = 1.0 - 0.5 * (1.0f64 / 4.0).powi(3);
        assert!((meteor(&h, &h) - expected).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let r = toks("a b c d e f g h");
        let h = toks("a b c d");
        let b = bleu(&h, &r);
        // every n-gram of the hypothesis matches; only the penalty applies
        assert!((b - (1.0f64 - 8.0 / 4.0).exp()).abs() < 1e-12);
    }
}
