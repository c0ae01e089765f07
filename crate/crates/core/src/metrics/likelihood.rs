//! Generation-likelihood scores: the mean log-probability a seq2seq
//! scorer assigns to one text given another.

use serde::{Deserialize, Serialize};

use super::MetricError;

pub trait SequenceScorer: Send + Sync {
    /// Log-probability of each target token (including any end marker)
    /// under teacher forcing, conditioned on `source`.
    fn token_log_probs(&self, source: &str, target: &str) -> Result<Vec<f64>, MetricError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenDirection {
    SrcToHyp,
    RefToHyp,
    HypToRef,
    BidirectionalF,
}

impl GenDirection {
    pub fn suffix(self) -> &'static str {
        match self {
            GenDirection::SrcToHyp => "src_hyp",
            GenDirection::RefToHyp => "ref_hyp",
            GenDirection::HypToRef => "hyp_ref",
            GenDirection::BidirectionalF => "f",
        }
    }
}

/// How the two directions are merged for [`GenDirection::BidirectionalF`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FCombination {
    /// Mean of the two directional scores.
    #[default]
    Arithmetic,
    /// Harmonic mean of the magnitudes, sign kept negative.
    Harmonic,
}

pub fn mean_log_likelihood(scorer: &dyn SequenceScorer, conditioning: &str, scored: &str) -> Result<f64, MetricError> {
    if scored.trim().is_empty() {
        return Err(MetricError::Undefined("scored text is empty".into()));
    }
    let lp = scorer.token_log_probs(conditioning, scored)?;
    if lp.is_empty() {
        return Err(MetricError::Undefined("scorer returned no tokens".into()));
    }
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Scores `scored` given `conditioning`. For the bidirectional variant the
/// reverse direction (`conditioning` given `scored`) is combined in with the
/// arithmetic mean.
pub fn gen_score(scorer: &dyn SequenceScorer, conditioning: &str, scored: &str, direction: GenDirection) -> Result<f64, MetricError> {
    gen_score_with(scorer, conditioning, scored, direction, FCombination::Arithmetic)
}

pub fn gen_score_with(
    scorer: &dyn SequenceScorer,
    conditioning: &str,
    scored: &str,
    direction: GenDirection,
    combination: FCombination,
) -> Result<f64, MetricError> {
    let forward = mean_log_likelihood(scorer, conditioning, scored)?;
    if direction != GenDirection::BidirectionalF {
        return Ok(forward);
    }
    let backward = mean_log_likelihood(scorer, scored, conditioning)?;
    Ok(match combination {
        FCombination::Arithmetic => (forward + backward) / 2.0,
        FCombination::Harmonic => {
            let (a, b) = (forward.abs(), backward.abs());
            if a + b == 0.0 {
                0.0
            } else {
                -2.0 * a * b / (a + b)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Uniform over a vocabulary of `size` tokens; one token per word plus
    /// an end marker.
    struct Uniform(usize);

    impl SequenceScorer for Uniform {
        fn token_log_probs(&self, _source: &str, target: &str) -> Result<Vec<f64>, MetricError> {
            let n = target.split_whitespace().count() + 1;
            Ok(vec![-(self.0 as f64).ln(); n])
        }
    }

    /// Per-word probability read from the word itself (`p0.5` → 0.5).
    struct Explicit;

    impl SequenceScorer for Explicit {
        fn token_log_probs(&self, _source: &str, target: &str) -> Result<Vec<f64>, MetricError> {
            Ok(target
                .split_whitespace()
                .map(|w| w.trim_start_matches('p').parse::<f64>().unwrap().ln())
                .collect())
        }
    }

    #[test]
    fn certain_scorer_gives_zero() {
        assert_eq!(gen_score(&Uniform(1), "src", "a b c", GenDirection::SrcToHyp).unwrap(), 0.0);
    }

    #[test]
    fn uniform_four_way() {
        let s = gen_score(&Uniform(4), "x", "any target text", GenDirection::RefToHyp).unwrap();
        assert!((s + 4f64.ln()).abs() < 1e-12);
        assert!((s + 1.386).abs() < 1e-3);
    }

    #[test]
    fn empty_scored_text_is_undefined() {
        assert!(matches!(
            gen_score(&Uniform(4), "x", "  ", GenDirection::SrcToHyp),
            Err(MetricError::Undefined(_))
        ));
    }

    #[test]
    fn monotone_in_token_probabilities() {
        let low = gen_score(&Explicit, "", "p0.2 p0.5 p0.9", GenDirection::SrcToHyp).unwrap();
        let high = gen_score(&Explicit, "", "p0.3 p0.6 p0.95", GenDirection::SrcToHyp).unwrap();
        assert!(high > low);
        assert!(high <= 0.0);
    }

    #[test]
    fn bidirectional_combinations() {
        let a = gen_score_with(&Explicit, "p0.5", "p0.25", GenDirection::BidirectionalF, FCombination::Arithmetic).unwrap();
        let (f, b) = (0.25f64.ln(), 0.5f64.ln());
        assert!((a - (f + b) / 2.0).abs() < 1e-12);
        let h = gen_score_with(&Explicit, "p0.5", "p0.25", GenDirection::BidirectionalF, FCombination::Harmonic).unwrap();
        assert!((h - (-2.0 * f.abs() * b.abs() / (f.abs() + b.abs()))).abs() < 1e-12);
    }
}
