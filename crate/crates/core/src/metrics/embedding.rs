//! Greedy token-embedding matching (BERTScore-style).

use sha2::{Digest, Sha256};

use super::lexical::{normalize, Prf};
use super::MetricError;

/// Produces one vector per token of a text.
pub trait TokenEncoder: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<Vec<f32>>, MetricError>;
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Precision averages each hypothesis token's best cosine against the
/// reference, recall the reverse; F is their harmonic mean.
pub fn greedy_match(hyp: &[Vec<f32>], reference: &[Vec<f32>]) -> Prf {
    if hyp.is_empty() || reference.is_empty() {
        return Prf::ZERO;
    }
    let sim: Vec<Vec<f64>> = hyp.iter().map(|h| reference.iter().map(|r| cosine(h, r)).collect()).collect();
    let precision = sim
        .iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / hyp.len() as f64;
    let recall = (0..reference.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / reference.len() as f64;
    Prf::from_pr(precision, recall)
}

pub fn embedding_metric(hypothesis: &str, reference: &str, encoder: &dyn TokenEncoder) -> Result<Prf, MetricError> {
    let h = encoder.encode(hypothesis)?;
    let r = encoder.encode(reference)?;
    Ok(greedy_match(&h, &r))
}

/// Context-free encoder: each normalized token maps to a fixed
/// pseudo-random unit vector derived from its hash.
#[derive(Debug, Clone)]
pub struct HashedTokenEncoder {
    pub dim: usize,
}

impl Default for HashedTokenEncoder {
    fn default() -> Self {
        HashedTokenEncoder { dim: 64 }
    }
}

impl HashedTokenEncoder {
    pub fn vector(&self, token: &str) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim);
        let mut block = 0u32;
        while out.len() < self.dim {
            let digest = Sha256::new()
                .chain_update(token.as_bytes())
                .chain_update(block.to_le_bytes())
                .finalize();
            for pair in digest.chunks(2) {
                if out.len() == self.dim {
                    break;
                }
                let v = u16::from_le_bytes([pair[0], pair[1]]) as f32 / u16::MAX as f32;
                out.push(v * 2.0 - 1.0);
            }
            block += 1;
        }
        out
    }
}

impl TokenEncoder for HashedTokenEncoder {
    fn encode(&self, text: &str) -> Result<Vec<Vec<f32>>, MetricError> {
        Ok(normalize(text).iter().map(|t| self.vector(t)).collect())
    }
}
