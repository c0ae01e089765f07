//! Seeded session composition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::domain::ReviewCase;
use crate::ReviewError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedCase {
    pub case_id: String,
    pub own_case: bool,
}

/// Draws `n_own` cases dictated by `reader_id` and `n_other` dictated by
/// anyone else, then shuffles them together. Candidates are sorted by id
/// first so the result depends only on the pool contents and the seed.
pub fn compose(pool: &[ReviewCase], reader_id: &str, n_own: usize, n_other: usize, seed: u64) -> Result<Vec<PlannedCase>, ReviewError> {
    let mut own: Vec<&str> = pool
        .iter()
        .filter(|c| c.style_owner == reader_id)
        .map(|c| c.case_id.as_str())
        .collect();
    let mut other: Vec<&str> = pool
        .iter()
        .filter(|c| c.style_owner != reader_id)
        .map(|c| c.case_id.as_str())
        .collect();
    if own.len() < n_own || other.len() < n_other {
        return Err(ReviewError::Shortage {
            own_needed: n_own,
            own_available: own.len(),
            other_needed: n_other,
            other_available: other.len(),
        });
    }
    own.sort_unstable();
    other.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    own.shuffle(&mut rng);
    other.shuffle(&mut rng);
    let mut plan: Vec<PlannedCase> = own
        .into_iter()
        .take(n_own)
        .map(|id| PlannedCase {
            case_id: id.to_string(),
            own_case: true,
        })
        .chain(other.into_iter().take(n_other).map(|id| PlannedCase {
            case_id: id.to_string(),
            own_case: false,
        }))
        .collect();
    plan.shuffle(&mut rng);
    Ok(plan)
}

/// Per-session case handle that reveals nothing about the pool entry.
pub fn opaque_id(session_id: &str, case_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(session_id.as_bytes());
    h.update([0u8]);
    h.update(case_id.as_bytes());
    hex::encode(&h.finalize()[..8])
}
