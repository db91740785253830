//! Deterministic bag-of-tokens query features.

use crate::error::{Error, Result};
use crate::rng::fnv1a;

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of", "on", "or", "that", "the",
    "this", "to", "was", "with",
];

pub const MIN_FEATURE_DIM: usize = 8;

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
}

/// Hashes each token to a signed coordinate, sums and normalizes.
pub fn featurize(instruction: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < MIN_FEATURE_DIM {
        return Err(Error::InvalidConfig(format!("feature dimension must be at least {MIN_FEATURE_DIM}, got {dim}")));
    }
    let mut v = vec![0.0; dim];
    let mut any = false;
    for token in tokens(instruction) {
        any = true;
        let mut bytes = seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(token.as_bytes());
        let h = fnv1a(&bytes);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    if !any {
        return Err(Error::EmptyInstruction(instruction.to_string()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateQuery);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}
