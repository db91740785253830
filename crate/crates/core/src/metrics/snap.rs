//! Snapping free-form model names onto the registry.

use crate::registry::ModelId;

pub const SNAP_THRESHOLD: f64 = 0.8;

/// Edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev(a, b) / max(|a|, |b|)`; two empty strings are identical.
pub fn similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapped {
    pub label: String,
    pub snapped: bool,
    /// Similarity to the best valid id.
    pub similarity: f64,
}

/// Maps `raw` to the most similar valid id when that similarity reaches
/// `threshold`; ties go to the lexicographically smallest id.
pub fn snap_label(raw: &str, valid: &[ModelId], threshold: f64) -> Snapped {
    let mut best: Option<(&str, f64)> = None;
    for id in valid {
        let s = similarity(raw, id.as_str());
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && b <= id.as_str()) => Some((b, bs)),
            _ => Some((id.as_str(), s)),
        };
    }
    match best {
        Some((id, s)) if s >= threshold => Snapped {
            label: id.to_string(),
            snapped: true,
            similarity: s,
        },
        Some((_, s)) => Snapped {
            label: raw.to_string(),
            snapped: false,
            similarity: s,
        },
        None => Snapped {
            label: raw.to_string(),
            snapped: false,
            similarity: 0.0,
        },
    }
}
