//! Post-hoc model families from identifier names.
//!
//! Names are reduced to their repository segment with size and quantization
//! tokens removed, embedded as character n-gram TF-IDF vectors and merged by
//! average-linkage agglomerative clustering on cosine distance.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::registry::ModelId;

const DEFAULT_SIZE_TOKENS: &str = include_str!("size_tokens.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyConfig {
    pub size_tokens: BTreeSet<String>,
    pub ngram: usize,
    /// Clusters merge while their average cosine distance is at most this.
    pub merge_threshold: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            size_tokens: FamilyConfig::parse_tokens(DEFAULT_SIZE_TOKENS),
            ngram: 3,
            merge_threshold: 0.4,
        }
    }
}

impl FamilyConfig {
    /// One token per line; `#` starts a comment.
    pub fn parse_tokens(text: &str) -> BTreeSet<String> {
        text.lines()
            .map(|l| l.split('#').next().unwrap_or("").trim().to_ascii_lowercase())
            .filter(|l| !l.is_empty())
            .collect()
    }
}

/// Association from model id to family id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FamilyMap {
    family_of: BTreeMap<ModelId, String>,
}

impl FamilyMap {
    pub fn get(&self, id: &ModelId) -> Option<&str> {
        self.family_of.get(id).map(String::as_str)
    }

    pub fn insert(&mut self, id: ModelId, family: String) {
        self.family_of.insert(id, family);
    }

    pub fn len(&self) -> usize {
        self.family_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.family_of.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModelId, &str)> {
        self.family_of.iter().map(|(k, v)| (k, v.as_str()))
    }

    /// Members grouped by family id.
    pub fn groups(&self) -> BTreeMap<&str, Vec<&ModelId>> {
        let mut out: BTreeMap<&str, Vec<&ModelId>> = BTreeMap::new();
        for (id, fam) in self.iter() {
            out.entry(fam).or_default().push(id);
        }
        out
    }
}

/// Trailing size letter after a version digit: `yolov8m` -> `yolov8`.
fn strip_size_suffix(token: &str) -> &str {
    let b = token.as_bytes();
    let n = b.len();
    let shaped = n >= 3
        && b[0].is_ascii_lowercase()
        && b.iter().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        && b[n - 2].is_ascii_digit()
        && matches!(b[n - 1], b'n' | b's' | b'm' | b'l' | b'x');
    if shaped {
        &token[..n - 1]
    } else {
        token
    }
}

/// Repository segment, lowercased, with size and variant tokens removed.
pub fn normalize_name(id: &ModelId, cfg: &FamilyConfig) -> String {
    let repo = id.repo().to_lowercase();
    let kept: Vec<&str> = repo
        .split(['-', '_', '.', '/'])
        .filter(|t| !t.is_empty() && !cfg.size_tokens.contains(*t))
        .map(strip_size_suffix)
        .collect();
    if kept.is_empty() {
        repo
    } else {
        kept.join("-")
    }
}

fn ngrams(s: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    if chars.len() < n {
        return vec![s.to_string()];
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Unit TF-IDF vectors with smoothed IDF `ln((1 + N) / (1 + df)) + 1`.
fn tfidf(names: &[String], n: usize) -> Vec<BTreeMap<String, f64>> {
    let docs: Vec<Vec<String>> = names.iter().map(|s| ngrams(s, n)).collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &docs {
        for g in d.iter().collect::<BTreeSet<_>>() {
            *df.entry(g.as_str()).or_default() += 1;
        }
    }
    let total = docs.len() as f64;
    docs.iter()
        .map(|d| {
            let mut v: BTreeMap<String, f64> = BTreeMap::new();
            for g in d {
                *v.entry(g.clone()).or_default() += 1.0;
            }
            for (g, w) in v.iter_mut() {
                *w *= ((1.0 + total) / (1.0 + df[g.as_str()] as f64)).ln() + 1.0;
            }
            let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
            v.values_mut().for_each(|w| *w /= norm);
            v
        })
        .collect()
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().filter_map(|(g, w)| large.get(g).map(|x| w * x)).sum()
}

/// Average-linkage clusters over `names`, as lists of name positions.
fn average_linkage(vectors: &[BTreeMap<String, f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = vectors.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - cosine(&vectors[i], &vectors[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut active: Vec<usize> = (0..n).collect();
    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                if best.map_or(true, |(d, _, _)| dist[a][b] < d) {
                    best = Some((dist[a][b], a, b));
                }
            }
        }
        let (d, a, b) = best.expect("at least two clusters");
        if d > threshold {
            break;
        }
        let (na, nb) = (members[a].len() as f64, members[b].len() as f64);
        for &k in &active {
            if k != a && k != b {
                let merged = (na * dist[a][k] + nb * dist[b][k]) / (na + nb);
                dist[a][k] = merged;
                dist[k][a] = merged;
            }
        }
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        active.retain(|&k| k != b);
    }
    active.into_iter().map(|a| std::mem::take(&mut members[a])).collect()
}

/// Families with the default configuration.
pub fn build_family_map(ids: &[ModelId]) -> FamilyMap {
    build_family_map_with(ids, &FamilyConfig::default())
}

/// Each cluster is named by its lexicographically smallest normalized name.
pub fn build_family_map_with(ids: &[ModelId], cfg: &FamilyConfig) -> FamilyMap {
    let normalized: Vec<String> = ids.iter().map(|id| normalize_name(id, cfg)).collect();
    let names: Vec<String> = normalized.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let vectors = tfidf(&names, cfg.ngram.max(1));
    let mut family_of_name: BTreeMap<&str, &str> = BTreeMap::new();
    for cluster in average_linkage(&vectors, cfg.merge_threshold) {
        let fid = cluster.iter().map(|&i| names[i].as_str()).min().expect("non-empty cluster");
        for &i in &cluster {
            family_of_name.insert(names[i].as_str(), fid);
        }
    }
    let mut map = FamilyMap::default();
    for (id, name) in ids.iter().zip(&normalized) {
        map.insert(id.clone(), family_of_name[name.as_str()].to_string());
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<ModelId> {
        names.iter().map(|n| ModelId::new(*n).unwrap()).collect()
    }

    #[test]
    fn normalization() {
        let cfg = FamilyConfig::default();
        let n = |s: &str| normalize_name(&ModelId::new(s).unwrap(), &cfg);
        assert_eq!(n("google/flan-t5-base"), "flan-t5");
        assert_eq!(n("cyankiwi/GLM-4.6V-Flash-AWQ-4bit"), "glm-4-6v-flash");
        assert_eq!(n("a/yolov8m"), "yolov8");
        assert_eq!(n("a/base"), "base");
        assert_eq!(n("openai/whisper-large-v3"), "whisper-v3");
    }

    #[test]
    fn flan_t5_pair() {
        let fam = build_family_map(&ids(&["google/flan-t5-base", "google/flan-t5-xl"]));
        assert_eq!(fam.get(&ModelId::new("google/flan-t5-base").unwrap()), Some("flan-t5"));
        assert_eq!(fam.groups().len(), 1);
    }

    #[test]
    fn yolo_sizes() {
        let fam = build_family_map(&ids(&["a/yolov8m", "a/yolov8n", "a/yolov8s"]));
        assert_eq!(fam.groups().len(), 1);
    }

    #[test]
    fn singleton() {
        let fam = build_family_map(&ids(&["openai/clip-vit-base-patch32"]));
        assert_eq!(fam.len(), 1);
        assert_eq!(fam.get(&ModelId::new("openai/clip-vit-base-patch32").unwrap()), Some("clip-vit-patch32"));
    }

    #[test]
    fn glm_flash_variants_group() {
        let glm = ids(&[
            "cyankiwi/GLM-4.6V-AWQ-4bit",
            "cyankiwi/GLM-4.6V-Flash-AWQ-4bit",
            "cyankiwi/GLM-4.6V-Flash-AWQ-8bit",
            "lmstudio-community/GLM-4.6V-Flash-MLX-4bit",
            "lmstudio-community/GLM-4.6V-Flash-MLX-6bit",
            "lmstudio-community/GLM-4.6V-Flash-MLX-8bit",
            "unsloth/GLM-4.6V-Flash",
            "unsloth/GLM-4.6V-Flash-GGUF",
            "zai-org/GLM-4.6V-Flash",
        ]);
        let mut all = glm.clone();
        all.extend(ids(&["google/bert-base-uncased", "openai/whisper-large-v3", "vinvino02/glpn-kitti"]));
        let fam = build_family_map(&all);
        let f0 = fam.get(&glm[0]).unwrap();
        assert!(glm.iter().all(|id| fam.get(id) == Some(f0)));
        assert_ne!(fam.get(&all[9]), Some(f0));
    }

    #[test]
    fn unrelated_names_split() {
        let fam = build_family_map(&ids(&["google/bert-base-uncased", "openai/whisper-large-v3", "a/yolov8m"]));
        assert_eq!(fam.groups().len(), 3);
    }

    #[test]
    fn token_file_parsing() {
        let t = FamilyConfig::parse_tokens("# c\nXL\n\n  tiny # trailing\n");
        assert_eq!(t, ["tiny", "xl"].iter().map(|s| s.to_string()).collect());
    }
}
