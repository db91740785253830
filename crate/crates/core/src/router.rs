//! Routing state: a query projection and a table of model embeddings.
//!
//! A query feature vector `h` is projected to `u = hW` and normalized to `z`.
//! Each candidate model `m` is scored by `z · e(m) / tau`, where `e(m)` is
//! the normalized embedding row. Rows are stored raw; normalization happens
//! only at scoring time.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis, s};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::matrix_io::Cursor;
use crate::rng;

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

const ROUTER_MAGIC: &[u8] = b"CMRROUT1";

#[derive(Debug, Clone, PartialEq)]
pub struct RouterState {
    /// `D x d` query projection.
    pub projection: Array2<f64>,
    /// `M x d` raw model embeddings, one row per registry index.
    pub embeddings: Array2<f64>,
    pub tau: f64,
    pub registry_version: u64,
}

/// Frozen copy of the router taken at the end of an experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub projection: Array2<f64>,
    pub embeddings: Array2<f64>,
    /// Rows below this index are anchored.
    pub anchored_count: usize,
}

impl RouterState {
    /// Xavier-uniform initialization of both the projection and `num_models` rows.
    pub fn new(feature_dim: usize, embed_dim: usize, num_models: usize, tau: f64, seed: u64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
        }
        if feature_dim == 0 || embed_dim == 0 {
            return Err(Error::InvalidConfig("router dimensions must be positive".into()));
        }
        let mut r = rng::seeded(rng::derive(seed, &[0x5052_4f4a]));
        let projection = xavier(&mut r, feature_dim, embed_dim, feature_dim, embed_dim);
        let mut r = rng::seeded(rng::derive(seed, &[0x454d_4230]));
        let embeddings = xavier(&mut r, num_models, embed_dim, num_models, embed_dim);
        Ok(RouterState {
            projection,
            embeddings,
            tau,
            registry_version: 0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn num_models(&self) -> usize {
        self.embeddings.nrows()
    }

    /// `u = hW`, before normalization.
    pub fn project(&self, h: &[f64]) -> Result<Array1<f64>> {
        if h.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: h.len(),
            });
        }
        Ok(ArrayView1::from(h).dot(&self.projection))
    }

    /// Unit-norm query embedding `z = hW / |hW|`.
    pub fn embed_query(&self, h: &[f64]) -> Result<Array1<f64>> {
        let u = self.project(h)?;
        let norm = u.dot(&u).sqrt();
        if !(norm > NORM_EPS) {
            return Err(Error::DegenerateQuery);
        }
        Ok(u / norm)
    }

    /// Normalized embedding row `e(m)`.
    pub fn model_embedding(&self, index: usize) -> Result<Array1<f64>> {
        if index >= self.num_models() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.num_models(),
            });
        }
        let row = self.embeddings.row(index);
        let norm = row.dot(&row).sqrt();
        if !(norm > NORM_EPS) {
            return Err(Error::DegenerateEmbedding(index));
        }
        Ok(&row / norm)
    }

    /// Temperature-scaled cosine scores of `z` against each candidate.
    pub fn score(&self, z: ArrayView1<'_, f64>, candidates: &[usize]) -> Result<Vec<f64>> {
        if z.len() != self.embed_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.embed_dim(),
                got: z.len(),
            });
        }
        candidates
            .iter()
            .map(|&m| Ok(z.dot(&self.model_embedding(m)?) / self.tau))
            .collect()
    }

    /// Scores `h` against every registered model.
    pub fn score_all(&self, h: &[f64]) -> Result<Vec<f64>> {
        let z = self.embed_query(h)?;
        let all: Vec<usize> = (0..self.num_models()).collect();
        self.score(z.view(), &all)
    }

    /// Highest-scoring candidate; ties go to the smallest index.
    pub fn predict(&self, h: &[f64], candidates: &[usize]) -> Result<usize> {
        if candidates.is_empty() {
            return Err(Error::InvalidConfig("empty candidate set".into()));
        }
        let z = self.embed_query(h)?;
        let scores = self.score(z.view(), candidates)?;
        Ok(argmax(candidates, &scores))
    }

    /// Candidates in descending score order (ties by ascending index), truncated to `k`.
    pub fn top_k(&self, h: &[f64], candidates: &[usize], k: usize) -> Result<Vec<(usize, f64)>> {
        if candidates.is_empty() {
            return Err(Error::InvalidConfig("empty candidate set".into()));
        }
        let z = self.embed_query(h)?;
        let scores = self.score(z.view(), candidates)?;
        Ok(rank(candidates, &scores, k))
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            projection: self.projection.clone(),
            embeddings: self.embeddings.clone(),
            anchored_count: self.num_models(),
        }
    }

    /// Appends `new_count` Xavier-uniform rows; existing rows and the projection are kept.
    pub fn expand_embeddings(&self, new_count: usize, seed: u64) -> RouterState {
        if new_count == 0 {
            return self.clone();
        }
        let old = self.num_models();
        let d = self.embed_dim();
        let total = old + new_count;
        let mut r = rng::seeded(rng::derive(seed, &[old as u64, total as u64]));
        let fresh = xavier(&mut r, new_count, d, total, d);
        let mut embeddings = Array2::zeros((total, d));
        embeddings.slice_mut(s![..old, ..]).assign(&self.embeddings);
        embeddings.slice_mut(s![old.., ..]).assign(&fresh);
        RouterState {
            projection: self.projection.clone(),
            embeddings,
            tau: self.tau,
            registry_version: self.registry_version,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if !self.projection.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("projection has non-finite entries".into()));
        }
        if !self.embeddings.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("embeddings have non-finite entries".into()));
        }
        Ok(())
    }

    /// Writes the binary router file: magic, `D`, `d`, `M`, `tau`,
    /// registry version, then `W` and `E` as row-major `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (dim_in, dim_out, models) = (self.feature_dim(), self.embed_dim(), self.num_models());
        let mut buf = Vec::with_capacity(48 + 8 * (dim_in * dim_out + models * dim_out));
        buf.extend_from_slice(ROUTER_MAGIC);
        for v in [dim_in as u64, dim_out as u64, models as u64] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.tau.to_le_bytes());
        buf.extend_from_slice(&self.registry_version.to_le_bytes());
        for v in self.projection.iter().chain(self.embeddings.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RouterState> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut c = Cursor::new(&bytes, path);
        c.expect_magic(ROUTER_MAGIC)?;
        let dim_in = c.u64()? as usize;
        let dim_out = c.u64()? as usize;
        let models = c.u64()? as usize;
        let tau = c.f64()?;
        let registry_version = c.u64()?;
        let mut read = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| c.f64()).collect() };
        let w = read(dim_in * dim_out)?;
        let e = read(models * dim_out)?;
        c.finish()?;
        let state = RouterState {
            projection: Array2::from_shape_vec((dim_in, dim_out), w)
                .map_err(|e| Error::format(path, e.to_string()))?,
            embeddings: Array2::from_shape_vec((models, dim_out), e)
                .map_err(|e| Error::format(path, e.to_string()))?,
            tau,
            registry_version,
        };
        if !(tau > 0.0) {
            return Err(Error::format(path, "non-positive temperature"));
        }
        state.check_finite().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(state)
    }
}

/// Index of the best candidate; ties go to the smallest model index.
pub fn argmax(candidates: &[usize], scores: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..candidates.len() {
        match scores[j].total_cmp(&scores[best]) {
            Ordering::Greater => best = j,
            Ordering::Equal if candidates[j] < candidates[best] => best = j,
            _ => {}
        }
    }
    candidates[best]
}

/// `(index, score)` pairs sorted by descending score, ascending index; first `k`.
pub fn rank(candidates: &[usize], scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut pairs: Vec<(usize, f64)> = candidates.iter().copied().zip(scores.iter().copied()).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.truncate(k);
    pairs
}

fn xavier(r: &mut rng::Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-bound..=bound))
}

/// Xavier-uniform bound used for rows added by expansion.
pub fn expansion_bound(total_rows: usize, embed_dim: usize) -> f64 {
    (6.0 / (total_rows + embed_dim) as f64).sqrt()
}

/// Mean cosine drift `1 - cos(v_t, v_prev)` over the anchored rows.
pub fn mean_cosine_drift(state: &RouterState, snap: &Snapshot) -> f64 {
    let n = snap.anchored_count.min(state.num_models());
    if n == 0 {
        return 0.0;
    }
    let total: f64 = state
        .embeddings
        .axis_iter(Axis(0))
        .zip(snap.embeddings.axis_iter(Axis(0)))
        .take(n)
        .map(|(a, b)| 1.0 - a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt()))
        .sum();
    total / n as f64
}

/// `|W - W_prev|_F / |W_prev|_F`.
pub fn relative_projection_change(state: &RouterState, snap: &Snapshot) -> f64 {
    let diff = &state.projection - &snap.projection;
    (diff.iter().map(|v| v * v).sum::<f64>() / snap.projection.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn state(w: Array2<f64>, e: Array2<f64>, tau: f64) -> RouterState {
        RouterState {
            projection: w,
            embeddings: e,
            tau,
            registry_version: 0,
        }
    }

    #[test]
    fn embed_identity_normalizes() {
        let s = state(Array2::eye(2), Array2::eye(2), 1.0);
        let z = s.embed_query(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(z[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], 0.8, epsilon = 1e-15);
        let z = s.embed_query(&[0.6, 0.8]).unwrap();
        assert_abs_diff_eq!(z[0], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn embed_rectangular_projection() {
        let w = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let s = state(w, Array2::eye(2), 1.0);
        let z = s.embed_query(&[1.0, 1.0, 7.0]).unwrap();
        let half = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(z[0], half, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], half, epsilon = 1e-15);
    }

    #[test]
    fn zero_projection_is_degenerate() {
        let s = state(Array2::zeros((2, 2)), Array2::eye(2), 1.0);
        assert!(matches!(s.embed_query(&[1.0, 1.0]), Err(Error::DegenerateQuery)));
    }

    #[test]
    fn score_examples() {
        let s = state(Array2::eye(2), array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]], 0.08);
        let z = array![1.0, 0.0];
        let scores = s.score(z.view(), &[0, 1]).unwrap();
        assert_abs_diff_eq!(scores[0], 12.5, epsilon = 1e-12);
        assert_eq!(scores[1], 0.0);
        let s = RouterState { tau: 0.5, ..s };
        let scores = s.score(z.view(), &[2]).unwrap();
        assert_abs_diff_eq!(scores[0], 1.41421, epsilon = 1e-5);
    }

    #[test]
    fn zero_row_is_degenerate() {
        let s = state(Array2::eye(2), array![[0.0, 0.0]], 1.0);
        let z = array![1.0, 0.0];
        assert!(matches!(s.score(z.view(), &[0]), Err(Error::DegenerateEmbedding(0))));
    }

    #[test]
    fn predict_ties_and_ranking() {
        // cosines to z = (1, 0): 0.9, 0.2, -0.5
        let rows = [0.9f64, 0.2, -0.5].map(|c| [c, (1.0 - c * c).sqrt()]);
        let e = Array2::from_shape_vec((3, 2), rows.concat()).unwrap();
        let s = state(Array2::eye(2), e, 0.08);
        assert_eq!(s.predict(&[1.0, 0.0], &[0, 1, 2]).unwrap(), 0);
        assert_eq!(s.predict(&[1.0, 0.0], &[2]).unwrap(), 2);
        let top: Vec<usize> = s.top_k(&[1.0, 0.0], &[2, 1, 0], 2).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(top, vec![0, 1]);
        assert_eq!(s.top_k(&[1.0, 0.0], &[0, 1, 2], 10).unwrap().len(), 3);

        let same = state(Array2::eye(2), array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]], 1.0);
        assert_eq!(same.predict(&[1.0, 0.0], &[2, 1]).unwrap(), 1);
        let top: Vec<usize> = same.top_k(&[1.0, 0.0], &[2, 0, 1], 2).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(top, vec![0, 1]);
    }

    #[test]
    fn expansion_preserves_rows() {
        let s = RouterState::new(4, 3, 3, 0.08, 1).unwrap();
        assert_eq!(s.expand_embeddings(0, 9), s);
        let grown = s.expand_embeddings(2, 9);
        assert_eq!(grown.num_models(), 5);
        assert_eq!(grown.embeddings.slice(s![..3, ..]), s.embeddings);
        assert_eq!(grown.projection, s.projection);
        let bound = expansion_bound(5, 3);
        assert!(grown.embeddings.slice(s![3.., ..]).iter().all(|v| v.abs() <= bound));
        assert_eq!(grown, s.expand_embeddings(2, 9));
    }

    #[test]
    fn snapshot_is_a_frozen_copy() {
        let mut s = RouterState::new(4, 3, 3, 0.08, 1).unwrap();
        let snap = s.snapshot();
        s.projection.fill(0.5);
        s = s.expand_embeddings(2, 3);
        assert_eq!(snap.anchored_count, 3);
        assert_ne!(snap.projection, s.projection);
        assert_eq!(mean_cosine_drift(&s, &snap), mean_cosine_drift(&s, &snap));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("router.bin");
        let mut s = RouterState::new(5, 3, 4, 0.08, 11).unwrap();
        s.registry_version = 3;
        s.save(&path).unwrap();
        assert_eq!(RouterState::load(&path).unwrap(), s);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"CMRROUT1");
        assert_eq!(bytes.len(), 8 + 8 * 5 + 8 * (5 * 3 + 4 * 3));
    }
}
