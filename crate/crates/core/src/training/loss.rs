//! Routing cross-entropy and snapshot anchors with hand-derived gradients.
//!
//! For one example with projected query `u = hW`, `z = u/|u|`, candidate rows
//! `v_j`, `e_j = v_j/|v_j|` and logits `s_j = z·e_j/tau`:
//!
//! ```text
//! dL/ds_j = p_j - t_j
//! dL/dz   = sum_j (dL/ds_j) e_j / tau         dL/de_j = (dL/ds_j) z / tau
//! dL/du   = (I - z z^T) dL/dz / |u|           dL/dv_j = (I - e_j e_j^T) dL/de_j / |v_j|
//! dL/dW   = h (dL/du)^T
//! ```

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::{AnchorVariant, Example, TrainConfig};
use crate::error::{Error, Result};
use crate::router::{RouterState, Snapshot, NORM_EPS};
use crate::sampling::CandidateSet;

/// Target distribution over a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Hard,
    /// `1 - epsilon` on the positive, `epsilon / k` on each neighbor position.
    Soft { epsilon: f64, neighbors: Vec<usize> },
}

impl Targets {
    fn distribution(&self, len: usize, positive_pos: usize) -> Vec<f64> {
        let mut t = vec![0.0; len];
        match self {
            Targets::Soft { epsilon, neighbors } if !neighbors.is_empty() => {
                t[positive_pos] = 1.0 - epsilon;
                let share = epsilon / neighbors.len() as f64;
                for &n in neighbors {
                    t[n] += share;
                }
            }
            _ => t[positive_pos] = 1.0,
        }
        t
    }
}

/// Cross-entropy of `softmax(scores)` against the target distribution.
pub fn routing_loss(scores: &[f64], positive_pos: usize, targets: &Targets) -> f64 {
    routing_loss_and_grad(scores, positive_pos, targets).0
}

/// Loss and `dL/ds`.
pub fn routing_loss_and_grad(scores: &[f64], positive_pos: usize, targets: &Targets) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let log_z = max + sum.ln();
    let t = targets.distribution(scores.len(), positive_pos);
    let loss = t.iter().zip(scores).map(|(ti, si)| ti * (log_z - si)).sum();
    let grad = exp.iter().zip(&t).map(|(e, ti)| e / sum - ti).collect();
    (loss, grad)
}

/// Per-batch loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub route: f64,
    pub emb_anchor: f64,
    pub proj_anchor: f64,
    /// `route + lambda_emb * emb_anchor + lambda_proj * proj_anchor`.
    pub total: f64,
}

/// Dense projection gradient plus sparse rows of the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub projection: Array2<f64>,
    pub embeddings: BTreeMap<usize, Array1<f64>>,
}

impl Gradients {
    fn zeros(state: &RouterState) -> Self {
        Gradients {
            projection: Array2::zeros(state.projection.raw_dim()),
            embeddings: BTreeMap::new(),
        }
    }

    fn add_row(&mut self, index: usize, grad: ArrayView1<'_, f64>, scale: f64) {
        let row = self
            .embeddings
            .entry(index)
            .or_insert_with(|| Array1::zeros(grad.len()));
        row.scaled_add(scale, &grad);
    }
}

/// Anchor penalties `(emb, proj)` against a snapshot.
pub fn anchor_losses(state: &RouterState, snap: &Snapshot, variant: AnchorVariant) -> Result<(f64, f64)> {
    let (emb, proj, _) = anchor_losses_and_grads(state, snap, variant)?;
    Ok((emb, proj))
}

/// Anchor penalties and their unscaled gradients.
pub fn anchor_losses_and_grads(
    state: &RouterState,
    snap: &Snapshot,
    variant: AnchorVariant,
) -> Result<(f64, f64, Gradients)> {
    let anchored = snap.anchored_count;
    if anchored > state.num_models() || snap.embeddings.nrows() < anchored {
        return Err(Error::InvalidConfig(format!(
            "snapshot anchors {anchored} rows but the router has {}",
            state.num_models()
        )));
    }
    if snap.projection.raw_dim() != state.projection.raw_dim() {
        return Err(Error::DimensionMismatch {
            expected: snap.projection.len(),
            got: state.projection.len(),
        });
    }
    let mut grads = Gradients::zeros(state);

    let mut emb = 0.0;
    if anchored > 0 {
        let inv = 1.0 / anchored as f64;
        for m in 0..anchored {
            let v = state.embeddings.row(m);
            let p = snap.embeddings.row(m);
            match variant {
                AnchorVariant::Cosine => {
                    let (nv, np) = (v.dot(&v).sqrt(), p.dot(&p).sqrt());
                    if !(nv > NORM_EPS && np > NORM_EPS) {
                        return Err(Error::DegenerateEmbedding(m));
                    }
                    let cos = v.dot(&p) / (nv * np);
                    emb += 1.0 - cos;
                    // d(1 - cos)/dv = -(p/|p| - cos v/|v|) / |v|
                    let g = (&v * (cos / nv) - &p / np) * (inv / nv);
                    grads.embeddings.insert(m, g);
                }
                AnchorVariant::L2 => {
                    let diff = &v - &p;
                    emb += diff.dot(&diff);
                    grads.embeddings.insert(m, diff * (2.0 * inv));
                }
            }
        }
        emb *= inv;
    }

    let diff = &state.projection - &snap.projection;
    let count = diff.len() as f64;
    let proj = diff.iter().map(|d| d * d).sum::<f64>() / count;
    grads.projection = diff * (2.0 / count);
    Ok((emb, proj, grads))
}

/// One example paired with its candidate set and targets.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub example: &'a Example,
    pub candidates: CandidateSet,
    pub targets: Targets,
}

/// Batch loss and exact gradients.
///
/// The routing term is the batch mean of per-example losses, each scaled by
/// `replay_loss_multiplier` for replayed examples. When `anchor` is given the
/// anchor penalties are added once for the batch.
pub fn loss_and_grads(
    state: &RouterState,
    anchor: Option<&Snapshot>,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let mut grads = Gradients::zeros(state);
    let mut route = 0.0;
    let inv_batch = if batch.is_empty() { 0.0 } else { 1.0 / batch.len() as f64 };
    let inv_tau = 1.0 / state.tau;

    for item in batch {
        let weight = if item.example.from_replay { cfg.replay_loss_multiplier } else { 1.0 } * inv_batch;
        let h = ArrayView1::from(item.example.features.as_slice());
        let u = state.project(&item.example.features)?;
        let nu = u.dot(&u).sqrt();
        if !(nu > NORM_EPS) {
            return Err(Error::DegenerateQuery);
        }
        let z = &u / nu;

        let cands = &item.candidates.indices;
        let mut rows = Vec::with_capacity(cands.len());
        let mut scores = Vec::with_capacity(cands.len());
        for &m in cands {
            let e = state.model_embedding(m)?;
            scores.push(z.dot(&e) * inv_tau);
            rows.push(e);
        }
        let (loss, dscore) = routing_loss_and_grad(&scores, item.candidates.positive_pos, &item.targets);
        route += weight * loss;

        let mut dz = Array1::<f64>::zeros(z.len());
        for ((&m, e), g) in cands.iter().zip(&rows).zip(&dscore) {
            let g = g * weight * inv_tau;
            dz.scaled_add(g, e);
            // de = g z; dv = (de - e (e·de)) / |v|
            let v = state.embeddings.row(m);
            let nv = v.dot(&v).sqrt();
            let e_dot_z = e.dot(&z);
            let dv = (&z - &(e * e_dot_z)) * (g / nv);
            grads.add_row(m, dv.view(), 1.0);
        }
        let du = (&dz - &(&z * z.dot(&dz))) / nu;
        let outer = h.insert_axis(Axis(1)).dot(&du.insert_axis(Axis(0)));
        grads.projection += &outer;
    }

    let mut breakdown = LossBreakdown {
        route,
        ..LossBreakdown::default()
    };
    if let Some(snap) = anchor {
        let (emb, proj, anchor_grads) = anchor_losses_and_grads(state, snap, cfg.anchor_variant)?;
        breakdown.emb_anchor = emb;
        breakdown.proj_anchor = proj;
        grads.projection.scaled_add(cfg.lambda_proj, &anchor_grads.projection);
        for (m, g) in &anchor_grads.embeddings {
            grads.add_row(*m, g.view(), cfg.lambda_emb);
        }
    }
    breakdown.total = breakdown.route + cfg.lambda_emb * breakdown.emb_anchor + cfg.lambda_proj * breakdown.proj_anchor;
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn uniform_scores_give_log_k() {
        let loss = routing_loss(&[0.3; 64], 17, &Targets::Hard);
        assert_abs_diff_eq!(loss, 64f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 4.15888, epsilon = 1e-5);
    }

    #[test]
    fn softmax_oracle() {
        let loss = routing_loss(&[2.0, 0.0, 0.0], 0, &Targets::Hard);
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(loss, -(e2 / (e2 + 2.0)).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.23954, epsilon = 1e-5);
    }

    #[test]
    fn zero_epsilon_soft_targets_match_hard() {
        let scores = [1.5, -0.3, 0.7, 2.2];
        let soft = Targets::Soft {
            epsilon: 0.0,
            neighbors: vec![1, 2],
        };
        assert_eq!(routing_loss(&scores, 0, &soft), routing_loss(&scores, 0, &Targets::Hard));
    }

    #[test]
    fn large_scores_stay_finite() {
        let loss = routing_loss(&[1e4, -1e4, 0.0], 1, &Targets::Hard);
        assert!(loss.is_finite());
        assert_abs_diff_eq!(loss, 2e4, epsilon = 1e-6);
    }

    fn small_state() -> RouterState {
        RouterState::new(3, 2, 4, 0.5, 3).unwrap()
    }

    #[test]
    fn anchors_vanish_at_snapshot() {
        let s = small_state();
        let snap = s.snapshot();
        for variant in [AnchorVariant::Cosine, AnchorVariant::L2] {
            let (emb, proj) = anchor_losses(&s, &snap, variant).unwrap();
            assert_abs_diff_eq!(emb, 0.0, epsilon = 1e-15);
            assert_eq!(proj, 0.0);
        }
    }

    #[test]
    fn orthogonal_rows_give_unit_cosine_drift() {
        let mut s = RouterState {
            projection: array![[2.0]],
            embeddings: array![[1.0, 0.0], [0.0, 3.0]],
            tau: 1.0,
            registry_version: 0,
        };
        let snap = s.snapshot();
        s.embeddings = array![[0.0, 5.0], [-1.0, 0.0]];
        s.projection = array![[4.0]];
        let (emb, proj) = anchor_losses(&s, &snap, AnchorVariant::Cosine).unwrap();
        assert_abs_diff_eq!(emb, 1.0, epsilon = 1e-15);
        assert_eq!(proj, 4.0);
    }

    #[test]
    fn new_rows_are_unanchored() {
        let s = small_state();
        let snap = s.snapshot();
        let mut grown = s.expand_embeddings(3, 5);
        grown.embeddings.row_mut(5).fill(9.0);
        assert_eq!(anchor_losses(&grown, &snap, AnchorVariant::L2).unwrap(), (0.0, 0.0));
        let (_, _, g) = anchor_losses_and_grads(&grown, &snap, AnchorVariant::L2).unwrap();
        assert!(g.embeddings.keys().all(|&m| m < 4));
    }

    #[test]
    fn zero_anchored_row_is_an_error_for_cosine() {
        let mut s = small_state();
        let snap = s.snapshot();
        s.embeddings.row_mut(1).fill(0.0);
        assert!(anchor_losses(&s, &snap, AnchorVariant::Cosine).is_err());
        assert!(anchor_losses(&s, &snap, AnchorVariant::L2).is_ok());
    }

    #[test]
    fn replay_multiplier_scales_route_term() {
        let s = small_state();
        let cfg = TrainConfig::default();
        let mut ex = Example::new(vec![0.4, -1.0, 0.3], 2, "d");
        let cands = CandidateSet {
            indices: vec![3, 2, 0],
            positive_pos: 1,
        };
        fn item<'a>(ex: &'a Example, cands: &CandidateSet) -> BatchItem<'a> {
            BatchItem {
                example: ex,
                candidates: cands.clone(),
                targets: Targets::Hard,
            }
        }
        let (plain, _) = loss_and_grads(&s, None, &[item(&ex, &cands)], &cfg).unwrap();
        let z = s.embed_query(&ex.features).unwrap();
        let scores = s.score(z.view(), &cands.indices).unwrap();
        assert_abs_diff_eq!(plain.total, routing_loss(&scores, 1, &Targets::Hard), epsilon = 1e-12);
        ex.from_replay = true;
        let (replayed, _) = loss_and_grads(&s, None, &[item(&ex, &cands)], &cfg).unwrap();
        assert_abs_diff_eq!(replayed.route, 5.0 * plain.route, epsilon = 1e-12);
    }
}
