//! Adaptive-moment optimizer with decoupled weight decay and per-group rates.

use std::collections::HashMap;

use ndarray::ArrayViewMut1;

use super::{AdamConfig, Gradients};
use crate::error::{Error, Result};
use crate::router::RouterState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Projection,
    Embedding,
}

impl ParamGroup {
    fn name(self) -> &'static str {
        match self {
            ParamGroup::Projection => "projection",
            ParamGroup::Embedding => "embedding",
        }
    }
}

/// First and second moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Applies one update at 1-based `step`:
///
/// ```text
/// p <- p - lr * wd * p
/// m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub fn adamw_step(
    mut params: ArrayViewMut1<'_, f64>,
    grads: &[f64],
    moments: &mut Moments,
    cfg: &AdamConfig,
    lr: f64,
    group: ParamGroup,
    step: u64,
) -> Result<()> {
    if params.len() != grads.len() || moments.m.len() != grads.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient(group.name()));
    }
    let t = step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        *p -= lr * cfg.weight_decay * *p;
        let m = &mut moments.m[i];
        let v = &mut moments.v[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
    }
    moments.step = step;
    Ok(())
}

/// Optimizer state for a router: dense moments for the projection and lazily
/// created per-row moments for embedding rows that have received gradient.
#[derive(Debug, Clone, Default)]
pub struct RouterOptimizer {
    pub cfg: AdamConfig,
    projection: Moments,
    rows: HashMap<usize, Moments>,
}

impl RouterOptimizer {
    pub fn new(cfg: AdamConfig) -> Self {
        RouterOptimizer {
            cfg,
            projection: Moments::default(),
            rows: HashMap::new(),
        }
    }

    pub fn step(&mut self, state: &mut RouterState, grads: &Gradients, lr_proj: f64, lr_emb: f64) -> Result<()> {
        if self.projection.m.len() != state.projection.len() {
            self.projection = Moments::zeros(state.projection.len());
        }
        let next = self.projection.step + 1;
        let flat = grads
            .projection
            .as_slice()
            .ok_or_else(|| Error::InvalidConfig("non-contiguous projection gradient".into()))?;
        let params = state
            .projection
            .as_slice_mut()
            .ok_or_else(|| Error::InvalidConfig("non-contiguous projection".into()))?;
        adamw_step(
            ArrayViewMut1::from(params),
            flat,
            &mut self.projection,
            &self.cfg,
            lr_proj,
            ParamGroup::Projection,
            next,
        )?;

        let d = state.embed_dim();
        for (&m, g) in &grads.embeddings {
            let moments = self.rows.entry(m).or_insert_with(|| Moments::zeros(d));
            let next = moments.step + 1;
            let g = g.as_slice().expect("owned rows are contiguous");
            adamw_step(state.embeddings.row_mut(m), g, moments, &self.cfg, lr_emb, ParamGroup::Embedding, next)?;
        }
        Ok(())
    }
}
