//! Adam with per-group learning rates over the flat per-Gaussian parameter
//! layout. The trainer calls it only on iterations that ran a backward pass,
//! so `step` counts executed updates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::renderer::{GradBuffer, ParamGroup, SceneModel, PARAM_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in {group:?} group of gaussian {index}")]
    NonFiniteGradient { group: ParamGroup, index: usize },
    #[error("optimizer state has {state} rows but {what} has {other}")]
    ShapeMismatch {
        state: usize,
        what: &'static str,
        other: usize,
    },
    #[error("layout row {row} refers to old index {source_index} but only {old_count} rows exist")]
    BadLayout {
        row: usize,
        source_index: usize,
        old_count: usize,
    },
}

/// Learning rates for one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl GroupLrs {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Position => self.position,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Color => self.color,
        }
    }

    fn per_param(&self) -> [f64; PARAM_DIM] {
        std::array::from_fn(|k| self.get(ParamGroup::of_index(k)))
    }
}

/// Learning-rate schedule. The position rate decays exponentially from
/// `position_init` to `position_final` over the run and is multiplied by the
/// scene's spatial extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    /// Rates for iteration `t` of `total` (1-based).
    pub fn at(&self, t: u64, total: u64, spatial_scale: f64) -> GroupLrs {
        let p = (t as f64 / total.max(1) as f64).clamp(0.0, 1.0);
        let log_lr = (1.0 - p) * self.position_init.ln() + p * self.position_final.ln();
        GroupLrs {
            position: log_lr.exp() * spatial_scale,
            rotation: self.rotation,
            scale: self.scale,
            opacity: self.opacity,
            color: self.color,
        }
    }
}

/// Per-Gaussian L2 norms of the parameter change applied by one update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub per_gaussian_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<[f64; PARAM_DIM]>,
    pub v: Vec<[f64; PARAM_DIM]>,
    pub step: u64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl AdamState {
    pub fn new(count: usize) -> Self {
        Self {
            m: vec![[0.0; PARAM_DIM]; count],
            v: vec![[0.0; PARAM_DIM]; count],
            step: 0,
            betas: (0.9, 0.999),
            eps: 1e-15,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn adam_step(
        &mut self,
        scene: &mut SceneModel,
        grads: &GradBuffer,
        lrs: &GroupLrs,
    ) -> Result<UpdateStats, OptimError> {
        let n = self.len();
        for (what, other) in [("scene", scene.len()), ("gradient buffer", grads.len())] {
            if other != n {
                return Err(OptimError::ShapeMismatch {
                    state: n,
                    what,
                    other,
                });
            }
        }
        for (index, g) in grads.params.iter().enumerate() {
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    group: ParamGroup::of_index(k),
                    index,
                });
            }
        }

        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = lrs.per_param();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = scene.gaussians[i].to_params();
            let g = &grads.params[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut sq = 0.0;
            for k in 0..PARAM_DIM {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                let delta = lr[k] * m_hat / (v_hat.sqrt() + self.eps);
                p[k] -= delta;
                sq += delta * delta;
            }
            scene.gaussians[i] = crate::renderer::Gaussian3D::from_params(&p);
            norms.push(sq.sqrt());
        }
        Ok(UpdateStats {
            per_gaussian_norm: norms,
        })
    }

    /// Rebuilds the moment buffers after densification. `layout[r]` names the
    /// old row that new row `r` inherits moments from, or `None` for a fresh
    /// Gaussian that starts at zero.
    pub fn reshape_after_densify(
        &mut self,
        old_count: usize,
        layout: &[Option<usize>],
    ) -> Result<(), OptimError> {
        if old_count != self.len() {
            return Err(OptimError::ShapeMismatch {
                state: self.len(),
                what: "densify layout",
                other: old_count,
            });
        }
        for (row, src) in layout.iter().enumerate() {
            if let Some(s) = *src {
                if s >= old_count {
                    return Err(OptimError::BadLayout {
                        row,
                        source_index: s,
                        old_count,
                    });
                }
            }
        }
        let pick = |buf: &[[f64; PARAM_DIM]]| -> Vec<[f64; PARAM_DIM]> {
            layout
                .iter()
                .map(|src| src.map_or([0.0; PARAM_DIM], |s| buf[s]))
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
        Ok(())
    }
}
