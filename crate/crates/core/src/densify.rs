//! Adaptive density control for the densification phase: clone small
//! Gaussians with large view-space positional gradients, split large ones,
//! and prune near-transparent ones.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::renderer::{quat_to_rotmat, GradBuffer, SceneModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensifyError {
    #[error("invalid densify config: {0}")]
    InvalidConfig(String),
    #[error("densify requested at t={t} after densification ended at {t_d}")]
    AfterDensifyEnd { t: u64, t_d: u64 },
    #[error("densify requested at t={t}, not a multiple of interval {interval}")]
    OffInterval { t: u64, interval: u64 },
    #[error("statistics cover {stats} gaussians, scene has {scene}")]
    ShapeMismatch { stats: usize, scene: usize },
    #[error("pruning at t={t} would remove every gaussian")]
    EmptyScene { t: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub interval: u64,
    /// Threshold on the mean view-space positional gradient, in pixel units.
    pub grad_threshold: f64,
    /// Fraction of the scene extent separating clone from split.
    pub size_threshold: f64,
    pub split_factor: f64,
    pub opacity_prune_eps: f64,
    pub t_d: u64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            grad_threshold: 2e-4,
            size_threshold: 0.01,
            split_factor: 1.6,
            opacity_prune_eps: 0.005,
            t_d: 1500,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<(), DensifyError> {
        let bad = |m: &str| Err(DensifyError::InvalidConfig(m.to_string()));
        if self.interval == 0 {
            return bad("interval must be at least 1");
        }
        if !(self.grad_threshold > 0.0 && self.size_threshold > 0.0 && self.opacity_prune_eps > 0.0) {
            return bad("thresholds must be positive");
        }
        if !(self.split_factor > 1.0) {
            return bad("split_factor must exceed 1");
        }
        Ok(())
    }
}

/// Running sums of the view-space positional gradient since the last
/// densify event. Only backward passes in which a Gaussian was visible count
/// towards its mean.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u64>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.iter().all(|c| *c == 0)
    }

    pub fn mean(&self, i: usize) -> Option<f64> {
        (self.count[i] > 0).then(|| self.sum[i] / self.count[i] as f64)
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }
}

pub fn accumulate_grad_stats(buffer: &GradBuffer, stats: &mut GradStats) -> Result<(), DensifyError> {
    if buffer.len() != stats.len() {
        return Err(DensifyError::ShapeMismatch {
            stats: stats.len(),
            scene: buffer.len(),
        });
    }
    for i in 0..buffer.len() {
        if buffer.visible[i] {
            stats.sum[i] += buffer.pos_grad_norm2d[i];
            stats.count[i] += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyEvent {
    pub t: u64,
    pub before: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyOutcome {
    /// For each new row, the old row whose optimizer moments it keeps.
    pub layout: Vec<Option<usize>>,
    pub event: DensifyEvent,
}

/// One densify event at iteration `t`. Survivors keep their relative order
/// and come first, followed by clones and then split children. Resets
/// `stats` to the new count.
pub fn densify_and_prune<R: Rng>(
    scene: &mut SceneModel,
    stats: &mut GradStats,
    cfg: &DensifyConfig,
    t: u64,
    extent: f64,
    rng: &mut R,
) -> Result<DensifyOutcome, DensifyError> {
    cfg.validate()?;
    if t > cfg.t_d {
        return Err(DensifyError::AfterDensifyEnd { t, t_d: cfg.t_d });
    }
    if !t.is_multiple_of(cfg.interval) {
        return Err(DensifyError::OffInterval {
            t,
            interval: cfg.interval,
        });
    }
    if stats.len() != scene.len() {
        return Err(DensifyError::ShapeMismatch {
            stats: stats.len(),
            scene: scene.len(),
        });
    }

    let size_limit = cfg.size_threshold * extent;
    let mut kept = Vec::new();
    let mut layout = Vec::new();
    let mut fresh = Vec::new();
    let mut children = Vec::new();
    let (mut cloned, mut split, mut pruned) = (0, 0, 0);

    for (i, g) in scene.gaussians.iter().enumerate() {
        if g.opacity() < cfg.opacity_prune_eps {
            pruned += 1;
            continue;
        }
        let hot = stats.mean(i).is_some_and(|m| m > cfg.grad_threshold);
        let max_scale = g.scales().into_iter().fold(f64::MIN, f64::max);
        if hot && max_scale > size_limit {
            split += 1;
            let r = quat_to_rotmat(&g.rot).expect("scene validated by the last render");
            let s = g.scales();
            let child_log_scale = g.log_scale.map(|l| l - cfg.split_factor.ln());
            for _ in 0..2 {
                let z: [f64; 3] = std::array::from_fn(|k| s[k] * rng.sample::<f64, _>(StandardNormal));
                let offset = r * nalgebra::Vector3::from(z);
                let mut c = *g;
                c.mu = std::array::from_fn(|k| g.mu[k] + offset[k]);
                c.log_scale = child_log_scale;
                children.push(c);
            }
            continue;
        }
        kept.push(*g);
        layout.push(Some(i));
        if hot {
            cloned += 1;
            fresh.push(*g);
        }
    }

    let before = scene.len();
    let after = kept.len() + fresh.len() + children.len();
    if after == 0 {
        return Err(DensifyError::EmptyScene { t });
    }
    layout.extend(std::iter::repeat_n(None, fresh.len() + children.len()));
    kept.extend(fresh);
    kept.extend(children);
    scene.gaussians = kept;
    stats.reset(after);
    Ok(DensifyOutcome {
        layout,
        event: DensifyEvent {
            t,
            before,
            cloned,
            split,
            pruned,
            after,
        },
    })
}
