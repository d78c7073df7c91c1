//! Differentiable CPU splatting of anisotropic 3D Gaussians.
//!
//! Forward: factor each covariance from a quaternion and log-scales, project
//! it to screen space with the local affine (EWA) approximation, then
//! alpha-composite depth-sorted splats front to back per pixel.
//!
//! Backward: the analytic adjoint of the forward, reduced over pixels in a
//! fixed row-major order so results do not depend on the worker count.

mod geometry;
mod raster;

pub use geometry::{
    composite_pixel, covariance_3d, effective_opacity, project, quat_to_rotmat, Composite,
    Projection,
};
pub use raster::{render, render_backward, GradBuffer, ProjectedGaussian, RenderOutput};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ZNEAR: f64 = 0.01;
/// Added to both diagonal entries of every screen-space covariance (px²).
pub const COV2D_DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const BBOX_SIGMAS: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("gaussian {index} has a non-finite parameter")]
    NonFinite { index: usize },
    #[error("gaussian {index} has a zero quaternion")]
    ZeroQuaternion { index: usize },
    #[error("zero quaternion")]
    ZeroRotation,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("singular screen-space covariance for gaussian {index}")]
    SingularCovariance { index: usize },
}

/// Number of learnable scalars per Gaussian.
pub const PARAM_DIM: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Position,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Color,
    ];

    /// Slice of the flat per-Gaussian parameter vector owned by this group.
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            ParamGroup::Position => 0..3,
            ParamGroup::Rotation => 3..7,
            ParamGroup::Scale => 7..10,
            ParamGroup::Opacity => 10..11,
            ParamGroup::Color => 11..14,
        }
    }

    pub fn of_index(k: usize) -> ParamGroup {
        *Self::ALL
            .iter()
            .find(|g| g.range().contains(&k))
            .expect("parameter index out of range")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mu: [f64; 3],
    /// Quaternion `(w, x, y, z)`; normalized before use.
    pub rot: [f64; 4],
    /// Log of per-axis standard deviations.
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    /// Constant (degree-0) RGB color, unconstrained.
    pub color: [f64; 3],
}

impl Gaussian3D {
    pub fn to_params(&self) -> [f64; PARAM_DIM] {
        let mut p = [0.0; PARAM_DIM];
        p[0..3].copy_from_slice(&self.mu);
        p[3..7].copy_from_slice(&self.rot);
        p[7..10].copy_from_slice(&self.log_scale);
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(&self.color);
        p
    }

    pub fn from_params(p: &[f64; PARAM_DIM]) -> Self {
        Self {
            mu: [p[0], p[1], p[2]],
            rot: [p[3], p[4], p[5], p[6]],
            log_scale: [p[7], p[8], p[9]],
            opacity_logit: p[10],
            color: [p[11], p[12], p[13]],
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub gaussians: Vec<Gaussian3D>,
    pub background: [f64; 3],
}

impl SceneModel {
    pub fn new(gaussians: Vec<Gaussian3D>, background: [f64; 3]) -> Self {
        Self {
            gaussians,
            background,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Row-major rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn rotation_matrix(&self) -> nalgebra::Matrix3<f64> {
        let r = &self.rotation;
        nalgebra::Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn translation_vector(&self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::from(self.translation)
    }

    pub fn apply(&self, p: &[f64; 3]) -> nalgebra::Vector3<f64> {
        self.rotation_matrix() * nalgebra::Vector3::from(*p) + self.translation_vector()
    }
}

/// Pinhole camera; camera space is x right, y down, z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub world_to_cam: RigidTransform,
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    /// `(width, height)` in pixels.
    pub size: [usize; 2],
    pub view_id: u32,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` roughly pointing up in
    /// the image.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: [f64; 2],
        size: [usize; 2],
        view_id: u32,
    ) -> Self {
        use nalgebra::Vector3;
        let eye_v = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye_v).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        let rows = [right, down, forward];
        let rotation = rows.map(|r| [r.x, r.y, r.z]);
        let t = -(nalgebra::Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]) * eye_v);
        Self {
            world_to_cam: RigidTransform {
                rotation,
                translation: [t.x, t.y, t.z],
            },
            focal,
            principal: [size[0] as f64 / 2.0, size[1] as f64 / 2.0],
            size,
            view_id,
        }
    }

    pub fn width(&self) -> usize {
        self.size[0]
    }

    pub fn height(&self) -> usize {
        self.size[1]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r = self.world_to_cam.rotation_matrix();
        let c = -(r.transpose() * self.world_to_cam.translation_vector());
        [c.x, c.y, c.z]
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let r = self.world_to_cam.rotation_matrix();
        let err = (r * r.transpose() - nalgebra::Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(RenderError::InvalidCamera(format!(
                "rotation is not orthonormal (error {err:e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(RenderError::InvalidCamera("rotation has negative determinant".into()));
        }
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(RenderError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.size[0] < 4 || self.size[1] < 4 {
            return Err(RenderError::InvalidCamera("image must be at least 4x4".into()));
        }
        let finite = self.focal.iter().chain(&self.principal).all(|v| v.is_finite())
            && self.world_to_cam.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(RenderError::InvalidCamera("non-finite intrinsics or translation".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_round_trip() {
        let g = Gaussian3D {
            mu: [1.0, 2.0, 3.0],
            rot: [0.5, 0.5, 0.5, 0.5],
            log_scale: [-1.0, -2.0, -3.0],
            opacity_logit: 0.7,
            color: [0.1, 0.2, 0.3],
        };
        assert_eq!(Gaussian3D::from_params(&g.to_params()), g);
        for group in ParamGroup::ALL {
            for k in group.range() {
                assert_eq!(ParamGroup::of_index(k), group);
            }
        }
    }

    #[test]
    fn look_at_is_valid_and_centered() {
        let cam = Camera::look_at([4.0, 0.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0], [80.0, 80.0], [64, 48], 3);
        cam.validate().unwrap();
        let c = cam.center();
        assert!((c[0] - 4.0).abs() < 1e-12 && c[1].abs() < 1e-12 && (c[2] - 1.0).abs() < 1e-12);
        let origin = cam.world_to_cam.apply(&[0.0; 3]);
        assert!(origin.x.abs() < 1e-12 && origin.y.abs() < 1e-12);
        assert!((origin.z - 17f64.sqrt()).abs() < 1e-12);
        // world up projects above the principal point (smaller y)
        let above = cam.world_to_cam.apply(&[0.0, 0.0, 0.5]);
        assert!(above.y < 0.0);
    }

    #[test]
    fn camera_validation_rejects_bad_input() {
        let good = Camera::look_at([4.0, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], [80.0, 80.0], [8, 8], 0);
        let mut c = good.clone();
        c.focal[0] = 0.0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.size = [3, 8];
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.world_to_cam.rotation[0][0] += 1e-3;
        assert!(c.validate().is_err());
    }
}
