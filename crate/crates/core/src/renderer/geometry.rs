use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{Camera, RenderError, ALPHA_MAX, ALPHA_MIN, COV2D_DILATION, TRANSMITTANCE_MIN, ZNEAR};

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotmat(q: &[f64; 4]) -> Result<Matrix3<f64>, RenderError> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(RenderError::ZeroRotation);
    }
    let [w, x, y, z] = q.map(|v| v / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// `R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance_3d(rot: &[f64; 4], log_scale: &[f64; 3]) -> Result<Matrix3<f64>, RenderError> {
    let r = quat_to_rotmat(rot)?;
    let m = r * Matrix3::from_diagonal(&Vector3::from(log_scale.map(f64::exp)));
    Ok(m * m.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    /// Dilated screen-space covariance.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub cam_point: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
}

/// Pinhole Jacobian of `(x, y, z) -> (fx x / z + cx, fy y / z + cy)`.
pub(crate) fn pinhole_jacobian(p: &Vector3<f64>, focal: [f64; 2]) -> Matrix2x3<f64> {
    let [fx, fy] = focal;
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * p.x * iz * iz,
        0.0,
        fy * iz,
        -fy * p.y * iz * iz,
    )
}

/// Screen-space mean and covariance of a world-space Gaussian. Returns `None`
/// when the center is not beyond the near plane.
pub fn project(mu: &[f64; 3], cov3d: &Matrix3<f64>, cam: &Camera) -> Option<Projection> {
    let w = cam.world_to_cam.rotation_matrix();
    let p = cam.world_to_cam.apply(mu);
    if !(p.z > ZNEAR) {
        return None;
    }
    let j = pinhole_jacobian(&p, cam.focal);
    let cov_cam = w * cov3d * w.transpose();
    let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * COV2D_DILATION;
    let mean2d = Vector2::new(
        cam.focal[0] * p.x / p.z + cam.principal[0],
        cam.focal[1] * p.y / p.z + cam.principal[1],
    );
    Some(Projection {
        mean2d,
        cov2d,
        depth: p.z,
        cam_point: p,
        jacobian: j,
    })
}

/// Inverse of a symmetric 2×2 stored as `(a, b, c)` = `[[a, b], [b, c]]`.
pub(crate) fn conic_of(cov: &Matrix2<f64>) -> Option<[f64; 3]> {
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    Some([c * inv, -b * inv, a * inv])
}

/// Mahalanobis exponent `-½ δᵀ Σ⁻¹ δ` for a conic `(a, b, c)`.
#[inline]
pub(crate) fn gaussian_power(conic: &[f64; 3], dx: f64, dy: f64) -> f64 {
    -0.5 * (conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy)
}

/// Clamped per-pixel opacity; `0` when the contribution falls below the
/// cutoff and would be dropped.
pub fn effective_opacity(
    alpha: f64,
    delta: [f64; 2],
    cov2d: &Matrix2<f64>,
) -> Result<f64, RenderError> {
    let conic = conic_of(cov2d).ok_or(RenderError::SingularCovariance { index: 0 })?;
    let a = (alpha * gaussian_power(&conic, delta[0], delta[1]).exp()).min(ALPHA_MAX);
    Ok(if a < ALPHA_MIN { 0.0 } else { a })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    /// Transmittance left after the last blended contribution.
    pub final_transmittance: f64,
    /// `Σ α'ᵢ Tᵢ` accumulated independently of the transmittance product.
    pub weight_sum: f64,
    /// Number of contributions actually blended.
    pub used: usize,
}

/// Front-to-back blending of `(color, α')` pairs over a background.
pub fn composite_pixel(contributions: &[([f64; 3], f64)], background: [f64; 3]) -> Composite {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    let mut weight_sum = 0.0;
    let mut used = 0;
    for (c, a) in contributions {
        if *a < ALPHA_MIN {
            continue;
        }
        let w = a * t;
        for k in 0..3 {
            color[k] += c[k] * w;
        }
        weight_sum += w;
        t *= 1.0 - a;
        used += 1;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    for k in 0..3 {
        color[k] += background[k] * t;
    }
    Composite {
        color,
        final_transmittance: t,
        weight_sum,
        used,
    }
}
