use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::geometry::{conic_of, gaussian_power, pinhole_jacobian, project, quat_to_rotmat};
use super::{
    sigmoid, Camera, RenderError, SceneModel, ALPHA_MAX, ALPHA_MIN, BBOX_SIGMAS, PARAM_DIM,
    TRANSMITTANCE_MIN,
};
use crate::image::Image;

/// Screen-space footprint of one Gaussian for the current camera.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: [f64; 2],
    /// `(a, b, c)` of `[[a, b], [b, c]]`.
    pub cov2d: [f64; 3],
    pub conic: [f64; 3],
    pub depth: f64,
    pub alpha: f64,
    pub color: [f64; 3],
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of the 3σ box, clipped to the image.
    pub bbox: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    pub per_gaussian: Vec<ProjectedGaussian>,
    pub visible: Vec<bool>,
    /// Visible Gaussians, front to back; depth ties go to the lower index.
    pub order: Vec<usize>,
    pub final_transmittance: Vec<f64>,
    /// Per pixel `Σ α'ᵢ Tᵢ`, accumulated separately from the transmittance.
    pub weight_sum: Vec<f64>,
    pub n_contrib: Vec<u32>,
    /// For each row, the depth-ordered Gaussians whose box spans that row.
    row_candidates: Vec<Vec<u32>>,
}

/// Per-Gaussian gradients in the flat parameter layout of
/// [`Gaussian3D::to_params`](super::Gaussian3D::to_params).
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub params: Vec<[f64; PARAM_DIM]>,
    /// `‖∂L/∂mean2d‖` in pixels for this backward pass.
    pub pos_grad_norm2d: Vec<f64>,
    pub visible: Vec<bool>,
}

impl GradBuffer {
    pub fn zeros(n: usize) -> Self {
        Self {
            params: vec![[0.0; PARAM_DIM]; n],
            pos_grad_norm2d: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn mu(&self, i: usize) -> [f64; 3] {
        let p = &self.params[i];
        [p[0], p[1], p[2]]
    }

    pub fn rot(&self, i: usize) -> [f64; 4] {
        let p = &self.params[i];
        [p[3], p[4], p[5], p[6]]
    }

    pub fn log_scale(&self, i: usize) -> [f64; 3] {
        let p = &self.params[i];
        [p[7], p[8], p[9]]
    }

    pub fn opacity_logit(&self, i: usize) -> f64 {
        self.params[i][10]
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        let p = &self.params[i];
        [p[11], p[12], p[13]]
    }
}

/// One blended splat at one pixel.
#[derive(Debug, Clone, Copy)]
struct Contribution {
    /// Position in the row's candidate list.
    slot: u32,
    alpha_eff: f64,
    /// `exp(power)`; only meaningful when not clamped.
    falloff: f64,
    clamped: bool,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

/// Walks a pixel's candidates front to back, returning the final
/// transmittance. `buf` receives every blended contribution.
fn gather_pixel(
    candidates: &[u32],
    proj: &[ProjectedGaussian],
    x: usize,
    y: usize,
    buf: &mut Vec<Contribution>,
) -> f64 {
    buf.clear();
    let (px, py) = (x as f64, y as f64);
    let mut t = 1.0;
    for (slot, &i) in candidates.iter().enumerate() {
        let g = &proj[i as usize];
        if x < g.bbox[0] || x > g.bbox[1] {
            continue;
        }
        let dx = px - g.mean2d[0];
        let dy = py - g.mean2d[1];
        let falloff = gaussian_power(&g.conic, dx, dy).exp();
        let raw = g.alpha * falloff;
        let clamped = raw > ALPHA_MAX;
        let a = if clamped { ALPHA_MAX } else { raw };
        if a < ALPHA_MIN {
            continue;
        }
        buf.push(Contribution {
            slot: slot as u32,
            alpha_eff: a,
            falloff,
            clamped,
            transmittance: t,
            dx,
            dy,
        });
        t *= 1.0 - a;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    t
}

fn check_camera_and_scene(scene: &SceneModel, cam: &Camera) -> Result<(), RenderError> {
    cam.validate()?;
    for (index, g) in scene.gaussians.iter().enumerate() {
        if !g.is_finite() {
            return Err(RenderError::NonFinite { index });
        }
        if g.rot.iter().all(|v| *v == 0.0) {
            return Err(RenderError::ZeroQuaternion { index });
        }
    }
    if !scene.background.iter().all(|v| v.is_finite()) {
        return Err(RenderError::ShapeMismatch("non-finite background".into()));
    }
    Ok(())
}

fn project_all(
    scene: &SceneModel,
    cam: &Camera,
) -> Result<(Vec<ProjectedGaussian>, Vec<bool>), RenderError> {
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let mut proj = vec![ProjectedGaussian::default(); scene.len()];
    let mut visible = vec![false; scene.len()];
    for (index, g) in scene.gaussians.iter().enumerate() {
        let cov3d = super::covariance_3d(&g.rot, &g.log_scale)
            .map_err(|_| RenderError::ZeroQuaternion { index })?;
        let Some(p) = project(&g.mu, &cov3d, cam) else {
            continue;
        };
        let conic = conic_of(&p.cov2d).ok_or(RenderError::SingularCovariance { index })?;
        let (a, b, c) = (p.cov2d[(0, 0)], p.cov2d[(0, 1)], p.cov2d[(1, 1)]);
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        let r = BBOX_SIGMAS * lambda_max.sqrt();
        let (mx, my) = (p.mean2d.x, p.mean2d.y);
        let x0 = (mx - r).ceil().max(0.0);
        let x1 = (mx + r).floor().min(w - 1.0);
        let y0 = (my - r).ceil().max(0.0);
        let y1 = (my + r).floor().min(h - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        visible[index] = true;
        proj[index] = ProjectedGaussian {
            mean2d: [mx, my],
            cov2d: [a, b, c],
            conic,
            depth: p.depth,
            alpha: sigmoid(g.opacity_logit),
            color: g.color,
            bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
        };
    }
    Ok((proj, visible))
}

pub fn render(scene: &SceneModel, cam: &Camera) -> Result<RenderOutput, RenderError> {
    check_camera_and_scene(scene, cam)?;
    let (width, height) = (cam.width(), cam.height());
    let (proj, visible) = project_all(scene, cam)?;

    let mut order: Vec<usize> = (0..scene.len()).filter(|&i| visible[i]).collect();
    order.sort_by(|&i, &j| proj[i].depth.total_cmp(&proj[j].depth).then(i.cmp(&j)));

    let row_candidates: Vec<Vec<u32>> = (0..height)
        .map(|y| {
            order
                .iter()
                .filter(|&&i| proj[i].bbox[2] <= y && y <= proj[i].bbox[3])
                .map(|&i| i as u32)
                .collect()
        })
        .collect();

    let bg = scene.background;
    let mut image = Image::new(width, height);
    let mut final_transmittance = vec![0.0; width * height];
    let mut weight_sum = vec![0.0; width * height];
    let mut n_contrib = vec![0u32; width * height];

    image
        .data
        .par_chunks_mut(width * 3)
        .zip(final_transmittance.par_chunks_mut(width))
        .zip(weight_sum.par_chunks_mut(width))
        .zip(n_contrib.par_chunks_mut(width))
        .enumerate()
        .for_each(|(y, (((row, t_row), w_row), n_row))| {
            let cands = &row_candidates[y];
            let mut buf = Vec::new();
            for x in 0..width {
                let t_final = gather_pixel(cands, &proj, x, y, &mut buf);
                let mut color = [0.0; 3];
                let mut wsum = 0.0;
                for c in &buf {
                    let g = &proj[cands[c.slot as usize] as usize];
                    let w = c.alpha_eff * c.transmittance;
                    for k in 0..3 {
                        color[k] += g.color[k] * w;
                    }
                    wsum += w;
                }
                for k in 0..3 {
                    row[x * 3 + k] = color[k] + bg[k] * t_final;
                }
                t_row[x] = t_final;
                w_row[x] = wsum;
                n_row[x] = buf.len() as u32;
            }
        });

    Ok(RenderOutput {
        image,
        per_gaussian: proj,
        visible,
        order,
        final_transmittance,
        weight_sum,
        n_contrib,
        row_candidates,
    })
}

/// Screen-space adjoints of one Gaussian, summed over pixels:
/// `[mean_x, mean_y, conic_a, conic_b, conic_c, alpha, r, g, b]`.
/// `conic_b` is the gradient of each off-diagonal entry of the full
/// symmetric matrix.
type ScreenGrad = [f64; 9];

pub fn render_backward(
    scene: &SceneModel,
    cam: &Camera,
    output: &RenderOutput,
    dl_dimage: &Image,
) -> Result<GradBuffer, RenderError> {
    let n = scene.len();
    let (width, height) = (cam.width(), cam.height());
    if output.per_gaussian.len() != n || output.visible.len() != n {
        return Err(RenderError::ShapeMismatch(format!(
            "render output holds {} gaussians, scene has {n}",
            output.per_gaussian.len()
        )));
    }
    if dl_dimage.shape() != (width, height) || output.image.shape() != (width, height) {
        return Err(RenderError::ShapeMismatch(format!(
            "gradient image {:?} vs camera {:?}",
            dl_dimage.shape(),
            (width, height)
        )));
    }
    let proj = &output.per_gaussian;
    let bg = scene.background;

    // Per-row partial sums, reduced below in row order so the result is
    // independent of how rows were scheduled.
    let row_partials: Vec<Vec<ScreenGrad>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let cands = &output.row_candidates[y];
            let mut acc = vec![[0.0; 9]; cands.len()];
            let mut buf = Vec::new();
            for x in 0..width {
                let gi = dl_dimage.index(x, y);
                let g = [dl_dimage.data[gi], dl_dimage.data[gi + 1], dl_dimage.data[gi + 2]];
                if g == [0.0; 3] {
                    continue;
                }
                let t_final = gather_pixel(cands, proj, x, y, &mut buf);
                let mut after = [bg[0] * t_final, bg[1] * t_final, bg[2] * t_final];
                for c in buf.iter().rev() {
                    let pg = &proj[cands[c.slot as usize] as usize];
                    let slot = &mut acc[c.slot as usize];
                    let (a, ti) = (c.alpha_eff, c.transmittance);
                    let mut dl_da = 0.0;
                    for k in 0..3 {
                        slot[6 + k] += g[k] * a * ti;
                        dl_da += g[k] * (pg.color[k] * ti - after[k] / (1.0 - a));
                        after[k] += pg.color[k] * a * ti;
                    }
                    if c.clamped {
                        continue;
                    }
                    slot[5] += dl_da * c.falloff;
                    let dl_dpower = dl_da * a;
                    let [ca, cb, cc] = pg.conic;
                    let (dx, dy) = (c.dx, c.dy);
                    slot[0] += dl_dpower * (ca * dx + cb * dy);
                    slot[1] += dl_dpower * (cb * dx + cc * dy);
                    slot[2] += dl_dpower * (-0.5 * dx * dx);
                    slot[3] += dl_dpower * (-0.5 * dx * dy);
                    slot[4] += dl_dpower * (-0.5 * dy * dy);
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![[0.0; 9]; n];
    for (y, acc) in row_partials.iter().enumerate() {
        for (slot, &i) in output.row_candidates[y].iter().enumerate() {
            let dst = &mut screen[i as usize];
            for k in 0..9 {
                dst[k] += acc[slot][k];
            }
        }
    }

    let w = cam.world_to_cam.rotation_matrix();
    let per_gaussian: Vec<([f64; PARAM_DIM], f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !output.visible[i] {
                return ([0.0; PARAM_DIM], 0.0);
            }
            let sg = &screen[i];
            gaussian_backward(&scene.gaussians[i], cam, &w, &proj[i], sg)
        })
        .collect();

    let mut grads = GradBuffer::zeros(n);
    for (i, (p, norm)) in per_gaussian.into_iter().enumerate() {
        grads.params[i] = p;
        grads.pos_grad_norm2d[i] = norm;
        grads.visible[i] = output.visible[i];
    }
    Ok(grads)
}

/// Chain rule from screen-space adjoints back to raw parameters.
fn gaussian_backward(
    gauss: &super::Gaussian3D,
    cam: &Camera,
    w: &Matrix3<f64>,
    proj: &ProjectedGaussian,
    sg: &ScreenGrad,
) -> ([f64; PARAM_DIM], f64) {
    let mut out = [0.0; PARAM_DIM];
    let [fx, fy] = cam.focal;

    // conic = cov⁻¹  =>  dL/dcov = -conic G conic
    let conic = Matrix2::new(proj.conic[0], proj.conic[1], proj.conic[1], proj.conic[2]);
    let g_conic = Matrix2::new(sg[2], sg[3], sg[3], sg[4]);
    let g_cov2d = -(conic * g_conic * conic);

    let r = quat_to_rotmat(&gauss.rot).expect("validated in forward");
    let scales = Vector3::from(gauss.log_scale.map(f64::exp));
    let m = r * Matrix3::from_diagonal(&scales);
    let sigma = m * m.transpose();
    let sigma_cam = w * sigma * w.transpose();
    let p = cam.world_to_cam.apply(&gauss.mu);
    let j: Matrix2x3<f64> = pinhole_jacobian(&p, cam.focal);

    // cov2d = J Σc Jᵀ + dilation
    let g_sigma_cam = j.transpose() * g_cov2d * j;
    let g_j = 2.0 * g_cov2d * j * sigma_cam;
    // Σc = W Σ Wᵀ, Σ = M Mᵀ, M = R S
    let g_sigma = w.transpose() * g_sigma_cam * w;
    let g_m = 2.0 * g_sigma * m;
    let g_r = g_m * Matrix3::from_diagonal(&scales);
    let g_s = r.transpose() * g_m;
    for k in 0..3 {
        out[7 + k] = g_s[(k, k)] * scales[k];
    }
    let gq = rotation_grad_to_quat(&gauss.rot, &g_r);
    out[3..7].copy_from_slice(&gq);

    // mean2d and J both depend on the camera-space center.
    let (x, y, z) = (p.x, p.y, p.z);
    let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
    let (gmx, gmy) = (sg[0], sg[1]);
    let g_p = Vector3::new(
        gmx * fx * iz + g_j[(0, 2)] * (-fx * iz2),
        gmy * fy * iz + g_j[(1, 2)] * (-fy * iz2),
        gmx * (-fx * x * iz2)
            + gmy * (-fy * y * iz2)
            + g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * x * iz3)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * y * iz3),
    );
    let g_mu = w.transpose() * g_p;
    out[0..3].copy_from_slice(&[g_mu.x, g_mu.y, g_mu.z]);

    let alpha = proj.alpha;
    out[10] = sg[5] * alpha * (1.0 - alpha);
    out[11..14].copy_from_slice(&sg[6..9]);

    (out, (gmx * gmx + gmy * gmy).sqrt())
}

/// Gradient wrt the raw (unnormalized) quaternion given `dL/dR`.
fn rotation_grad_to_quat(q_raw: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let norm = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q_raw.map(|v| v / norm);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gn = [gw, gx, gy, gz];
    let qn = [w, x, y, z];
    let dot: f64 = gn.iter().zip(&qn).map(|(a, b)| a * b).sum();
    std::array::from_fn(|k| (gn[k] - qn[k] * dot) / norm)
}
