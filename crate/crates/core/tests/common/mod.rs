//! Test-only oracles. Outside `checks`, nothing here calls the analytic
//! backward passes.
#![allow(dead_code)]

pub mod bin;
pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skipgs::renderer::{
    logit, render, Camera, Gaussian3D, SceneModel, ALPHA_MAX, ALPHA_MIN, PARAM_DIM,
};
use skipgs::Image;

pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let fp = f(&probe);
            probe[i] = x[i] - h;
            let fm = f(&probe);
            probe[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all entries. `floor` keeps
/// entries that are zero in both routes from dividing by zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| ((a - n).abs() / a.abs().max(n.abs()).max(floor), i))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

pub fn flatten_scene(scene: &SceneModel) -> Vec<f64> {
    scene.gaussians.iter().flat_map(|g| g.to_params()).collect()
}

pub fn unflatten_scene(flat: &[f64], background: [f64; 3]) -> SceneModel {
    let gaussians = flat
        .chunks_exact(PARAM_DIM)
        .map(|c| Gaussian3D::from_params(c.try_into().unwrap()))
        .collect();
    SceneModel::new(gaussians, background)
}

/// `Σ w · image`, the scalar whose gradient wrt the image is `w`.
pub fn weighted_sum(image: &Image, weights: &Image) -> f64 {
    image.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, lo: f64, hi: f64) -> Image {
    Image::from_data(w, h, (0..w * h * 3).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Random small scene seen by a random off-axis camera, drawn so that every
/// splat covers the whole image well inside its 3σ box, no opacity is
/// clamped or dropped, and transmittance never triggers early termination.
/// Depths are kept apart so the sort order is stable under perturbation.
/// Finite differences are only meaningful in that smooth regime.
pub fn smooth_random_scene(seed: u64, n: usize, size: usize) -> (SceneModel, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let az: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let el: f64 = rng.gen_range(-0.4..0.4);
        let dist = 4.0;
        let eye = [dist * el.cos() * az.cos(), dist * el.cos() * az.sin(), dist * el.sin()];
        let mut cam = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], [12.0, 12.0], [size, size], 0);
        cam.principal = [size as f64 / 2.0 - 0.5, size as f64 / 2.0 - 0.5];

        let gaussians: Vec<Gaussian3D> = (0..n)
            .map(|_| {
                let mu = [
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                ];
                let norm = rng.gen_range(0.5..2.0);
                let mut q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                q.iter_mut().for_each(|v| *v *= norm / qn);
                Gaussian3D {
                    mu,
                    rot: q,
                    log_scale: std::array::from_fn(|_| rng.gen_range(0.9f64..1.8).ln()),
                    opacity_logit: logit(rng.gen_range(0.2..0.7)),
                    color: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
                }
            })
            .collect();
        let background = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let scene = SceneModel::new(gaussians, background);
        if is_smooth(&scene, &cam) {
            return (scene, cam);
        }
    }
}

fn is_smooth(scene: &SceneModel, cam: &Camera) -> bool {
    let Ok(out) = render(scene, cam) else {
        return false;
    };
    let (w, h) = (cam.width(), cam.height());
    if out.visible.iter().any(|v| !v) {
        return false;
    }
    let mut depths: Vec<f64> = out.per_gaussian.iter().map(|p| p.depth).collect();
    depths.sort_by(f64::total_cmp);
    if depths.windows(2).any(|d| d[1] - d[0] < 1e-2) {
        return false;
    }
    for p in &out.per_gaussian {
        let (a, b, c) = (p.cov2d[0], p.cov2d[1], p.cov2d[2]);
        let mid = 0.5 * (a + c);
        let r = 3.0 * (mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt()).sqrt();
        let margin = 0.5;
        if p.mean2d[0] - r > -margin
            || p.mean2d[0] + r < (w - 1) as f64 + margin
            || p.mean2d[1] - r > -margin
            || p.mean2d[1] + r < (h - 1) as f64 + margin
        {
            return false;
        }
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - p.mean2d[0], y as f64 - p.mean2d[1]);
                let power = -0.5 * (p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy);
                let a = p.alpha * power.exp();
                if a < 2.0 * ALPHA_MIN || a > 0.98 * ALPHA_MAX {
                    return false;
                }
            }
        }
    }
    out.final_transmittance.iter().all(|t| *t > 1e-3)
}
