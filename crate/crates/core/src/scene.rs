//! Synthetic ground-truth scenes, camera rings, training initialization and
//! on-disk formats (`scene.json`, binary PPM targets).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::Image;
use crate::renderer::{logit, render, Camera, Gaussian3D, RenderError, SceneModel};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("malformed ppm: {0}")]
    Ppm(String),
    #[error("malformed scene document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    PerturbedGt,
    RandomVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_gt_gaussians: usize,
    /// Radius of the ball holding the ground-truth means.
    pub extent: f64,
    pub num_cams: usize,
    /// `(width, height)` in pixels.
    pub image_size: [usize; 2],
    pub ring_radius: f64,
    /// Ring elevation above the equator, radians.
    pub ring_elevation: f64,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    pub background: [f64; 3],
    pub seed: u64,
    pub init_mode: InitMode,
    pub init_count: usize,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_gt_gaussians: 64,
            extent: 1.0,
            num_cams: 13,
            image_size: [64, 64],
            ring_radius: 4.0,
            ring_elevation: 0.35,
            fov_deg: 40.0,
            background: [0.0; 3],
            seed: 0,
            init_mode: InitMode::PerturbedGt,
            init_count: 64,
            noise_sigma: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if self.num_gt_gaussians == 0 || self.init_count == 0 {
            return bad("gaussian counts must be positive".into());
        }
        if self.num_cams < 3 {
            return bad(format!("need at least 3 cameras, got {}", self.num_cams));
        }
        if self.image_size.iter().any(|s| *s < 4) {
            return bad(format!("image size {:?} below 4x4", self.image_size));
        }
        if !(self.extent > 0.0 && self.ring_radius > self.extent) {
            return bad("ring radius must exceed a positive extent".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 170.0) {
            return bad(format!("field of view {} out of range", self.fov_deg));
        }
        if !(self.noise_sigma >= 0.0) || !self.ring_elevation.is_finite() {
            return bad("noise and elevation must be finite, noise non-negative".into());
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background must lie in [0,1]".into());
        }
        if self.init_mode == InitMode::PerturbedGt && self.init_count > self.num_gt_gaussians {
            return bad(format!(
                "init_count {} exceeds {} ground-truth gaussians",
                self.init_count, self.num_gt_gaussians
            ));
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.image_size[0] as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub gt: SceneModel,
    pub cams: Vec<Camera>,
    pub targets: Vec<Image>,
}

fn random_unit_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return q.map(|v| v / n);
        }
    }
}

fn point_in_ball(rng: &mut impl Rng, radius: f64) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return p.map(|v| v * radius);
        }
    }
}

/// Cameras evenly spaced in azimuth on a ring around the origin.
pub fn camera_ring(spec: &SceneSpec) -> Vec<Camera> {
    let f = spec.focal();
    (0..spec.num_cams)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / spec.num_cams as f64;
            let (r, el) = (spec.ring_radius, spec.ring_elevation);
            let eye = [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()];
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], [f, f], spec.image_size, i as u32)
        })
        .collect()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<GeneratedScene, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = ((0.04 * spec.extent).ln(), (0.2 * spec.extent).ln());
    let gaussians = (0..spec.num_gt_gaussians)
        .map(|_| Gaussian3D {
            mu: point_in_ball(&mut rng, spec.extent),
            rot: random_unit_quaternion(&mut rng),
            log_scale: std::array::from_fn(|_| rng.gen_range(lo..hi)),
            opacity_logit: logit(rng.gen_range(0.5..0.95)),
            color: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
        })
        .collect();
    let gt = SceneModel::new(gaussians, spec.background);
    let cams = camera_ring(spec);
    let targets = cams
        .iter()
        .map(|c| render(&gt, c).map(|o| o.image))
        .collect::<Result<_, _>>()?;
    Ok(GeneratedScene { gt, cams, targets })
}

/// Isotropic scale from the mean squared distance to the three nearest
/// other means; falls back to a tenth of `fallback` when there is no
/// neighbour.
fn neighbour_scales(means: &[[f64; 3]], fallback: f64) -> Vec<f64> {
    means
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d2: Vec<f64> = means
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum())
                .collect();
            d2.sort_by(f64::total_cmp);
            let near = &d2[..d2.len().min(3)];
            if near.is_empty() {
                0.1 * fallback
            } else {
                (near.iter().sum::<f64>() / near.len() as f64).sqrt().max(1e-7)
            }
        })
        .collect()
}

/// Starting point for training: means from the ground truth plus noise or
/// uniformly in the extent ball; isotropic scales, opacity 0.1, gray color.
pub fn init_training_scene(spec: &SceneSpec, gt: &SceneModel) -> Result<SceneModel, SceneError> {
    spec.validate()?;
    if spec.init_mode == InitMode::PerturbedGt && spec.init_count > gt.len() {
        return Err(SceneError::InvalidSpec(format!(
            "init_count {} exceeds {} ground-truth gaussians",
            spec.init_count,
            gt.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1A17_5EED);
    let means: Vec<[f64; 3]> = match spec.init_mode {
        InitMode::PerturbedGt => gt.gaussians[..spec.init_count]
            .iter()
            .map(|g| {
                std::array::from_fn(|k| {
                    g.mu[k] + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect(),
        InitMode::RandomVolume => (0..spec.init_count)
            .map(|_| point_in_ball(&mut rng, spec.extent))
            .collect(),
    };
    let scales = neighbour_scales(&means, spec.extent);
    let gaussians = means
        .iter()
        .zip(scales)
        .map(|(mu, s)| Gaussian3D {
            mu: *mu,
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: [s.ln(); 3],
            opacity_logit: logit(0.1),
            color: [0.5; 3],
        })
        .collect();
    Ok(SceneModel::new(gaussians, gt.background))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8),
    );
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, SceneError> {
    let err = |m: &str| SceneError::Ppm(m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(err("magic is not P6"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(SceneError::Ppm(format!("maxval {maxval} is not 255")));
    }
    if w == 0 || h == 0 {
        return Err(err("zero dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    let need = w * h * 3;
    if payload.len() < need {
        return Err(SceneError::Ppm(format!("payload has {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(err("trailing bytes after payload"));
    }
    Ok(Image::from_data(w, h, payload.iter().map(|b| *b as f64 / 255.0).collect()))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), SceneError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image, SceneError> {
    decode_ppm(&fs::read(path)?)
}

/// On-disk scene document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDocument {
    pub gaussians: Vec<Gaussian3D>,
    pub background: [f64; 3],
    pub cameras: Vec<Camera>,
}

impl SceneDocument {
    pub fn new(scene: &SceneModel, cams: &[Camera]) -> Self {
        Self {
            gaussians: scene.gaussians.clone(),
            background: scene.background,
            cameras: cams.to_vec(),
        }
    }

    pub fn scene(&self) -> SceneModel {
        SceneModel::new(self.gaussians.clone(), self.background)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene documents always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, SceneError> {
        let doc: Self = serde_json::from_str(s)?;
        for c in &doc.cameras {
            c.validate()?;
        }
        Ok(doc)
    }
}

pub fn target_file_name(view_id: u32) -> String {
    format!("view_{view_id:04}.ppm")
}

pub const SCENE_FILE: &str = "scene.json";
pub const SPEC_FILE: &str = "scene_spec.json";

/// A scene directory as used for training: ground truth, cameras, quantized
/// targets and the spec that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDir {
    pub spec: SceneSpec,
    pub doc: SceneDocument,
    pub targets: Vec<Image>,
}

impl SceneDir {
    pub fn write(dir: &Path, spec: &SceneSpec, generated: &GeneratedScene) -> Result<(), SceneError> {
        fs::create_dir_all(dir)?;
        let doc = SceneDocument::new(&generated.gt, &generated.cams);
        fs::write(dir.join(SCENE_FILE), doc.to_json())?;
        fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(spec)?)?;
        for (cam, img) in generated.cams.iter().zip(&generated.targets) {
            write_ppm(&dir.join(target_file_name(cam.view_id)), img)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, SceneError> {
        let doc = SceneDocument::from_json(&fs::read_to_string(dir.join(SCENE_FILE))?)?;
        let spec: SceneSpec = serde_json::from_str(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
        let targets = doc
            .cameras
            .iter()
            .map(|c| {
                let img = read_ppm(&dir.join(target_file_name(c.view_id)))?;
                if img.shape() != (c.width(), c.height()) {
                    return Err(SceneError::Ppm(format!(
                        "view {} is {:?}, camera expects {:?}",
                        c.view_id,
                        img.shape(),
                        (c.width(), c.height())
                    )));
                }
                Ok(img)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { spec, doc, targets })
    }

    pub fn hash(&self) -> String {
        scene_hash(&self.doc, &self.targets)
    }
}

/// SHA-256 over the scene document and the quantized targets.
pub fn scene_hash(doc: &SceneDocument, targets: &[Image]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(doc).expect("scene documents always serialize"));
    for t in targets {
        h.update(encode_ppm(t));
    }
    hex::encode(h.finalize())
}
