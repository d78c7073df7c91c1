//! Photometric training loss `(1 − λ)·L1 + λ·(1 − SSIM)` with analytic
//! image-space gradients, plus PSNR for evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ShapeMismatch};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
    #[error("image {width}x{height} is smaller than the {window}-pixel SSIM window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            ssim_window: 11,
            ssim_sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::InvalidConfig(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        if self.ssim_window.is_multiple_of(2) {
            return Err(LossError::InvalidConfig("ssim_window must be odd".into()));
        }
        if !(self.ssim_sigma > 0.0 && self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(LossError::InvalidConfig(
                "ssim_sigma, c1 and c2 must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient wrt the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Image,
}

pub fn l1_loss(pred: &Image, target: &Image) -> Result<LossValue, LossError> {
    pred.check_same_shape(target)?;
    let n = pred.data.len() as f64;
    let mut value = 0.0;
    let mut grad = Image::new(pred.width, pred.height);
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        value += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let k: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample (`… 2 1 | 0 1 2 …`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

/// Separable Gaussian filter with reflected borders, plus its transpose.
#[derive(Debug, Clone)]
struct Blur {
    kernel: Vec<f64>,
    width: usize,
    height: usize,
}

impl Blur {
    fn radius(&self) -> usize {
        self.kernel.len() / 2
    }

    fn horizontal(&self, src: &[f64]) -> Vec<f64> {
        let (w, r) = (self.width, self.radius());
        let mut out = vec![0.0; src.len()];
        let mut pad = vec![0.0; w + 2 * r];
        for (row, dst) in src.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            for (j, p) in pad.iter_mut().enumerate() {
                *p = row[reflect(j as isize - r as isize, w)];
            }
            for (x, d) in dst.iter_mut().enumerate() {
                *d = self.kernel.iter().zip(&pad[x..]).map(|(g, v)| g * v).sum();
            }
        }
        out
    }

    fn horizontal_transpose(&self, src: &[f64]) -> Vec<f64> {
        let (w, r) = (self.width, self.radius());
        let mut out = vec![0.0; src.len()];
        let mut pad = vec![0.0; w + 2 * r];
        for (row, dst) in src.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            pad.iter_mut().for_each(|p| *p = 0.0);
            for (x, v) in row.iter().enumerate() {
                for (g, p) in self.kernel.iter().zip(&mut pad[x..]) {
                    *p += g * v;
                }
            }
            for (j, p) in pad.iter().enumerate() {
                dst[reflect(j as isize - r as isize, w)] += p;
            }
        }
        out
    }

    fn vertical(&self, src: &[f64], transpose: bool) -> Vec<f64> {
        let (w, h, r) = (self.width, self.height, self.radius() as isize);
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for (k, g) in self.kernel.iter().enumerate() {
                let yy = reflect(y as isize + k as isize - r, h);
                let (from, to) = if transpose { (y, yy) } else { (yy, y) };
                let s = &src[from * w..(from + 1) * w];
                for (d, v) in out[to * w..(to + 1) * w].iter_mut().zip(s) {
                    *d += g * v;
                }
            }
        }
        out
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        self.vertical(&self.horizontal(src), false)
    }

    fn apply_transpose(&self, src: &[f64]) -> Vec<f64> {
        self.horizontal_transpose(&self.vertical(src, true))
    }
}

/// Per-channel local statistics kept from the SSIM forward pass.
#[derive(Debug, Clone)]
struct SsimChannel {
    x: Vec<f64>,
    y: Vec<f64>,
    d_mx: Vec<f64>,
    d_exx: Vec<f64>,
    d_exy: Vec<f64>,
}

/// SSIM value with what is needed to form its gradient later.
#[derive(Debug, Clone)]
pub struct SsimForward {
    pub value: f64,
    blur: Blur,
    channels: Vec<SsimChannel>,
}

impl SsimForward {
    /// Gradient of the mean SSIM wrt the prediction.
    pub fn gradient(&self) -> Image {
        let (w, h) = (self.blur.width, self.blur.height);
        let mut grad = Image::new(w, h);
        for (ch, c) in self.channels.iter().enumerate() {
            let g_mx = self.blur.apply_transpose(&c.d_mx);
            let g_exx = self.blur.apply_transpose(&c.d_exx);
            let g_exy = self.blur.apply_transpose(&c.d_exy);
            for p in 0..w * h {
                grad.data[p * 3 + ch] = g_mx[p] + 2.0 * c.x[p] * g_exx[p] + c.y[p] * g_exy[p];
            }
        }
        grad
    }
}

/// Mean SSIM over pixels and channels; the gradient is formed on demand.
pub fn ssim_forward(pred: &Image, target: &Image, cfg: &LossConfig) -> Result<SsimForward, LossError> {
    pred.check_same_shape(target)?;
    cfg.validate()?;
    let (w, h) = pred.shape();
    if w < cfg.ssim_window || h < cfg.ssim_window {
        return Err(LossError::TooSmall {
            width: w,
            height: h,
            window: cfg.ssim_window,
        });
    }
    let blur = Blur {
        kernel: gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma),
        width: w,
        height: h,
    };
    let npix = w * h;
    let norm = 1.0 / (3 * npix) as f64;
    let (c1, c2) = (cfg.c1, cfg.c2);

    let mut total = 0.0;
    let mut channels = Vec::with_capacity(3);
    for ch in 0..3 {
        let x = pred.channel(ch);
        let y = target.channel(ch);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = blur.apply(&x);
        let my = blur.apply(&y);
        let exx = blur.apply(&sq(&x, &x));
        let eyy = blur.apply(&sq(&y, &y));
        let exy = blur.apply(&sq(&x, &y));

        let mut d_mx = vec![0.0; npix];
        let mut d_exx = vec![0.0; npix];
        let mut d_exy = vec![0.0; npix];
        for p in 0..npix {
            let (ux, uy) = (mx[p], my[p]);
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * (exy[p] - ux * uy) + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            d_mx[p] = norm * (2.0 * uy * (a2 - a1) / (b1 * b2) - 2.0 * ux * s * (1.0 / b1 - 1.0 / b2));
            d_exx[p] = norm * (-s / b2);
            d_exy[p] = norm * (2.0 * a1 / (b1 * b2));
        }
        channels.push(SsimChannel {
            x,
            y,
            d_mx,
            d_exx,
            d_exy,
        });
    }
    Ok(SsimForward {
        value: total * norm,
        blur,
        channels,
    })
}

/// Mean SSIM over pixels and channels, with its gradient wrt `pred`.
pub fn ssim(pred: &Image, target: &Image, cfg: &LossConfig) -> Result<LossValue, LossError> {
    let f = ssim_forward(pred, target, cfg)?;
    Ok(LossValue {
        value: f.value,
        grad: f.gradient(),
    })
}

/// Combined photometric loss value, with the gradient formed on demand so
/// callers that only need the value skip its cost.
#[derive(Debug, Clone)]
pub struct LossForward {
    pub value: f64,
    lambda: f64,
    l1: LossValue,
    ssim: Option<SsimForward>,
}

impl LossForward {
    pub fn gradient(&self) -> Image {
        let Some(s) = &self.ssim else {
            return self.l1.grad.clone();
        };
        let sg = s.gradient();
        let lambda = self.lambda;
        let data = self
            .l1
            .grad
            .data
            .iter()
            .zip(&sg.data)
            .map(|(a, b)| (1.0 - lambda) * a - lambda * b)
            .collect();
        Image::from_data(sg.width, sg.height, data)
    }
}

pub fn combined_loss_forward(pred: &Image, target: &Image, cfg: &LossConfig) -> Result<LossForward, LossError> {
    let l1 = l1_loss(pred, target)?;
    let lambda = cfg.lambda;
    if lambda == 0.0 {
        cfg.validate()?;
        return Ok(LossForward {
            value: l1.value,
            lambda,
            l1,
            ssim: None,
        });
    }
    let s = ssim_forward(pred, target, cfg)?;
    Ok(LossForward {
        value: (1.0 - lambda) * l1.value + lambda * (1.0 - s.value),
        lambda,
        l1,
        ssim: Some(s),
    })
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)` with its gradient wrt `pred`.
pub fn combined_loss(pred: &Image, target: &Image, cfg: &LossConfig) -> Result<LossValue, LossError> {
    let f = combined_loss_forward(pred, target, cfg)?;
    Ok(LossValue {
        value: f.value,
        grad: f.gradient(),
    })
}

/// PSNR in dB of the clamped images; `+inf` when they are identical.
pub fn psnr(pred: &Image, target: &Image) -> Result<f64, LossError> {
    pred.check_same_shape(target)?;
    let mse = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p.clamp(0.0, 1.0) - t.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / pred.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}
