use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("image shape mismatch: {a:?} vs {b:?}")]
pub struct ShapeMismatch {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

/// Row-major H×W×3 image with interleaved RGB channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3, "data length does not match shape");
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<(), ShapeMismatch> {
        if self.shape() == other.shape() && self.data.len() == other.data.len() {
            Ok(())
        } else {
            Err(ShapeMismatch {
                a: self.shape(),
                b: other.shape(),
            })
        }
    }

    /// One channel as a dense `height * width` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }
}
