//! Hard and soft shadow masks: soft-mask target, dilation and resizing.

mod predictor;

pub use predictor::SoftMaskPredictor;

use std::path::Path;

use cnsnet_tensor::{Float, Tensor};

use crate::error::{Error, Result};
use crate::image::{load_gray_png, save_gray_png, to_u8, RgbImage};

/// Binary shadow map, `true` = shadow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

/// Per-pixel shadow intensity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl HardMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} mask", data.len())));
        }
        Ok(HardMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        HardMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Thresholds an 8-bit map: values of 128 and above are shadow.
    pub fn from_u8(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        HardMask::new(height, width, values.iter().map(|&v| v >= 128).collect())
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn complement(&self) -> HardMask {
        HardMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&m| !m).collect(),
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&m| if m { 255 } else { 0 }).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// `[1, 1, H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let d = self.data.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Tensor::new(d, &[1, 1, self.height, self.width]).expect("mask buffer matches its extents")
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let (h, w, v) = load_gray_png(path)?;
        HardMask::from_u8(h, w, &v)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_gray_png(path, self.height, self.width, &self.to_u8())
    }

    /// Nearest-neighbour resize; output `(y, x)` reads `(y·h/oh, x·w/ow)`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> HardMask {
        let mut data = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = y * self.height / oh;
            data.extend((0..ow).map(|x| self.get(sy, x * self.width / ow)));
        }
        HardMask {
            height: oh,
            width: ow,
            data,
        }
    }
}

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} mask", data.len())));
        }
        Ok(SoftMask { height, width, data })
    }

    pub fn constant(height: usize, width: usize, v: f32) -> Self {
        SoftMask {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let d = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(d, &[1, 1, self.height, self.width]).expect("mask buffer matches its extents")
    }

    /// Mask from a tensor whose last two axes are `[H, W]` and whose leading
    /// axes are all 1.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::Shape(format!("expected a single-plane mask tensor, got {s:?}")));
        }
        SoftMask::new(s[s.len() - 2], s[s.len() - 1], t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let v: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        save_gray_png(path, self.height, self.width, &v)
    }
}

/// Soft-region mask target from an aligned shadow / shadow-free pair.
///
/// For each channel the difference `shadow - free` is min-max normalised over
/// the image; the mask is the per-pixel mean over channels of the absolute
/// normalised difference. A channel whose difference is constant contributes
/// zeros.
pub fn soft_mask_target(shadow: &RgbImage, free: &RgbImage) -> Result<SoftMask> {
    if !shadow.same_size(free) {
        return Err(Error::Shape(format!(
            "shadow {}x{} vs shadow-free {}x{}",
            shadow.height, shadow.width, free.height, free.width
        )));
    }
    let n = shadow.pixels();
    let mut acc = vec![0.0f64; n];
    for c in 0..3 {
        let d: Vec<f64> = shadow
            .plane(c)
            .iter()
            .zip(free.plane(c))
            .map(|(&s, &f)| s as f64 - f as f64)
            .collect();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (a, v) in acc.iter_mut().zip(&d) {
                *a += ((v - lo) / (hi - lo)).abs();
            }
        }
    }
    SoftMask::new(shadow.height, shadow.width, acc.into_iter().map(|v| (v / 3.0) as f32).collect())
}

/// Mean absolute difference between predicted and target soft masks.
pub fn soft_mask_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(pred.sub(target)?.abs().mean())
}

/// Dilation with a `(2r+1) x (2r+1)` square structuring element, clipped at
/// the image border.
pub fn dilate(mask: &HardMask, radius: usize) -> HardMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height, mask.width);
    let mut rows = vec![false; h * w];
    for y in 0..h {
        let line = &mask.data[y * w..(y + 1) * w];
        for x in 0..w {
            let (a, b) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            rows[y * w + x] = line[a..=b].iter().any(|&m| m);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let (a, b) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (a..=b).any(|yy| rows[yy * w + x]);
        }
    }
    HardMask {
        height: h,
        width: w,
        data: out,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// Resizes the last two axes of a mask tensor. Nearest keeps hard masks
/// binary; bilinear is for soft masks.
pub fn resize_mask<T: Float>(mask: &Tensor<T>, oh: usize, ow: usize, mode: ResizeMode) -> Result<Tensor<T>> {
    let s = mask.shape();
    if s.len() >= 2 && s[s.len() - 2] == oh && s[s.len() - 1] == ow {
        return Ok(mask.clone());
    }
    Ok(match mode {
        ResizeMode::Nearest => mask.resize_nearest(oh, ow)?,
        ResizeMode::Bilinear => mask.resize_bilinear(oh, ow)?,
    })
}
