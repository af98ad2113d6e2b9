//! Planar RGB images in `[0, 1]`, PNG I/O and resampling.

use std::path::Path;

use cnsnet_tensor::{Float, Tensor};

use crate::error::{Error, Result};

/// Planar (channel-major) RGB image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// `3 * height * width` values, one plane per channel.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        RgbImage {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.pixels()..(c + 1) * self.pixels()]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_size(&self, other: &RgbImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Rounds every value to the nearest of the 256 8-bit levels.
    pub fn quantize_u8(&self) -> RgbImage {
        RgbImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
            &[1, 3, self.height, self.width],
        )
        .expect("image buffer matches its extents")
    }

    /// Image from a `[3, H, W]` or `[1, 3, H, W]` tensor.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("expected an RGB tensor, got {s:?}"))),
        };
        RgbImage::new(h, w, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px.0[c] as f32 / 255.0;
            }
        }
        RgbImage::new(h, w, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let n = self.pixels();
        let mut buf = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                buf.push(to_u8(self.data[c * n + i]));
            }
        }
        image::save_buffer(path, &buf, self.width as u32, self.height as u32, image::ColorType::Rgb8).map_err(
            |source| Error::Image {
                path: path.display().to_string(),
                source,
            },
        )
    }

    /// Antialiased bicubic resize, per plane (see [`resize_plane_bicubic`]).
    pub fn resize_bicubic(&self, height: usize, width: usize) -> RgbImage {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            let plane: Vec<f64> = self.plane(c).iter().map(|&v| v as f64).collect();
            let out = resize_plane_bicubic(&plane, self.height, self.width, height, width);
            data.extend(out.into_iter().map(|v| v as f32));
        }
        RgbImage { height, width, data }
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_gray_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })?
        .to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

pub fn save_gray_png(path: impl AsRef<Path>, height: usize, width: usize, data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer(path, data, width as u32, height as u32, image::ColorType::L8).map_err(|source| {
        Error::Image {
            path: path.display().to_string(),
            source,
        }
    })
}

fn cubic(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        1.5 * a * a * a - 2.5 * a * a + 1.0
    } else if a < 2.0 {
        -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Tap indices and normalised weights for each output sample along one axis.
fn cubic_contributions(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = output as f64 / input as f64;
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let taps = width.ceil() as isize + 2;
    // Symmetric extension: 0 1 .. n-1 n-1 .. 1 0
    let period = 2 * input as isize;
    let reflect = |i: isize| -> usize {
        let m = i.rem_euclid(period);
        (if m < input as isize { m } else { period - 1 - m }) as usize
    };
    (0..output)
        .map(|o| {
            // 1-based output coordinate mapped into 1-based input space.
            let u = (o as f64 + 1.0) / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let mut raw: Vec<(isize, f64)> = (0..taps)
                .map(|t| {
                    let idx = left + t;
                    (idx, kscale * cubic(kscale * (u - idx as f64)))
                })
                .collect();
            let total: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.retain(|(_, w)| *w != 0.0);
            raw.into_iter().map(|(i, w)| (reflect(i - 1), w / total)).collect()
        })
        .collect()
}

/// Bicubic resize with antialiasing on downscale and symmetric edge
/// handling, resampling the axis with the stronger reduction first.
pub fn resize_plane_bicubic(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let along_cols = |src: &[f64], rows: usize| -> Vec<f64> {
        let contrib = cubic_contributions(w, ow);
        let mut out = vec![0.0; rows * ow];
        for r in 0..rows {
            for (o, taps) in contrib.iter().enumerate() {
                out[r * ow + o] = taps.iter().map(|&(i, wt)| src[r * w + i] * wt).sum();
            }
        }
        out
    };
    let along_rows = |src: &[f64], cols: usize| -> Vec<f64> {
        let contrib = cubic_contributions(h, oh);
        let mut out = vec![0.0; oh * cols];
        for (o, taps) in contrib.iter().enumerate() {
            for c in 0..cols {
                out[o * cols + c] = taps.iter().map(|&(i, wt)| src[i * cols + c] * wt).sum();
            }
        }
        out
    };
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let (sy, sx) = (oh as f64 / h as f64, ow as f64 / w as f64);
    if sx <= sy {
        along_rows(&along_cols(src, h), ow)
    } else {
        along_cols(&along_rows(src, w), oh)
    }
}
