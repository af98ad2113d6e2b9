//! sRGB to CIELAB conversion (D65 reference white).

use cnsnet_tensor::{Float, Tensor};

use crate::error::{Error, Result};
use crate::image::RgbImage;

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// D65 white point, matching the rows sums of [`SRGB_TO_XYZ`].
pub const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB pixel (each component clamped to `[0, 1]`) to `(L, a, b)`.
pub fn srgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|v| srgb_to_linear(v.clamp(0.0, 1.0)));
    let mut xyz = [0.0; 3];
    for (r, row) in SRGB_TO_XYZ.iter().enumerate() {
        xyz[r] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let f = [0, 1, 2].map(|i| lab_f(xyz[i] / WHITE_D65[i]));
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// LAB planes of an image in double precision, laid out like the input.
pub fn image_to_lab(img: &RgbImage) -> Vec<f64> {
    let n = img.pixels();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let lab = srgb_to_lab_pixel([0, 1, 2].map(|c| img.data[c * n + i] as f64));
        for c in 0..3 {
            out[c * n + i] = lab[c];
        }
    }
    out
}

/// Tensor form: `[3, H, W]` sRGB to `[3, H, W]` LAB.
pub fn srgb_to_lab<T: Float>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("srgb_to_lab expects [3, H, W], got {s:?}")));
    }
    let img = RgbImage::from_tensor(image)?;
    let lab = image_to_lab(&img);
    Ok(Tensor::new(lab.into_iter().map(T::of).collect(), s)?)
}
