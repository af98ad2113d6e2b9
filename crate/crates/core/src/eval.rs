//! Inference with automatic padding, and dataset evaluation of a model, the
//! identity baseline or the ground-truth oracle.

use std::path::{Path, PathBuf};

use cnsnet_tensor::{no_grad, Float, Tensor};
use log::debug;

use crate::data::TripletSource;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mask::{HardMask, SoftMask};
use crate::metrics::{EvalAccumulator, EvalProtocol, MetricReport};
use crate::model::Cnsnet;
use crate::nn::{ForwardCtx, VarStore};

/// What is scored against the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// The unmodified shadow image.
    Identity,
    /// The ground truth itself.
    Oracle,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub output: RgbImage,
    pub soft_mask: SoftMask,
}

/// Rows and columns to append so both sides become multiples of `m`.
pub fn padding_for(h: usize, w: usize, m: usize) -> (usize, usize) {
    (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w)
}

/// Extends `c` planes of `h x w` at the bottom and right by replicating the
/// last row and column.
pub fn pad_planes<X: Copy>(src: &[X], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<X> {
    let (oh, ow) = (h + ph, w + pw);
    let mut out = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        let plane = &src[k * h * w..(k + 1) * h * w];
        for y in 0..oh {
            let row = &plane[y.min(h - 1) * w..y.min(h - 1) * w + w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[w - 1], pw));
        }
    }
    out
}

/// Top-left `h x w` window of `c` planes of `sh x sw`.
pub fn crop_planes<X: Copy>(src: &[X], c: usize, sh: usize, sw: usize, h: usize, w: usize) -> Vec<X> {
    let mut out = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for y in 0..h {
            let start = k * sh * sw + y * sw;
            out.extend_from_slice(&src[start..start + w]);
        }
    }
    out
}

/// Runs the network on one image of any size; the input is padded to the
/// required multiple and the outputs are cropped back.
pub fn predict<T: Float>(net: &Cnsnet, vs: &VarStore<T>, shadow: &RgbImage, mask: &HardMask) -> Result<Prediction> {
    let (h, w) = (shadow.height, shadow.width);
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::Shape(format!("image {h}x{w} with mask {}x{}", mask.height, mask.width)));
    }
    let (ph, pw) = padding_for(h, w, net.cfg.required_multiple());
    let (oh, ow) = (h + ph, w + pw);
    let img = RgbImage::new(oh, ow, pad_planes(&shadow.data, 3, h, w, ph, pw))?;
    let m = HardMask::new(oh, ow, pad_planes(&mask.data, 1, h, w, ph, pw))?;
    let _guard = no_grad();
    let out = net.forward(vs, &img.to_tensor::<T>(), &m.to_tensor::<T>(), &ForwardCtx::eval())?;
    let full = RgbImage::from_tensor(&out.output)?;
    let soft = SoftMask::from_tensor(&out.soft_mask)?;
    Ok(Prediction {
        output: RgbImage::new(h, w, crop_planes(&full.data, 3, oh, ow, h, w))?,
        soft_mask: SoftMask::new(h, w, crop_planes(&soft.data, 1, oh, ow, h, w))?,
    })
}

/// Scores the model's output on every triplet.
pub fn evaluate<T: Float>(
    net: &Cnsnet,
    vs: &VarStore<T>,
    source: &(impl TripletSource + ?Sized),
    protocol: EvalProtocol,
) -> Result<MetricReport> {
    if source.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut acc = EvalAccumulator::new(protocol);
    for i in 0..source.len() {
        let t = source.get(i)?;
        let p = predict(net, vs, &t.shadow, &t.mask)?;
        acc.add(&p.output, &t.free, &t.mask)?;
        debug!("evaluated {}", t.id);
    }
    Ok(acc.report())
}

/// Scores the input image (identity) or the ground truth (oracle).
pub fn evaluate_baseline(source: &(impl TripletSource + ?Sized), baseline: Baseline, protocol: EvalProtocol) -> Result<MetricReport> {
    if source.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut acc = EvalAccumulator::new(protocol);
    for i in 0..source.len() {
        let t = source.get(i)?;
        let pred = match baseline {
            Baseline::Identity => &t.shadow,
            Baseline::Oracle => &t.free,
        };
        acc.add(pred, &t.free, &t.mask)?;
    }
    Ok(acc.report())
}

/// Reads a shadow image and mask, writes `{stem}_out.png` and
/// `{stem}_soft.png` into `out_dir`, and returns both paths.
pub fn infer_files<T: Float>(
    net: &Cnsnet,
    vs: &VarStore<T>,
    shadow_path: &Path,
    mask_path: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let shadow = RgbImage::load_png(shadow_path)?;
    let mask = HardMask::load_png(mask_path)?;
    let p = predict(net, vs, &shadow, &mask)?;
    std::fs::create_dir_all(out_dir)?;
    let stem = shadow_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let out = out_dir.join(format!("{stem}_out.png"));
    let soft = out_dir.join(format!("{stem}_soft.png"));
    p.output.save_png(&out)?;
    p.soft_mask.save_png(&soft)?;
    Ok((out, soft))
}

/// Stacks images and masks into `[N, 3, H, W]` and `[N, 1, H, W]` tensors.
pub fn stack_images<T: Float>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let (h, w) = (images[0].height, images[0].width);
    if images.iter().any(|i| (i.height, i.width) != (h, w)) {
        return Err(Error::Shape("batch images differ in size".into()));
    }
    let data = images.iter().flat_map(|i| i.data.iter().map(|&v| T::of(v as f64))).collect();
    Ok(Tensor::new(data, &[images.len(), 3, h, w])?)
}

pub fn stack_planes<T: Float>(planes: &[&[f32]], h: usize, w: usize) -> Result<Tensor<T>> {
    let data = planes.iter().flat_map(|p| p.iter().map(|&v| T::of(v as f64))).collect();
    Ok(Tensor::new(data, &[planes.len(), 1, h, w])?)
}
