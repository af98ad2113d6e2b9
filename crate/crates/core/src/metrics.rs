//! Region-wise evaluation: LAB mean absolute error, PSNR and SSIM over the
//! shadow region, the non-shadow region and the whole image.

use serde::{Deserialize, Serialize};

use crate::colorspace::image_to_lab;
use crate::error::{Error, Result};
use crate::image::{resize_plane_bicubic, RgbImage};
use crate::mask::HardMask;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Shadow,
    NonShadow,
    All,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Shadow, Region::NonShadow, Region::All];
}

/// Pixel selection by region of a hard mask (`true` = shadow).
#[derive(Clone, Copy, Debug)]
pub struct RegionSelector<'a> {
    pub region: Region,
    pub mask: &'a HardMask,
}

impl<'a> RegionSelector<'a> {
    pub fn new(region: Region, mask: &'a HardMask) -> Self {
        RegionSelector { region, mask }
    }

    pub fn selects(&self, i: usize) -> bool {
        match self.region {
            Region::Shadow => self.mask.data[i],
            Region::NonShadow => !self.mask.data[i],
            Region::All => true,
        }
    }

    pub fn count(&self) -> usize {
        (0..self.mask.data.len()).filter(|&i| self.selects(i)).count()
    }

    /// 0/1 weight per pixel.
    pub fn weights(&self) -> Vec<f64> {
        (0..self.mask.data.len()).map(|i| if self.selects(i) { 1.0 } else { 0.0 }).collect()
    }
}

/// How per-pixel LAB absolute differences are combined over channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabMaeConvention {
    /// `|dL| + |da| + |db|` per pixel.
    ChannelSum,
    /// `(|dL| + |da| + |db|) / 3` per pixel.
    ChannelMean,
}

/// How PSNR and SSIM are restricted to a region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionConvention {
    /// Both images are multiplied by the region mask and compared over the
    /// whole frame; values are averaged over images.
    MaskedImage,
    /// Only selected pixels (SSIM: selected window centres) count; squared
    /// errors and SSIM values are pooled over the whole dataset.
    Restricted,
}

/// Running sums for the dataset-level LAB error of one region.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaeAccumulator {
    pub sum: f64,
    pub count: u64,
}

impl MaeAccumulator {
    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Adds the LAB absolute error of the selected pixels to `acc`.
pub fn accumulate_mae(pred: &RgbImage, gt: &RgbImage, sel: &RegionSelector, conv: LabMaeConvention, acc: &mut MaeAccumulator) -> Result<()> {
    check_aligned(pred, gt, sel.mask)?;
    accumulate_mae_lab(&image_to_lab(pred), &image_to_lab(gt), sel, conv, acc);
    Ok(())
}

fn accumulate_mae_lab(pl: &[f64], gl: &[f64], sel: &RegionSelector, conv: LabMaeConvention, acc: &mut MaeAccumulator) {
    let n = sel.mask.data.len();
    let div = match conv {
        LabMaeConvention::ChannelSum => 1.0,
        LabMaeConvention::ChannelMean => 3.0,
    };
    for i in (0..n).filter(|&i| sel.selects(i)) {
        let d: f64 = (0..3).map(|c| (pl[c * n + i] - gl[c * n + i]).abs()).sum();
        acc.sum += d / div;
        acc.count += 1;
    }
}

fn check_aligned(pred: &RgbImage, gt: &RgbImage, mask: &HardMask) -> Result<()> {
    if !pred.same_size(gt) || (mask.height, mask.width) != (pred.height, pred.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{}, ground truth {}x{}, mask {}x{}",
            pred.height, pred.width, gt.height, gt.width, mask.height, mask.width
        )));
    }
    Ok(())
}

fn planes_f64(img: &RgbImage) -> Vec<f64> {
    img.data.iter().map(|&v| v as f64).collect()
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Sum of squared RGB errors and number of compared values.
fn squared_error(pred: &[f64], gt: &[f64], sel: &RegionSelector, conv: RegionConvention) -> (f64, usize) {
    let n = sel.mask.data.len();
    let mut sse = 0.0;
    let mut count = 0;
    for i in 0..n {
        let s = sel.selects(i);
        if conv == RegionConvention::Restricted && !s {
            continue;
        }
        let w = if s { 1.0 } else { 0.0 };
        for c in 0..3 {
            let d = (pred[c * n + i] - gt[c * n + i]) * w;
            sse += d * d;
        }
        count += 3;
    }
    (sse, count)
}

/// PSNR of the selected region, `None` when the region is empty.
pub fn psnr(pred: &RgbImage, gt: &RgbImage, sel: &RegionSelector, conv: RegionConvention) -> Result<Option<f64>> {
    check_aligned(pred, gt, sel.mask)?;
    if sel.count() == 0 {
        return Ok(None);
    }
    let (sse, count) = squared_error(&planes_f64(pred), &planes_f64(gt), sel, conv);
    Ok(Some(psnr_from_mse(sse / count as f64)))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// ITU-R BT.601 luma of planar RGB.
pub fn luma(planes: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.298936021293775 * planes[i] + 0.587043074451121 * planes[n + i] + 0.114020904255103 * planes[2 * n + i])
        .collect()
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter with replicated borders ("same" output size).
fn gaussian_filter(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Local SSIM map of two single-channel images with values in `[0, 1]`.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let f = |v: &[f64]| gaussian_filter(v, h, w, &k);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (ma, mb) = (f(a), f(b));
    let (saa, sbb, sab) = (f(&prod(a, a)), f(&prod(b, b)), f(&prod(a, b)));
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    Ok((0..h * w)
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect())
}

/// Sum of SSIM values and number of contributing window centres.
fn ssim_sum(pred: &[f64], gt: &[f64], h: usize, w: usize, sel: &RegionSelector, conv: RegionConvention) -> Result<(f64, usize)> {
    let n = h * w;
    let (mut a, mut b) = (luma(pred, n), luma(gt, n));
    match conv {
        RegionConvention::MaskedImage => {
            let wts = sel.weights();
            for i in 0..n {
                a[i] *= wts[i];
                b[i] *= wts[i];
            }
            let map = ssim_map(&a, &b, h, w)?;
            Ok((map.iter().sum(), n))
        }
        RegionConvention::Restricted => {
            let map = ssim_map(&a, &b, h, w)?;
            let sel_vals = (0..n).filter(|&i| sel.selects(i)).map(|i| map[i]);
            Ok((sel_vals.clone().sum(), sel_vals.count()))
        }
    }
}

/// SSIM over the selected region, `None` when the region is empty.
pub fn ssim(pred: &RgbImage, gt: &RgbImage, sel: &RegionSelector, conv: RegionConvention) -> Result<Option<f64>> {
    check_aligned(pred, gt, sel.mask)?;
    if sel.count() == 0 {
        return Ok(None);
    }
    let (s, c) = ssim_sum(&planes_f64(pred), &planes_f64(gt), pred.height, pred.width, sel, conv)?;
    Ok(Some(s / c as f64))
}

/// Dataset-level metrics per region. Missing values (empty regions) are
/// serialised as `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse_s: Option<f64>,
    pub rmse_ns: Option<f64>,
    pub rmse_all: Option<f64>,
    pub psnr_s: Option<f64>,
    pub psnr_ns: Option<f64>,
    pub psnr_all: Option<f64>,
    pub ssim_s: Option<f64>,
    pub ssim_ns: Option<f64>,
    pub ssim_all: Option<f64>,
    pub count_s: u64,
    pub count_ns: u64,
    pub count_all: u64,
    pub images: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn table(&self) -> String {
        let f = |v: Option<f64>, p: usize| v.map_or("n/a".to_string(), |v| format!("{v:.p$}"));
        let mut s = format!("{:<8}{:>10}{:>10}{:>10}\n", "", "S", "NS", "ALL");
        s += &format!("{:<8}{:>10}{:>10}{:>10}\n", "RMSE", f(self.rmse_s, 2), f(self.rmse_ns, 2), f(self.rmse_all, 2));
        s += &format!("{:<8}{:>10}{:>10}{:>10}\n", "PSNR", f(self.psnr_s, 2), f(self.psnr_ns, 2), f(self.psnr_all, 2));
        s += &format!("{:<8}{:>10}{:>10}{:>10}\n", "SSIM", f(self.ssim_s, 3), f(self.ssim_ns, 3), f(self.ssim_all, 3));
        s += &format!("{:<8}{:>10}{:>10}{:>10}\n", "pixels", self.count_s, self.count_ns, self.count_all);
        s
    }
}

/// Evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Resize prediction, ground truth and mask before scoring.
    pub resize: Option<(usize, usize)>,
    /// Round prediction and ground truth to 8 bits before scoring.
    pub quantize: bool,
    pub lab: LabMaeConvention,
    pub region: RegionConvention,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            resize: None,
            quantize: true,
            lab: LabMaeConvention::ChannelSum,
            region: RegionConvention::MaskedImage,
        }
    }
}

impl EvalProtocol {
    /// Settings used for ISTD-style benchmark numbers: scoring at 256x256.
    pub fn benchmark() -> Self {
        EvalProtocol {
            resize: Some((256, 256)),
            ..Default::default()
        }
    }
}

/// Mask resized like an 8-bit image; any non-zero result counts as shadow.
fn resize_mask_u8(m: &HardMask, oh: usize, ow: usize) -> HardMask {
    let src: Vec<f64> = m.data.iter().map(|&b| if b { 255.0 } else { 0.0 }).collect();
    let out = resize_plane_bicubic(&src, m.height, m.width, oh, ow);
    HardMask {
        height: oh,
        width: ow,
        data: out.into_iter().map(|v| v.round().clamp(0.0, 255.0) >= 1.0).collect(),
    }
}

/// Accumulates per-image results into a [`MetricReport`].
#[derive(Clone, Debug)]
pub struct EvalAccumulator {
    pub protocol: EvalProtocol,
    mae: [MaeAccumulator; 3],
    sq: [(f64, u64); 3],
    ssim: [(f64, u64); 3],
    psnr_img: [(f64, u64); 3],
    images: usize,
}

impl EvalAccumulator {
    pub fn new(protocol: EvalProtocol) -> Self {
        EvalAccumulator {
            protocol,
            mae: Default::default(),
            sq: Default::default(),
            ssim: Default::default(),
            psnr_img: Default::default(),
            images: 0,
        }
    }

    pub fn add(&mut self, pred: &RgbImage, gt: &RgbImage, mask: &HardMask) -> Result<()> {
        check_aligned(pred, gt, mask)?;
        let p = self.protocol;
        let (pred, gt) = if p.quantize {
            (pred.quantize_u8(), gt.quantize_u8())
        } else {
            (pred.clone(), gt.clone())
        };
        let (pred, gt, mask) = match p.resize {
            Some((h, w)) if (h, w) != (pred.height, pred.width) => {
                (pred.resize_bicubic(h, w), gt.resize_bicubic(h, w), resize_mask_u8(mask, h, w))
            }
            _ => (pred, gt, mask.clone()),
        };
        let (pl, gl) = (image_to_lab(&pred), image_to_lab(&gt));
        let (pf, gf) = (planes_f64(&pred), planes_f64(&gt));
        for (k, region) in Region::ALL.into_iter().enumerate() {
            let sel = RegionSelector::new(region, &mask);
            accumulate_mae_lab(&pl, &gl, &sel, p.lab, &mut self.mae[k]);
            if sel.count() == 0 {
                continue;
            }
            let (sse, count) = squared_error(&pf, &gf, &sel, p.region);
            let (ss, sc) = ssim_sum(&pf, &gf, pred.height, pred.width, &sel, p.region)?;
            match p.region {
                RegionConvention::Restricted => {
                    self.sq[k].0 += sse;
                    self.sq[k].1 += count as u64;
                    self.ssim[k].0 += ss;
                    self.ssim[k].1 += sc as u64;
                }
                RegionConvention::MaskedImage => {
                    self.psnr_img[k].0 += psnr_from_mse(sse / count as f64);
                    self.psnr_img[k].1 += 1;
                    self.ssim[k].0 += ss / sc as f64;
                    self.ssim[k].1 += 1;
                }
            }
        }
        self.images += 1;
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let mean = |(s, c): (f64, u64)| (c > 0).then(|| s / c as f64);
        let psnr = |k: usize| match self.protocol.region {
            RegionConvention::Restricted => mean(self.sq[k]).map(psnr_from_mse),
            RegionConvention::MaskedImage => mean(self.psnr_img[k]),
        };
        MetricReport {
            rmse_s: self.mae[0].value(),
            rmse_ns: self.mae[1].value(),
            rmse_all: self.mae[2].value(),
            psnr_s: psnr(0),
            psnr_ns: psnr(1),
            psnr_all: psnr(2),
            ssim_s: mean(self.ssim[0]),
            ssim_ns: mean(self.ssim[1]),
            ssim_all: mean(self.ssim[2]),
            count_s: self.mae[0].count,
            count_ns: self.mae[1].count,
            count_all: self.mae[2].count,
            images: self.images,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, off: f32) -> RgbImage {
        RgbImage::new(h, w, (0..3 * h * w).map(|i| ((i % 17) as f32 / 20.0 + off).min(1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_images() {
        let img = ramp(12, 12, 0.0);
        let m = HardMask::new(12, 12, (0..144).map(|i| i % 3 == 0).collect()).unwrap();
        for conv in [RegionConvention::MaskedImage, RegionConvention::Restricted] {
            for r in Region::ALL {
                let sel = RegionSelector::new(r, &m);
                assert_eq!(psnr(&img, &img, &sel, conv).unwrap(), Some(PSNR_CAP));
                assert!((ssim(&img, &img, &sel, conv).unwrap().unwrap() - 1.0).abs() < 1e-12);
                let mut acc = MaeAccumulator::default();
                accumulate_mae(&img, &img, &sel, LabMaeConvention::ChannelSum, &mut acc).unwrap();
                assert_eq!(acc.sum, 0.0);
            }
        }
    }

    #[test]
    fn uniform_error_psnr() {
        let gt = RgbImage::filled(4, 4, 0.5);
        let pred = RgbImage::filled(4, 4, 0.6);
        let m = HardMask::empty(4, 4);
        let sel = RegionSelector::new(Region::All, &m);
        let p = psnr(&pred, &gt, &sel, RegionConvention::Restricted).unwrap().unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        assert_eq!(psnr(&pred, &gt, &RegionSelector::new(Region::Shadow, &m), RegionConvention::Restricted).unwrap(), None);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let img = RgbImage::filled(10, 20, 0.5);
        let m = HardMask::empty(10, 20);
        assert!(ssim(&img, &img, &RegionSelector::new(Region::All, &m), RegionConvention::Restricted).is_err());
    }

    #[test]
    fn empty_region_contributes_nothing() {
        let img = ramp(4, 4, 0.0);
        let m = HardMask::empty(4, 4);
        let mut acc = MaeAccumulator::default();
        accumulate_mae(&img, &ramp(4, 4, 0.1), &RegionSelector::new(Region::Shadow, &m), LabMaeConvention::ChannelSum, &mut acc).unwrap();
        assert_eq!(acc, MaeAccumulator::default());
        assert_eq!(acc.value(), None);
    }

    #[test]
    fn report_serialises_missing_as_null() {
        let r = MetricReport::default();
        assert!(r.to_json().contains("\"rmse_s\": null"));
        assert!(r.table().contains("n/a"));
    }

    #[test]
    fn resized_mask_marks_any_coverage() {
        let mut m = HardMask::empty(8, 8);
        m.data[27] = true;
        let r = resize_mask_u8(&m, 4, 4);
        assert!(r.count() >= 1);
    }
}
