//! Library outputs compared against independent scalar reference
//! computations.

use cnsnet_core::colorspace::{image_to_lab, srgb_to_lab, srgb_to_lab_pixel};
use cnsnet_core::image::RgbImage;
use cnsnet_core::mask::{dilate, resize_mask, soft_mask_target, HardMask, ResizeMode};
use cnsnet_core::metrics::{
    accumulate_mae, psnr, ssim, EvalAccumulator, EvalProtocol, LabMaeConvention, MaeAccumulator, Region, RegionConvention,
    RegionSelector,
};
use cnsnet_core::soan::{region_stats, Region as SoanRegion};
use cnsnet_tensor::init::seeded_rng;
use cnsnet_tensor::Tensor;
use rand::Rng;

fn lab_reference(rgb: [f64; 3]) -> [f64; 3] {
    let lin = |c: f64| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let [r, g, b] = rgb.map(lin);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let f = |t: f64| {
        let d: f64 = 6.0 / 29.0;
        if t > d * d * d {
            t.cbrt()
        } else {
            t / (3.0 * d * d) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> RgbImage {
    RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn mid_gray_lab_matches_scalar_reference() {
    let lab = srgb_to_lab_pixel([0.5, 0.5, 0.5]);
    let lin: f64 = ((0.5 + 0.055) / 1.055f64).powf(2.4);
    let l = 116.0 * lin.cbrt() - 16.0;
    assert!((lab[0] - l).abs() < 1e-4, "{lab:?} vs {l}");
    assert!((l - 53.389).abs() < 1e-3);
    assert!(lab[1].abs() < 1e-3 && lab[2].abs() < 1e-3, "{lab:?}");
}

#[test]
fn lab_matches_reference_on_random_colours() {
    let mut rng = seeded_rng(1);
    for _ in 0..500 {
        let rgb = [0, 1, 2].map(|_| rng.random_range(0.0..1.0));
        let got = srgb_to_lab_pixel(rgb);
        let want = lab_reference(rgb);
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-3, "{rgb:?}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn tensor_lab_agrees_with_pixel_lab() {
    let mut rng = seeded_rng(2);
    let img = random_image(&mut rng, 4, 5);
    let t = srgb_to_lab(&Tensor::<f64>::new(img.data.iter().map(|&v| v as f64).collect(), &[3, 4, 5]).unwrap()).unwrap();
    let planar = image_to_lab(&img);
    for (a, b) in t.data().iter().zip(&planar) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn lab_channel_conventions_differ_by_three() {
    let mut rng = seeded_rng(3);
    let (a, b) = (random_image(&mut rng, 6, 6), random_image(&mut rng, 6, 6));
    let m = HardMask::empty(6, 6);
    let sel = RegionSelector::new(Region::All, &m);
    let (mut sum, mut mean) = (MaeAccumulator::default(), MaeAccumulator::default());
    accumulate_mae(&a, &b, &sel, LabMaeConvention::ChannelSum, &mut sum).unwrap();
    accumulate_mae(&a, &b, &sel, LabMaeConvention::ChannelMean, &mut mean).unwrap();
    assert!((sum.value().unwrap() - 3.0 * mean.value().unwrap()).abs() < 1e-9);
    // Brute-force per-pixel reference.
    let mut want = 0.0;
    for i in 0..36 {
        let p = |img: &RgbImage| lab_reference([0, 1, 2].map(|c| img.plane(c)[i] as f64));
        let (la, lb) = (p(&a), p(&b));
        want += (0..3).map(|c| (la[c] - lb[c]).abs()).sum::<f64>();
    }
    assert!((sum.value().unwrap() - want / 36.0).abs() < 1e-3);
}

#[test]
fn psnr_of_uniform_offset() {
    for (off, db) in [(0.1f32, 20.0), (0.01, 40.0)] {
        let gt = RgbImage::filled(12, 12, 0.25);
        let pred = RgbImage::filled(12, 12, 0.25 + off);
        let m = HardMask::empty(12, 12);
        let p = psnr(&pred, &gt, &RegionSelector::new(Region::All, &m), RegionConvention::Restricted).unwrap().unwrap();
        assert!((p - db).abs() < 1e-3, "{p}");
    }
}

#[test]
fn masked_image_psnr_matches_reference() {
    let mut rng = seeded_rng(4);
    let (a, b) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
    let m = HardMask::new(8, 8, (0..64).map(|i| i % 5 == 0).collect()).unwrap();
    let sel = RegionSelector::new(Region::Shadow, &m);
    let got = psnr(&a, &b, &sel, RegionConvention::MaskedImage).unwrap().unwrap();
    let mut sse = 0.0;
    for c in 0..3 {
        for i in 0..64 {
            if m.data[i] {
                sse += (a.plane(c)[i] as f64 - b.plane(c)[i] as f64).powi(2);
            }
        }
    }
    let want = 10.0 * (1.0 / (sse / 192.0)).log10();
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn ssim_of_constant_images_is_luminance_term() {
    let (x, y) = (0.5f64, 0.6f64);
    let a = RgbImage::filled(16, 16, x as f32);
    let b = RgbImage::filled(16, 16, y as f32);
    let m = HardMask::empty(16, 16);
    let s = ssim(&a, &b, &RegionSelector::new(Region::All, &m), RegionConvention::Restricted).unwrap().unwrap();
    let c1 = 0.01f64.powi(2);
    let want = (2.0 * x * y + c1) / (x * x + y * y + c1);
    assert!((s - want).abs() < 1e-6, "{s} vs {want}");
}

#[test]
fn pooled_errors_decompose_by_region() {
    let mut rng = seeded_rng(5);
    let mut acc = EvalAccumulator::new(EvalProtocol::default());
    for _ in 0..3 {
        let (a, b) = (random_image(&mut rng, 12, 14), random_image(&mut rng, 12, 14));
        let m = HardMask::new(12, 14, (0..168).map(|_| rng.random_bool(0.3)).collect()).unwrap();
        acc.add(&a, &b, &m).unwrap();
    }
    let r = acc.report();
    let lhs = r.rmse_all.unwrap() * r.count_all as f64;
    let rhs = r.rmse_s.unwrap() * r.count_s as f64 + r.rmse_ns.unwrap() * r.count_ns as f64;
    assert!((lhs - rhs).abs() < 1e-6 * lhs);
    assert_eq!(r.count_s + r.count_ns, r.count_all);
}

#[test]
fn soft_mask_matches_scalar_loop() {
    let mut rng = seeded_rng(6);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let (s, f) = (random_image(&mut rng, h, w), random_image(&mut rng, h, w));
        let got = soft_mask_target(&s, &f).unwrap();
        for i in 0..h * w {
            let mut acc = 0.0;
            for c in 0..3 {
                let d: Vec<f64> = (0..h * w).map(|j| s.plane(c)[j] as f64 - f.plane(c)[j] as f64).collect();
                let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    acc += (d[i] - lo) / (hi - lo);
                }
            }
            assert!((got.data[i] as f64 - acc / 3.0).abs() < 1e-6);
        }
    }
}

#[test]
fn soft_mask_of_identical_images_is_zero() {
    let mut rng = seeded_rng(7);
    let s = random_image(&mut rng, 5, 7);
    assert!(soft_mask_target(&s, &s).unwrap().data.iter().all(|&v| v == 0.0));
}

#[test]
fn dilation_matches_brute_force_max_filter() {
    let mut rng = seeded_rng(8);
    for r in [0usize, 1, 2, 7] {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let m = HardMask::new(h, w, (0..h * w).map(|_| rng.random_bool(0.05)).collect()).unwrap();
        let d = dilate(&m, r);
        for y in 0..h {
            for x in 0..w {
                let mut any = false;
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        any |= m.get(yy, xx);
                    }
                }
                assert_eq!(d.get(y, x), any, "r={r} at ({y},{x})");
            }
        }
    }
}

#[test]
fn bilinear_mask_resize_matches_half_pixel_formula() {
    let mut rng = seeded_rng(9);
    let (h, w, oh, ow) = (5usize, 7usize, 3usize, 4usize);
    let src: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let t = Tensor::<f64>::new(src.clone(), &[1, 1, h, w]).unwrap();
    let got = resize_mask(&t, oh, ow, ResizeMode::Bilinear).unwrap();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let v = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = v.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), v - i0 as f64)
    };
    for y in 0..oh {
        for x in 0..ow {
            let (y0, y1, fy) = coord(y, h, oh);
            let (x0, x1, fx) = coord(x, w, ow);
            let p = |yy: usize, xx: usize| src[yy * w + xx];
            let want = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
            assert!((got.data()[y * ow + x] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn nearest_mask_resize_preserves_binary_values() {
    let m = HardMask::new(4, 4, (0..16).map(|i| i < 8).collect()).unwrap();
    let r = resize_mask(&m.to_tensor::<f32>(), 8, 8, ResizeMode::Nearest).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(r.data().iter().filter(|&&v| v == 1.0).count(), 32);
}

#[test]
fn region_stats_match_loop() {
    let mut rng = seeded_rng(10);
    let (n, c, h, w) = (2, 3, 5, 6);
    let x: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    let m: Vec<f64> = (0..n * h * w).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let xt = Tensor::new(x.clone(), &[n, c, h, w]).unwrap();
    let mt = Tensor::new(m.clone(), &[n, 1, h, w]).unwrap();
    let eps = 1e-5;
    for (region, want_mask) in [(SoanRegion::Shadow, 1.0), (SoanRegion::NonShadow, 0.0)] {
        let stats = region_stats(&xt, &mt, region, eps).unwrap();
        for s in 0..n {
            let idx: Vec<usize> = (0..h * w).filter(|&i| m[s * h * w + i] == want_mask).collect();
            assert_eq!(stats[s].count, idx.len());
            for ch in 0..c {
                let vals: Vec<f64> = idx.iter().map(|&i| x[(s * c + ch) * h * w + i]).collect();
                let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!((stats[s].mean[ch] - mu).abs() < 1e-12);
                assert!((stats[s].std[ch] - (var + eps).sqrt()).abs() < 1e-12);
            }
        }
    }
}
