//! Invariant battery: gradient checks, region statistics identities,
//! normalisation transfer, neutral-mask attention, soft-mask and metric
//! oracles, and a mutation check of the gradient checker itself.

use std::time::Instant;

use cnsnet_tensor::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use cnsnet_tensor::init::{seeded_rng, SeededRng};
use cnsnet_tensor::{Float, Tensor, TensorError};
use rand::Rng;

use crate::colorspace::srgb_to_lab_pixel;
use crate::error::Result;
use crate::eval::{evaluate_baseline, Baseline};
use crate::image::RgbImage;
use crate::loss::{loss_grad, loss_per, PerceptualExtractor};
use crate::mask::{soft_mask_target, HardMask};
use crate::metrics::{psnr, ssim, EvalProtocol, Region, RegionConvention, RegionSelector};
use crate::nn::{ForwardCtx, Init, VarStore};
use crate::saat::{masked_attention, MaskMode, MaskedAttention, Saat, SaatConfig};
use crate::soan::{region_stats, regional_normalize, stats_decomposition_check, SoanBlock, SoanConfig};

pub const GRAD_TOLERANCE: f64 = 1e-3;

pub fn random_values(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor<T: Float>(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let v: Vec<T> = random_values(rng, n, lo, hi).into_iter().map(T::of).collect();
    Tensor::new(v, shape).expect("values match shape")
}

/// Random 0/1 mask `[n, 1, h, w]` with both regions present in every sample.
pub fn random_mask<T: Float>(rng: &mut SeededRng, n: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut v = Vec::with_capacity(n * hw);
    for _ in 0..n {
        let p = rng.random_range(0.2..0.8);
        let mut m: Vec<bool> = (0..hw).map(|_| rng.random_bool(p)).collect();
        m[0] = true;
        m[hw - 1] = false;
        v.extend(m.into_iter().map(|b| if b { T::one() } else { T::zero() }));
    }
    Tensor::new(v, &[n, 1, h, w]).expect("values match shape")
}

/// Weighted sum with fixed random weights, so every output element matters.
fn probe(out: &Tensor<f64>, rng_seed: u64) -> Result<Tensor<f64>> {
    let mut rng = seeded_rng(rng_seed);
    let w = random_tensor::<f64>(&mut rng, out.shape(), -1.0, 1.0);
    Ok(out.mul(&w)?.sum())
}

/// [`check_gradients`] for closures returning this crate's errors.
pub fn check_model_gradients<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let wrapped = |t: &[Tensor<f64>]| {
        f(t).map_err(|e| TensorError::InvalidArgument {
            op: "model",
            msg: e.to_string(),
        })
    };
    Ok(check_gradients(wrapped, inputs, opts)?)
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..Default::default() }
}

pub fn gradcheck_conv(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let x = random_tensor::<f64>(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let w = random_tensor::<f64>(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = random_tensor::<f64>(&mut rng, &[4], -0.5, 0.5);
    check_model_gradients(
        |t| probe(&t[0].conv2d(&t[1], Some(&t[2]), 1, 1)?, seed),
        &[x, w, b],
        opts(seed),
    )
}

pub fn gradcheck_soan(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let mut vs = VarStore::<f64>::new();
    let block = {
        let mut init_rng = seeded_rng(seed ^ 0xA5);
        let mut init = Init::new(&mut vs, &mut init_rng);
        SoanBlock::new(&mut init, "soan", 4, &SoanConfig::default(), true)?
    };
    let x = random_tensor::<f64>(&mut rng, &[2, 4, 6, 6], -1.0, 1.0);
    let mask = random_mask::<f64>(&mut rng, 2, 6, 6);
    let ctx = ForwardCtx::train();
    check_model_gradients(|t| probe(&block.forward(&vs, &t[0], &mask, &ctx)?, seed), &[x], opts(seed))
}

fn attention_fixture(seed: u64, channels: usize, heads: usize) -> (VarStore<f64>, MaskedAttention) {
    let mut vs = VarStore::<f64>::new();
    let mut rng = seeded_rng(seed ^ 0x5A);
    let attn = MaskedAttention::new(&mut Init::new(&mut vs, &mut rng), "attn", channels, heads);
    (vs, attn)
}

pub fn gradcheck_attention(seed: u64) -> Result<GradCheckReport> {
    let (vs, attn) = attention_fixture(seed, 8, 2);
    let mut rng = seeded_rng(seed);
    let x = random_tensor::<f64>(&mut rng, &[6, 8], -1.0, 1.0);
    let m = random_tensor::<f64>(&mut rng, &[6, 1], 0.0, 1.0);
    check_model_gradients(|t| probe(&masked_attention(&vs, &attn, &t[0], &t[1])?, seed), &[x, m], opts(seed))
}

pub fn gradcheck_saat(seed: u64) -> Result<GradCheckReport> {
    let cfg = SaatConfig {
        heads: 2,
        layers: 1,
        channels: 8,
        mask_mode: MaskMode::Soft,
        ffn_expansion: 2,
    };
    let mut vs = VarStore::<f64>::new();
    let saat = {
        let mut init_rng = seeded_rng(seed ^ 0x3C);
        Saat::new(&mut Init::new(&mut vs, &mut init_rng), "saat", &cfg, (3, 3))?
    };
    let mut rng = seeded_rng(seed);
    let x = random_tensor::<f64>(&mut rng, &[1, 8, 3, 3], -1.0, 1.0);
    let m = random_tensor::<f64>(&mut rng, &[1, 1, 3, 3], 0.0, 1.0);
    check_model_gradients(|t| probe(&saat.forward(&vs, &t[0], &t[1])?, seed), &[x, m], opts(seed))
}

pub fn gradcheck_loss_grad(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let out = random_tensor::<f64>(&mut rng, &[2, 3, 10, 10], 0.0, 1.0);
    let input = random_tensor::<f64>(&mut rng, &[2, 3, 10, 10], 0.0, 1.0);
    let gt = random_tensor::<f64>(&mut rng, &[2, 3, 10, 10], 0.0, 1.0);
    let masks: Vec<HardMask> = (0..2)
        .map(|_| {
            let (y, x) = (rng.random_range(0..10), rng.random_range(0..10));
            let mut m = HardMask::empty(10, 10);
            m.data[y * 10 + x] = true;
            m
        })
        .collect();
    check_model_gradients(|t| loss_grad(&t[0], &input, &gt, &masks), &[out], opts(seed))
}

pub fn gradcheck_loss_per(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let ext = PerceptualExtractor::<f64>::seeded(seed);
    let out = random_tensor::<f64>(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    let gt = random_tensor::<f64>(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    check_model_gradients(|t| loss_per(&t[0], &gt, &ext), &[out], opts(seed))
}

/// Named gradient checks run by the battery.
pub const GRAD_CHECKS: [(&str, fn(u64) -> Result<GradCheckReport>); 6] = [
    ("conv2d", gradcheck_conv),
    ("soan block", gradcheck_soan),
    ("masked attention", gradcheck_attention),
    ("saat", gradcheck_saat),
    ("gradient loss", gradcheck_loss_grad),
    ("perceptual loss", gradcheck_loss_per),
];

/// Direct-loop convolution (stride 1, no bias) whose backward can be
/// corrupted by reading the kernel without spatial flipping in the input
/// gradient. Used to show the gradient checker rejects a wrong rule.
pub fn loop_conv(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize, corrupt: bool) -> Tensor<f64> {
    let [n, c, h, wd] = [0, 1, 2, 3].map(|i| x.dim(i));
    let (co, k) = (w.dim(0), w.dim(2));
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let geo = move |s: usize, o: usize, ci: usize, y: usize, xx: usize, ky: usize, kx: usize| {
        let iy = (y + ky) as isize - pad as isize;
        let ix = (xx + kx) as isize - pad as isize;
        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd;
        inside.then(|| {
            (
                ((s * c + ci) * h + iy as usize) * wd + ix as usize,
                ((o * c + ci) * k + ky) * k + kx,
                ((s * co + o) * oh + y) * ow + xx,
            )
        })
    };
    let each = move |f: &mut dyn FnMut(usize, usize, usize, usize, usize)| {
        for s in 0..n {
            for o in 0..co {
                for ci in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            for ky in 0..k {
                                for kx in 0..k {
                                    if let Some((xi, wi, oi)) = geo(s, o, ci, y, xx, ky, kx) {
                                        f(xi, wi, oi, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    let mut out = vec![0.0; n * co * oh * ow];
    let (xd, wdat) = (x.data(), w.data());
    each(&mut |xi, wi, oi, _, _| out[oi] += xd[xi] * wdat[wi]);
    Tensor::from_op(
        "loop_conv",
        out,
        vec![n, co, oh, ow],
        vec![x.clone(), w.clone()],
        Box::new(move |g, _, parents| {
            let (xd, wdat) = (parents[0].data(), parents[1].data());
            let mut gx = vec![0.0; xd.len()];
            let mut gw = vec![0.0; wdat.len()];
            each(&mut |xi, wi, oi, ky, kx| {
                let wi_used = if corrupt { wi - (ky * k + kx) + (kx * k + ky) } else { wi };
                gx[xi] += g[oi] * wdat[wi_used];
                gw[wi] += g[oi] * xd[xi];
            });
            vec![Some(gx), Some(gw)]
        }),
    )
}

/// Gradient check of [`loop_conv`] with an asymmetric kernel.
pub fn gradcheck_loop_conv(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let x = random_tensor::<f64>(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let w = random_tensor::<f64>(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    check_model_gradients(
        |t| probe(&loop_conv(&t[0], &t[1], 1, corrupt), seed),
        &[x, w],
        GradCheckOptions {
            max_coords: 64,
            ..opts(seed)
        },
    )
}

/// Largest mean / variance decomposition residual over `count` random
/// feature maps and masks.
pub fn decomposition_residual(count: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(2..12), rng.random_range(2..12));
        let x = random_tensor::<f64>(&mut rng, &[1, c, h, w], -3.0, 3.0);
        let m = random_mask::<f64>(&mut rng, 1, h, w);
        let r = stats_decomposition_check(&x, &m)?;
        worst = worst.max(r.mean).max(r.variance);
    }
    Ok(worst)
}

/// Largest deviation between the post-normalisation shadow statistics and the
/// input non-shadow statistics over `count` random 32-bit feature maps.
pub fn stat_transfer_error(count: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let eps = SoanConfig::default().eps;
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(4..12), rng.random_range(4..12));
        let scale = rng.random_range(0.5..3.0);
        let x = random_tensor::<f32>(&mut rng, &[1, c, h, w], -scale, scale);
        let m = random_mask::<f32>(&mut rng, 1, h, w);
        let ns = region_stats(&x, &m, crate::soan::Region::NonShadow, eps)?;
        let y = regional_normalize(&x, &m, eps, &ForwardCtx::train())?;
        let post = region_stats(&y, &m, crate::soan::Region::Shadow, 0.0)?;
        for ch in 0..c {
            worst = worst.max((post[0].mean[ch] - ns[0].mean[ch]).abs());
            worst = worst.max((post[0].std[ch] - ns[0].std[ch]).abs());
        }
    }
    Ok(worst)
}

/// Over `count` random configurations: largest difference between masked
/// attention with an all-ones mask and plain attention, and largest
/// deviation of an attention row sum from 1.
pub fn neutral_mask_errors(count: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = seeded_rng(seed);
    let (mut diff, mut rows) = (0.0f64, 0.0f64);
    for i in 0..count {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let channels = heads * rng.random_range(1..5);
        let n = rng.random_range(1..10);
        let (vs, attn) = attention_fixture(seed.wrapping_add(i as u64), channels, heads);
        let x = random_tensor::<f64>(&mut rng, &[n, channels], -2.0, 2.0);
        let ones = Tensor::<f64>::ones(&[n, 1]);
        let masked = masked_attention(&vs, &attn, &x, &ones)?;
        let plain = attn.forward(&vs, &x, None)?;
        for (a, b) in masked.data().iter().zip(plain.data()) {
            diff = diff.max((a - b).abs());
        }
        let m = random_tensor::<f64>(&mut rng, &[n, 1], 0.0, 1.0);
        for map in attn.attention_maps(&vs, &x, Some(&m))? {
            for r in map.data().chunks(n) {
                rows = rows.max((r.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok((diff, rows))
}

fn random_image(rng: &mut SeededRng, h: usize, w: usize) -> RgbImage {
    RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).expect("values match extents")
}

/// Largest difference between the soft-mask target and a per-pixel scalar
/// evaluation of the same formula; also checks range and the identity case.
pub fn soft_mask_oracle_error(count: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (h, w) = (rng.random_range(1..16), rng.random_range(1..16));
        let (a, b) = (random_image(&mut rng, h, w), random_image(&mut rng, h, w));
        let got = soft_mask_target(&a, &b)?;
        for i in 0..h * w {
            let mut s = 0.0;
            for c in 0..3 {
                let d = |j: usize| a.plane(c)[j] as f64 - b.plane(c)[j] as f64;
                let (lo, hi) = (0..h * w).map(d).fold((f64::MAX, f64::MIN), |(l, u), v| (l.min(v), u.max(v)));
                if hi > lo {
                    s += ((d(i) - lo) / (hi - lo)).abs();
                }
            }
            let v = got.data[i] as f64;
            if !(0.0..=1.0).contains(&v) {
                return Ok(f64::INFINITY);
            }
            worst = worst.max((v - s / 3.0).abs());
        }
        if soft_mask_target(&a, &a)?.data.iter().any(|&v| v != 0.0) {
            return Ok(f64::INFINITY);
        }
    }
    Ok(worst)
}

/// Closed-form metric checks; returns the largest deviation. Images are
/// stored in single precision, so deviations of order 1e-6 are expected.
pub fn metric_oracle_error() -> Result<f64> {
    let mut worst = 0.0f64;
    let gt = RgbImage::filled(16, 16, 0.5);
    let pred = RgbImage::filled(16, 16, 0.6);
    let mask = HardMask::empty(16, 16);
    let all = RegionSelector::new(Region::All, &mask);
    let p = psnr(&pred, &gt, &all, RegionConvention::Restricted)?.unwrap_or(f64::NAN);
    worst = worst.max((p - 20.0).abs());
    let mut rng = seeded_rng(3);
    let img = random_image(&mut rng, 16, 16);
    let s = ssim(&img, &img, &all, RegionConvention::Restricted)?.unwrap_or(f64::NAN);
    worst = worst.max((s - 1.0).abs());
    let white = srgb_to_lab_pixel([1.0, 1.0, 1.0]);
    worst = worst.max((white[0] - 100.0).abs() / 100.0).max(white[1].abs() / 100.0).max(white[2].abs() / 100.0);
    let black = srgb_to_lab_pixel([0.0, 0.0, 0.0]);
    worst = worst.max(black.iter().map(|v| v.abs()).fold(0.0, f64::max));
    let t = crate::data::ImageTriplet::new("oracle", img.clone(), HardMask::from_u8(16, 16, &[255; 256])?, img)?;
    let r = evaluate_baseline(&vec![t], Baseline::Oracle, EvalProtocol::default())?;
    worst = worst.max(r.rmse_s.unwrap_or(f64::NAN));
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<36}{:>8}{:>14}{:>12}{:>9}\n", "check", "result", "value", "tolerance", "time");
        for c in &self.checks {
            s += &format!(
                "{:<36}{:>8}{:>14.3e}{:>12.1e}{:>8.2}s\n",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.value,
                c.tolerance,
                c.seconds
            );
        }
        s
    }
}

/// Runs every check; `seeds` gradient-check seeds per component.
pub fn run_selftest(seeds: u64) -> SelftestReport {
    let mut report = SelftestReport::default();
    let mut push = |name: String, tolerance: f64, below: bool, f: &mut dyn FnMut() -> Result<f64>| {
        let t = Instant::now();
        let value = f().unwrap_or(f64::INFINITY);
        let passed = if below { value < tolerance } else { value >= tolerance };
        report.checks.push(CheckResult {
            name,
            passed,
            value,
            tolerance,
            seconds: t.elapsed().as_secs_f64(),
        });
    };
    for (name, check) in GRAD_CHECKS {
        push(format!("gradient: {name}"), GRAD_TOLERANCE, true, &mut || {
            (0..seeds).try_fold(0.0f64, |w, s| Ok(w.max(check(s)?.max_rel_error)))
        });
    }
    push("gradient: reference loop conv".into(), GRAD_TOLERANCE, true, &mut || {
        Ok(gradcheck_loop_conv(7, false)?.max_rel_error)
    });
    push("mutation: corrupted conv backward".into(), GRAD_TOLERANCE, false, &mut || {
        Ok(gradcheck_loop_conv(7, true)?.max_rel_error)
    });
    push("region statistics decomposition".into(), 1e-8, true, &mut || decomposition_residual(200, 11));
    push("shadow statistics transfer".into(), 1e-4, true, &mut || stat_transfer_error(50, 12));
    push("neutral-mask attention".into(), 1e-6, true, &mut || Ok(neutral_mask_errors(50, 13)?.0));
    push("attention rows sum to one".into(), 1e-6, true, &mut || Ok(neutral_mask_errors(50, 14)?.1));
    push("soft-mask oracle".into(), 1e-6, true, &mut || soft_mask_oracle_error(30, 15));
    push("metric oracles".into(), 1e-5, true, &mut || metric_oracle_error());
    report
}
