//! Shadow-oriented adaptive normalisation.
//!
//! Half of the channels are standardised per region: shadow pixels are
//! standardised with their own statistics and then re-affined with the mean
//! and standard deviation of the non-shadow pixels, so the shadow region
//! inherits the non-shadow feature distribution. Non-shadow pixels are left
//! standardised. The other half of the channels passes through, the halves
//! are merged, convolved twice and added to a 1x1 residual path.

use cnsnet_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lrelu, BufferId, Conv2d, ForwardCtx, Init, ParamId, VarStore};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoanVariant {
    /// Region-wise normalisation (the default).
    Regional,
    /// Batch normalisation with learnable affine, ignoring the mask.
    Bn,
    /// Whole-image instance normalisation, ignoring the mask.
    In,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoanConfig {
    pub variant: SoanVariant,
    pub eps: f64,
}

impl Default for SoanConfig {
    fn default() -> Self {
        SoanConfig {
            variant: SoanVariant::Regional,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Shadow,
    NonShadow,
}

/// Per-channel mean and `sqrt(var + eps)` of one sample's region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
    pub eps: f64,
}

impl RegionStats {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn check_mask<T: Float>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    let (xs, ms) = (x.shape(), mask.shape());
    let ok = xs.len() == 4
        && ms.len() == 4
        && ms[1] == 1
        && (ms[0] == xs[0] || ms[0] == 1)
        && ms[2..] == xs[2..];
    if !ok {
        return Err(Error::Shape(format!(
            "features {xs:?} need a [N|1, 1, H, W] mask at the same resolution, got {ms:?}"
        )));
    }
    Ok(())
}

fn sample_mask<T: Float>(mask: &Tensor<T>, n: usize) -> &[T] {
    let hw = mask.dim(2) * mask.dim(3);
    let i = if mask.dim(0) == 1 { 0 } else { n };
    &mask.data()[i * hw..(i + 1) * hw]
}

/// Statistics of `region` for every sample of `[N, C, H, W]` features.
/// An empty region yields `count == 0`, zero mean and `std = sqrt(eps)`.
pub fn region_stats<T: Float>(features: &Tensor<T>, mask: &Tensor<T>, region: Region, eps: f64) -> Result<Vec<RegionStats>> {
    check_mask(features, mask)?;
    let [n, c, h, w] = [0, 1, 2, 3].map(|i| features.dim(i));
    let hw = h * w;
    let x = features.data();
    Ok((0..n)
        .map(|s| {
            let sel: Vec<bool> = sample_mask(mask, s)
                .iter()
                .map(|&m| (m > T::of(0.5)) == (region == Region::Shadow))
                .collect();
            let count = sel.iter().filter(|&&b| b).count();
            let (mut mean, mut std) = (vec![0.0; c], vec![eps.sqrt(); c]);
            if count > 0 {
                for ch in 0..c {
                    let plane = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    let vals = plane.iter().zip(&sel).filter(|(_, &b)| b).map(|(v, _)| v.as_f64());
                    let mu = vals.clone().sum::<f64>() / count as f64;
                    let var = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
                    mean[ch] = mu;
                    std[ch] = (var + eps).sqrt();
                }
            }
            RegionStats { mean, std, count, eps }
        })
        .collect())
}

/// Residuals of the count-weighted mean and variance decompositions of the
/// whole-image statistics into shadow and non-shadow parts (with `eps = 0`),
/// maximised over samples and channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecompositionResiduals {
    pub mean: f64,
    pub variance: f64,
}

pub fn stats_decomposition_check<T: Float>(features: &Tensor<T>, mask: &Tensor<T>) -> Result<DecompositionResiduals> {
    let s = region_stats(features, mask, Region::Shadow, 0.0)?;
    let ns = region_stats(features, mask, Region::NonShadow, 0.0)?;
    let all = region_stats(features, &Tensor::ones(&[1, 1, features.dim(2), features.dim(3)]), Region::Shadow, 0.0)?;
    let mut r = DecompositionResiduals { mean: 0.0, variance: 0.0 };
    for ((s, ns), all) in s.iter().zip(&ns).zip(&all) {
        let n = all.count as f64;
        let (ps, pns) = (s.count as f64 / n, ns.count as f64 / n);
        for c in 0..all.mean.len() {
            let mu = ps * s.mean[c] + pns * ns.mean[c];
            r.mean = r.mean.max((all.mean[c] - mu).abs());
            let d = s.mean[c] - ns.mean[c];
            let var = ps * s.std[c].powi(2) + pns * ns.std[c].powi(2) + ps * pns * d * d;
            r.variance = r.variance.max((all.std[c].powi(2) - var).abs());
        }
    }
    Ok(r)
}

/// Differentiable per-sample, per-channel masked mean and standard deviation,
/// each of shape `[N, C, 1, 1]`. `weights` is the 0/1 region indicator
/// expanded to the feature shape and `inv_count` holds `1 / max(count, 1)`.
fn masked_moments<T: Float>(x: &Tensor<T>, weights: &Tensor<T>, inv_count: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = x.shape();
    let mean = x.mul(weights)?.sum_axes(&[2, 3], true)?.mul(inv_count)?;
    let dev = x.sub(&mean.expand(shape)?)?.mul(weights)?;
    let var = dev.square().sum_axes(&[2, 3], true)?.mul(inv_count)?;
    Ok((mean, var.add_scalar(T::of(eps)).sqrt()?))
}

/// Region-wise normalisation of `[N, C, H, W]` features with a 0/1 mask of
/// shape `[N|1, 1, H, W]` (1 = shadow).
///
/// Samples whose shadow or non-shadow region is empty are passed through
/// unchanged and counted in `ctx.diagnostics`.
pub fn regional_normalize<T: Float>(x: &Tensor<T>, mask: &Tensor<T>, eps: f64, ctx: &ForwardCtx) -> Result<Tensor<T>> {
    check_mask(x, mask)?;
    let shape = x.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let ms = mask.expand(&[n, 1, shape[2], shape[3]])?.expand(&shape)?;
    let mns = ms.rsub_scalar(T::one());

    let mut inv_s = Vec::with_capacity(n * c);
    let mut inv_ns = Vec::with_capacity(n * c);
    let mut keep = Vec::with_capacity(n);
    for s in 0..n {
        let m = sample_mask(mask, s);
        let cs = m.iter().filter(|&&v| v > T::of(0.5)).count();
        let cns = m.len() - cs;
        let ok = cs > 0 && cns > 0;
        if !ok {
            ctx.diagnostics.empty_region_fallbacks.set(ctx.diagnostics.empty_region_fallbacks.get() + 1);
        }
        keep.push(if ok { T::one() } else { T::zero() });
        inv_s.extend(std::iter::repeat_n(T::one() / T::of(cs.max(1) as f64), c));
        inv_ns.extend(std::iter::repeat_n(T::one() / T::of(cns.max(1) as f64), c));
    }
    if keep.iter().all(|&k| k == T::zero()) {
        return Ok(x.clone());
    }
    let inv_s = Tensor::new(inv_s, &[n, c, 1, 1])?;
    let inv_ns = Tensor::new(inv_ns, &[n, c, 1, 1])?;
    let (mu_s, sd_s) = masked_moments(x, &ms, &inv_s, eps)?;
    let (mu_ns, sd_ns) = masked_moments(x, &mns, &inv_ns, eps)?;
    let [mu_s, sd_s, mu_ns, sd_ns] = [mu_s, sd_s, mu_ns, sd_ns].map(|t| t.expand(&shape).unwrap());

    let shadow = x.sub(&mu_s)?.div(&sd_s)?.mul(&sd_ns)?.add(&mu_ns)?;
    let non_shadow = x.sub(&mu_ns)?.div(&sd_ns)?;
    let normed = shadow.mul(&ms)?.add(&non_shadow.mul(&mns)?)?;
    if keep.iter().all(|&k| k == T::one()) {
        return Ok(normed);
    }
    let keep = Tensor::new(keep, &[n, 1, 1, 1])?.expand(&shape)?;
    Ok(normed.mul(&keep)?.add(&x.mul(&keep.rsub_scalar(T::one()))?)?)
}

/// Whole-image instance normalisation without affine parameters.
pub fn instance_normalize<T: Float>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let shape = x.shape();
    let mu = x.mean_axes(&[2, 3], true)?.expand(shape)?;
    let centered = x.sub(&mu)?;
    let sd = centered.square().mean_axes(&[2, 3], true)?.add_scalar(T::of(eps)).sqrt()?;
    Ok(centered.div(&sd.expand(shape)?)?)
}

/// Batch normalisation over `(N, H, W)` with learnable affine and running
/// statistics used at evaluation time.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, c: usize, eps: f64) -> Self {
        let mut p = init.sub(name);
        BatchNorm {
            gamma: p.constant("gamma", &[c], 1.0),
            beta: p.constant("beta", &[c], 0.0),
            running_mean: p.buffer("running_mean", &[c], 0.0),
            running_var: p.buffer("running_var", &[c], 1.0),
            momentum: 0.1,
            eps,
        }
    }

    pub fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, ctx: &ForwardCtx) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let c = shape[1];
        let normed = if ctx.train {
            let mu = x.mean_axes(&[0, 2, 3], true)?;
            let centered = x.sub(&mu.expand(&shape)?)?;
            let var = centered.square().mean_axes(&[0, 2, 3], true)?;
            let m = T::of(self.momentum);
            let blend = |id: BufferId, batch: &Tensor<T>| {
                let old = vs.buffer(id);
                let new = old.iter().zip(batch.data()).map(|(&o, &b)| (T::one() - m) * o + m * b).collect();
                vs.set_buffer(id, new);
            };
            blend(self.running_mean, &mu);
            blend(self.running_var, &var);
            centered.div(&var.add_scalar(T::of(self.eps)).sqrt()?.expand(&shape)?)?
        } else {
            let mean = vs.buffer(self.running_mean);
            let inv: Vec<T> = vs
                .buffer(self.running_var)
                .iter()
                .map(|&v| T::one() / (v + T::of(self.eps)).sqrt())
                .collect();
            let shift: Vec<T> = mean.iter().zip(&inv).map(|(&m, &s)| -m * s).collect();
            x.channel_affine(&Tensor::new(inv, &[c])?, &Tensor::new(shift, &[c])?)?
        };
        Ok(normed.channel_affine(&vs.get(self.gamma), &vs.get(self.beta))?)
    }
}

#[derive(Clone, Debug)]
enum Norm {
    None,
    Regional,
    Instance,
    Batch(BatchNorm),
}

/// Split-normalise-merge block with two 3x3 convolutions and a 1x1 residual.
///
/// With `normalize = false` the block keeps its convolutions but skips the
/// normalisation stage entirely.
/// Init scale of the two summed branches of a block, so that a block roughly
/// preserves activation variance with or without normalisation.
pub const BRANCH_INIT_SCALE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct SoanBlock {
    pub channels: usize,
    pub eps: f64,
    norm: Norm,
    conv1: Conv2d,
    conv2: Conv2d,
    residual: Conv2d,
}

impl SoanBlock {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, channels: usize, cfg: &SoanConfig, normalize: bool) -> Result<Self> {
        if !channels.is_multiple_of(2) || channels == 0 {
            return Err(Error::Config(format!("normalisation block needs an even channel count, got {channels}")));
        }
        if cfg.eps <= 0.0 {
            return Err(Error::Config("normalisation epsilon must be positive".into()));
        }
        let mut p = init.sub(name);
        let norm = match (normalize, cfg.variant) {
            (false, _) => Norm::None,
            (true, SoanVariant::Regional) => Norm::Regional,
            (true, SoanVariant::In) => Norm::Instance,
            (true, SoanVariant::Bn) => Norm::Batch(BatchNorm::new(&mut p, "bn", channels / 2, cfg.eps)),
        };
        Ok(SoanBlock {
            channels,
            eps: cfg.eps,
            norm,
            conv1: Conv2d::new(&mut p, "conv1", channels, channels, 3),
            conv2: Conv2d::scaled(&mut p, "conv2", channels, channels, 3, BRANCH_INIT_SCALE),
            residual: Conv2d::scaled(&mut p, "residual", channels, channels, 1, BRANCH_INIT_SCALE),
        })
    }

    /// Normalisation stage only: returns the merged features before the
    /// convolutions.
    pub fn normalize<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, mask: &Tensor<T>, ctx: &ForwardCtx) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.dim(1) != self.channels {
            return Err(Error::Shape(format!("block expects {} channels, got {:?}", self.channels, x.shape())));
        }
        let half = self.channels / 2;
        let parts = x.split(1, &[half, half])?;
        let first = match &self.norm {
            Norm::None => return Ok(x.clone()),
            Norm::Regional => regional_normalize(&parts[0], mask, self.eps, ctx)?,
            Norm::Instance => instance_normalize(&parts[0], self.eps)?,
            Norm::Batch(bn) => bn.forward(vs, &parts[0], ctx)?,
        };
        Ok(Tensor::concat(&[first, parts[1].clone()], 1)?)
    }

    pub fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, mask: &Tensor<T>, ctx: &ForwardCtx) -> Result<Tensor<T>> {
        let merged = self.normalize(vs, x, mask, ctx)?;
        let h = lrelu(&self.conv1.forward(vs, &merged)?);
        let out = self.conv2.forward(vs, &h)?;
        Ok(out.add(&self.residual.forward(vs, x)?)?)
    }
}
