//! The full network: soft-mask predictor, UNet-like backbone with
//! normalisation blocks at every scale, and mask-guided attention at the
//! deepest scale.

use cnsnet_tensor::init::seeded_rng;
use cnsnet_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{resize_mask, ResizeMode, SoftMaskPredictor};
use crate::nn::{lrelu, Conv2d, ForwardCtx, Init, VarStore};
use crate::saat::{MaskMode, Saat, SaatConfig};
use crate::soan::{SoanBlock, SoanConfig, SoanVariant};

/// Initial weight scale of the output layer when the input skip is enabled.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_width: usize,
    pub scales: usize,
    /// Channel widths double per scale up to this cap.
    pub max_width: usize,
    pub soan: SoanConfig,
    pub saat: SaatConfig,
    pub enable_soan: bool,
    pub enable_saat: bool,
    pub predictor_width: usize,
    pub predictor_depth: usize,
    /// Side of the token grid the positional table is built for.
    pub token_grid: usize,
    /// Add the logit of the input image before the output sigmoid.
    pub input_residual: bool,
    /// Weights of the removal, soft-mask, perceptual and gradient losses.
    pub lambda: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 32,
            scales: 4,
            max_width: 64,
            soan: SoanConfig::default(),
            saat: SaatConfig::default(),
            enable_soan: true,
            enable_saat: true,
            predictor_width: 16,
            predictor_depth: 3,
            token_grid: 8,
            input_residual: true,
            lambda: [10.0, 5.0, 1.0, 1.0],
        }
    }
}

/// Structural variants used for ablation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoSoan,
    NoSaat,
    SoanBn,
    SoanIn,
    SaatHardMask,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoSoan,
        Ablation::NoSaat,
        Ablation::SoanBn,
        Ablation::SoanIn,
        Ablation::SaatHardMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSoan => "no-soan",
            Ablation::NoSaat => "no-saat",
            Ablation::SoanBn => "soan-bn",
            Ablation::SoanIn => "soan-in",
            Ablation::SaatHardMask => "saat-hard-mask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoSoan => c.enable_soan = false,
            Ablation::NoSaat => c.enable_saat = false,
            Ablation::SoanBn => c.soan.variant = SoanVariant::Bn,
            Ablation::SoanIn => c.soan.variant = SoanVariant::In,
            Ablation::SaatHardMask => c.saat.mask_mode = MaskMode::Hard,
        }
        c
    }
}

impl ModelConfig {
    pub fn widths(&self) -> Vec<usize> {
        (0..self.scales).map(|i| (self.base_width << i).min(self.max_width)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::Config("the backbone needs at least 2 scales".into()));
        }
        if self.base_width == 0 || self.predictor_width == 0 || self.token_grid == 0 {
            return Err(Error::Config("widths and token grid must be positive".into()));
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {:?}", self.lambda)));
        }
        Ok(())
    }

    /// Image sides must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.scales - 1).max(self.predictor_depth)
    }
}

#[derive(Clone, Debug)]
struct Level {
    conv: Conv2d,
    block: SoanBlock,
}

impl Level {
    fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, mask: &Tensor<T>, ctx: &ForwardCtx) -> Result<Tensor<T>> {
        let h = lrelu(&self.conv.forward(vs, x)?);
        self.block.forward(vs, &h, mask, ctx)
    }
}

#[derive(Debug)]
pub struct ModelOutput<T: Float> {
    /// `[N, 3, H, W]` in `[0, 1]`.
    pub output: Tensor<T>,
    /// Predicted soft mask `[N, 1, H, W]` in `[0, 1]`.
    pub soft_mask: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Cnsnet {
    pub cfg: ModelConfig,
    pub predictor: SoftMaskPredictor,
    input: Conv2d,
    encoder: Vec<Level>,
    saat: Option<Saat>,
    decoder: Vec<Level>,
    output: Conv2d,
}

impl Cnsnet {
    /// Builds the network and its parameters from a seed.
    pub fn build<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<(Self, VarStore<T>)> {
        cfg.validate()?;
        let mut vs = VarStore::new();
        let mut rng = seeded_rng(seed);
        let mut init = Init::new(&mut vs, &mut rng);
        let widths = cfg.widths();
        let predictor = SoftMaskPredictor::new(&mut init, "predictor", cfg.predictor_width, cfg.predictor_depth);
        let input = Conv2d::new(&mut init, "input", 5, widths[0], 3);
        let mut encoder = Vec::new();
        let mut prev = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let mut p = init.sub(&format!("enc{i}"));
            encoder.push(Level {
                conv: Conv2d::new(&mut p, "conv", prev, w, 3),
                block: SoanBlock::new(&mut p, "soan", w, &cfg.soan, cfg.enable_soan)?,
            });
            prev = w;
        }
        let deepest = *widths.last().unwrap();
        let saat = if cfg.enable_saat {
            let scfg = SaatConfig {
                channels: deepest,
                ..cfg.saat
            };
            Some(Saat::new(&mut init, "saat", &scfg, (cfg.token_grid, cfg.token_grid))?)
        } else {
            None
        };
        let mut decoder = Vec::new();
        for i in (0..widths.len() - 1).rev() {
            let mut p = init.sub(&format!("dec{i}"));
            decoder.push(Level {
                conv: Conv2d::new(&mut p, "conv", widths[i + 1] + widths[i], widths[i], 3),
                block: SoanBlock::new(&mut p, "soan", widths[i], &cfg.soan, cfg.enable_soan)?,
            });
        }
        // With the input skip, a small output layer starts training near the identity map.
        let out_scale = if cfg.input_residual { OUTPUT_INIT_SCALE } else { 1.0 };
        let output = Conv2d::scaled(&mut init, "output", widths[0], 3, 3, out_scale);
        let net = Cnsnet {
            cfg: cfg.clone(),
            predictor,
            input,
            encoder,
            saat,
            decoder,
            output,
        };
        Ok((net, vs))
    }

    pub fn saat(&self) -> Option<&Saat> {
        self.saat.as_ref()
    }

    pub fn output_conv(&self) -> &Conv2d {
        &self.output
    }

    /// `shadow` is `[N, 3, H, W]` in `[0, 1]`, `hard` the 0/1 mask `[N, 1, H, W]`.
    pub fn forward<T: Float>(&self, vs: &VarStore<T>, shadow: &Tensor<T>, hard: &Tensor<T>, ctx: &ForwardCtx) -> Result<ModelOutput<T>> {
        let soft = self.predictor_forward(vs, shadow, hard)?;
        let output = self.backbone_forward(vs, shadow, hard, &soft, ctx)?;
        Ok(ModelOutput { output, soft_mask: soft })
    }

    fn check_input<T: Float>(&self, shadow: &Tensor<T>, hard: &Tensor<T>) -> Result<()> {
        let s = shadow.shape();
        if s.len() != 4 || s[1] != 3 || hard.shape() != [s[0], 1, s[2], s[3]] {
            return Err(Error::Shape(format!(
                "expected [N, 3, H, W] image and [N, 1, H, W] mask, got {s:?} and {:?}",
                hard.shape()
            )));
        }
        let m = self.cfg.required_multiple();
        if !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) {
            let pad = |v: usize| v.div_ceil(m) * m - v;
            return Err(Error::Shape(format!(
                "image {}x{} must have sides divisible by {m}; pad by {} rows and {} columns",
                s[2],
                s[3],
                pad(s[2]),
                pad(s[3])
            )));
        }
        Ok(())
    }

    pub fn predictor_forward<T: Float>(&self, vs: &VarStore<T>, shadow: &Tensor<T>, hard: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(shadow, hard)?;
        self.predictor.forward(vs, shadow, hard)
    }

    /// Backbone given an explicit soft mask (the predictor output in normal use).
    pub fn backbone_forward<T: Float>(
        &self,
        vs: &VarStore<T>,
        shadow: &Tensor<T>,
        hard: &Tensor<T>,
        soft: &Tensor<T>,
        ctx: &ForwardCtx,
    ) -> Result<Tensor<T>> {
        self.check_input(shadow, hard)?;
        let mut x = lrelu(&self.input.forward(vs, &Tensor::concat(&[shadow.clone(), hard.clone(), soft.clone()], 1)?)?);
        let mut skips = Vec::new();
        for (i, level) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = x.downsample2x()?;
            }
            let m = resize_mask(hard, x.dim(2), x.dim(3), ResizeMode::Nearest)?;
            x = level.forward(vs, &x, &m, ctx)?;
            skips.push(x.clone());
        }
        skips.pop();
        if let Some(saat) = &self.saat {
            let (h, w) = (x.dim(2), x.dim(3));
            let guide = match saat.cfg.mask_mode {
                MaskMode::Soft => resize_mask(soft, h, w, ResizeMode::Bilinear)?,
                MaskMode::Hard => resize_mask(hard, h, w, ResizeMode::Nearest)?,
            };
            x = saat.forward(vs, &x, &guide.rsub_scalar(T::one()))?;
        }
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            x = Tensor::concat(&[x.upsample_bilinear2x()?, skip], 1)?;
            let m = resize_mask(hard, x.dim(2), x.dim(3), ResizeMode::Nearest)?;
            x = level.forward(vs, &x, &m, ctx)?;
        }
        let mut logits = self.output.forward(vs, &x)?;
        if self.cfg.input_residual {
            logits = logits.add(&logit(shadow))?;
        }
        Ok(logits.sigmoid())
    }
}

/// `ln(p / (1 - p))` with `p` clamped to `[1/512, 1 - 1/512]`; the gradient
/// is zero outside that range.
fn logit<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let lo = 1.0 / 512.0;
    let d = x
        .data()
        .iter()
        .map(|v| {
            let p = v.as_f64().clamp(lo, 1.0 - lo);
            T::of((p / (1.0 - p)).ln())
        })
        .collect();
    Tensor::from_op(
        "logit",
        d,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, _, parents| {
            let gx = g
                .iter()
                .zip(parents[0].data())
                .map(|(&g, &v)| {
                    let p = v.as_f64();
                    if (lo..=1.0 - lo).contains(&p) {
                        g * T::of(1.0 / (p * (1.0 - p)))
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(gx)]
        }),
    )
}

/// Number of trainable scalars.
pub fn param_count<T: Float>(vs: &VarStore<T>) -> usize {
    vs.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(n: usize, s: usize) -> (Tensor<f32>, Tensor<f32>) {
        let img = Tensor::new((0..n * 3 * s * s).map(|v| ((v * 37 % 101) as f32) / 101.0).collect(), &[n, 3, s, s]).unwrap();
        let m = Tensor::new((0..n * s * s).map(|v| ((v % s) < s / 2) as u8 as f32).collect(), &[n, 1, s, s]).unwrap();
        (img, m)
    }

    #[test]
    fn default_param_budget() {
        let (_, vs) = Cnsnet::build::<f32>(&ModelConfig::default(), 0).unwrap();
        let n = param_count(&vs);
        assert!((800_000..=1_600_000).contains(&n), "{n}");
    }

    #[test]
    fn forward_shapes_and_range() {
        let cfg = ModelConfig {
            base_width: 8,
            max_width: 16,
            predictor_width: 4,
            token_grid: 2,
            ..Default::default()
        };
        let (net, vs) = Cnsnet::build::<f32>(&cfg, 0).unwrap();
        let (img, m) = inputs(2, 16);
        let out = net.forward(&vs, &img, &m, &ForwardCtx::eval()).unwrap();
        assert_eq!(out.output.shape(), img.shape());
        assert_eq!(out.soft_mask.shape(), m.shape());
        assert!(out.output.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (bad, bm) = inputs(1, 12);
        let err = net.forward(&vs, &bad, &bm, &ForwardCtx::eval()).unwrap_err().to_string();
        assert!(err.contains("pad by 4"), "{err}");
    }

    #[test]
    fn ablations_build_and_differ() {
        let cfg = ModelConfig {
            base_width: 8,
            max_width: 16,
            predictor_width: 4,
            token_grid: 2,
            ..Default::default()
        };
        let (img, m) = inputs(1, 16);
        let (net, vs) = Cnsnet::build::<f32>(&cfg, 0).unwrap();
        let base = net.forward(&vs, &img, &m, &ForwardCtx::eval()).unwrap().output.to_vec();
        for a in &Ablation::ALL[1..] {
            let (n2, vs2) = Cnsnet::build::<f32>(&a.apply(&cfg), 0).unwrap();
            let out = n2.forward(&vs2, &img, &m, &ForwardCtx::eval()).unwrap().output.to_vec();
            assert!(vs2.param_count() != vs.param_count() || out != base, "{a:?}");
            assert_eq!(Ablation::parse(a.name()), Some(*a));
        }
        let plain = ModelConfig { enable_saat: false, enable_soan: false, ..cfg };
        assert!(Cnsnet::build::<f32>(&plain, 0).is_ok());
    }
}
