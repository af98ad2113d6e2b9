//! Training losses: removal L1, soft-mask L1, perceptual feature loss and the
//! boundary-aware Laplacian gradient loss.

use cnsnet_tensor::init::{kaiming_uniform, seeded_rng};
use cnsnet_tensor::{Archive, Float, Tensor};

use crate::error::{Error, Result};
use crate::mask::{dilate, HardMask};
use crate::nn::lrelu;

/// Dilation radius of the hard mask used by the gradient loss.
pub const GRAD_DILATION: usize = 7;

/// Stage weights of the perceptual loss, shallow to deep.
pub const PERCEPTUAL_WEIGHTS: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

/// Mean absolute error between output and ground truth.
pub fn loss_rem<T: Float>(output: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(output.sub(gt)?.abs().mean())
}

/// `sqrt` whose derivative is taken as zero at zero.
fn safe_sqrt<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|v| v.max(T::zero()).sqrt()).collect();
    Tensor::from_op(
        "safe_sqrt",
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(|g, out, _| {
            let two = T::of(2.0);
            vec![Some(
                g.iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > T::zero() { g / (two * y) } else { T::zero() })
                    .collect(),
            )]
        }),
    )
}

/// Root mean square of all elements.
pub fn rms<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    safe_sqrt(&x.square().mean())
}

/// Frozen five-stage convolutional feature pyramid.
///
/// Weights are seeded random by default; [`PerceptualExtractor::from_archive`]
/// accepts externally trained stage weights with the same layout.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T: Float> {
    /// `(weight, bias, stride)` per stage.
    pub stages: Vec<(Tensor<T>, Tensor<T>, usize)>,
    pub weights: [f64; 5],
}

/// `(in, out, stride)` of each stage.
const STAGES: [(usize, usize, usize); 5] = [(3, 16, 1), (16, 32, 2), (32, 64, 2), (64, 64, 2), (64, 64, 2)];

impl<T: Float> PerceptualExtractor<T> {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let stages = STAGES
            .iter()
            .map(|&(cin, cout, stride)| {
                let w: Vec<T> = kaiming_uniform(&mut rng, cout * cin * 9, cin * 9, 0.2);
                (
                    Tensor::new(w, &[cout, cin, 3, 3]).unwrap(),
                    Tensor::zeros(&[cout]),
                    stride,
                )
            })
            .collect();
        PerceptualExtractor {
            stages,
            weights: PERCEPTUAL_WEIGHTS,
        }
    }

    /// Loads `stage{k}.weight` / `stage{k}.bias` for `k = 0..5`.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let stages = STAGES
            .iter()
            .enumerate()
            .map(|(k, &(cin, cout, stride))| {
                let w = archive.tensor::<T>(&format!("stage{k}.weight"))?;
                let b = archive.tensor::<T>(&format!("stage{k}.bias"))?;
                if w.shape() != [cout, cin, 3, 3] || b.shape() != [cout] {
                    return Err(Error::Checkpoint(format!(
                        "perceptual stage {k}: expected [{cout}, {cin}, 3, 3] weights and [{cout}] bias"
                    )));
                }
                Ok((w, b, stride))
            })
            .collect::<Result<_>>()?;
        Ok(PerceptualExtractor {
            stages,
            weights: PERCEPTUAL_WEIGHTS,
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (k, (w, b, _)) in self.stages.iter().enumerate() {
            a.push_tensor(&format!("stage{k}.weight"), w)?;
            a.push_tensor(&format!("stage{k}.bias"), b)?;
        }
        Ok(a)
    }

    /// Output of every stage for `[N, 3, H, W]` input.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for (w, b, stride) in &self.stages {
            h = lrelu(&h.conv2d(w, Some(b), *stride, 1)?);
            feats.push(h.clone());
        }
        Ok(feats)
    }
}

/// `sum_k w_k * rms(phi_k(output) - phi_k(gt))`.
pub fn loss_per<T: Float>(output: &Tensor<T>, gt: &Tensor<T>, extractor: &PerceptualExtractor<T>) -> Result<Tensor<T>> {
    let fo = extractor.features(output)?;
    let fg = extractor.features(&gt.detach())?;
    let mut total: Option<Tensor<T>> = None;
    for ((a, b), &w) in fo.iter().zip(&fg).zip(&extractor.weights) {
        let term = rms(&a.sub(b)?).mul_scalar(T::of(w));
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has stages"))
}

/// 5-point Laplacian of every channel over the valid interior:
/// `[N, C, H, W]` to `[N, C, H-2, W-2]`.
pub fn laplacian<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = [0, 1, 2, 3].map(|i| x.dim(i));
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("Laplacian needs at least 3x3 images, got {h}x{w}")));
    }
    let k = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    let kernel = Tensor::<T>::from_f64(&k, &[1, 1, 3, 3])?;
    let y = x.reshape(&[n * c, 1, h, w])?.conv2d(&kernel, None, 1, 0)?;
    Ok(y.reshape(&[n, c, h - 2, w - 2])?)
}

/// Interior crop of the dilated masks as a `[N, 1, H-2, W-2]` 0/1 tensor.
fn interior_weights<T: Float>(masks: &[HardMask], radius: usize) -> Result<Tensor<T>> {
    let (h, w) = (masks[0].height, masks[0].width);
    let mut data = Vec::with_capacity(masks.len() * (h - 2) * (w - 2));
    for m in masks {
        if (m.height, m.width) != (h, w) {
            return Err(Error::Shape("masks in a batch differ in size".into()));
        }
        let d = dilate(m, radius);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                data.push(if d.get(y, x) { T::one() } else { T::zero() });
            }
        }
    }
    Ok(Tensor::new(data, &[masks.len(), 1, h - 2, w - 2])?)
}

/// Boundary-aware gradient loss.
///
/// With `M` the hard mask dilated by [`GRAD_DILATION`] pixels, each interior
/// pixel contributes `(1 - M) * e_in + M * e_gt`, where `e_in` / `e_gt` are the
/// channel-mean squared differences between the output's Laplacian and the
/// input's / ground truth's. The result is the mean over pixels.
pub fn loss_grad<T: Float>(output: &Tensor<T>, input: &Tensor<T>, gt: &Tensor<T>, masks: &[HardMask]) -> Result<Tensor<T>> {
    if output.shape() != input.shape() || output.shape() != gt.shape() || masks.len() != output.dim(0) {
        return Err(Error::Shape(format!(
            "gradient loss: output {:?}, input {:?}, gt {:?}, {} masks",
            output.shape(),
            input.shape(),
            gt.shape(),
            masks.len()
        )));
    }
    let lo = laplacian(output)?;
    let li = laplacian(&input.detach())?;
    let lg = laplacian(&gt.detach())?;
    let e_in = lo.sub(&li)?.square().mean_axes(&[1], true)?;
    let e_gt = lo.sub(&lg)?.square().mean_axes(&[1], true)?;
    let m = interior_weights::<T>(masks, GRAD_DILATION)?;
    Ok(e_in.mul(&m.rsub_scalar(T::one()))?.add(&e_gt.mul(&m)?)?.mean())
}

/// The four loss components of one batch.
#[derive(Clone, Debug)]
pub struct LossParts<T: Float> {
    pub rem: Tensor<T>,
    pub soft: Tensor<T>,
    pub per: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Float> LossParts<T> {
    pub fn values(&self) -> [f64; 4] {
        [&self.rem, &self.soft, &self.per, &self.grad].map(|t| t.item().as_f64())
    }
}

/// `λ1 L_rem + λ2 L_soft + λ3 L_per + λ4 L_grad`.
pub fn loss_total<T: Float>(parts: &LossParts<T>, lambda: [f64; 4]) -> Result<Tensor<T>> {
    let terms = [&parts.rem, &parts.soft, &parts.per, &parts.grad];
    let mut total = terms[0].mul_scalar(T::of(lambda[0]));
    for (t, &l) in terms[1..].iter().zip(&lambda[1..]) {
        total = total.add(&t.mul_scalar(T::of(l)))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(
            (0..n).map(|i| (((i as u64 + 1) * (seed * 2 + 7) % 97) as f64) / 97.0).collect(),
            shape,
        )
        .unwrap()
    }

    #[test]
    fn rem_examples() {
        let a = Tensor::<f64>::ones(&[1, 3, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert_eq!(loss_rem(&a, &a).unwrap().item(), 0.0);
        assert_eq!(loss_rem(&a, &b).unwrap().item(), 1.0);
    }

    #[test]
    fn total_with_unit_parts() {
        let one = Tensor::<f64>::scalar(1.0);
        let parts = LossParts {
            rem: one.clone(),
            soft: one.clone(),
            per: one.clone(),
            grad: one,
        };
        assert_eq!(loss_total(&parts, [10.0, 5.0, 1.0, 1.0]).unwrap().item(), 17.0);
        let zero = Tensor::<f64>::scalar(0.0);
        let parts = LossParts {
            rem: zero.clone(),
            soft: zero.clone(),
            per: zero.clone(),
            grad: zero,
        };
        assert_eq!(loss_total(&parts, [10.0, 5.0, 1.0, 1.0]).unwrap().item(), 0.0);
    }

    #[test]
    fn perceptual_zero_on_identical_and_has_gradient_at_zero() {
        let ext = PerceptualExtractor::<f64>::seeded(0);
        let x = img(1, &[1, 3, 16, 16]);
        assert_eq!(loss_per(&x, &x, &ext).unwrap().item(), 0.0);
        let p = Tensor::param(x.to_vec(), x.shape()).unwrap();
        loss_per(&p, &x, &ext).unwrap().backward().unwrap();
        assert!(p.grad().unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn extractor_archive_roundtrip() {
        let ext = PerceptualExtractor::<f32>::seeded(3);
        let back = PerceptualExtractor::<f32>::from_archive(&ext.to_archive().unwrap()).unwrap();
        assert_eq!(back.stages[4].0.data(), ext.stages[4].0.data());
        assert!(PerceptualExtractor::<f32>::from_archive(&Archive::new()).is_err());
    }

    #[test]
    fn grad_loss_term_isolation() {
        let x = img(2, &[1, 3, 8, 8]);
        let y = img(5, &[1, 3, 8, 8]);
        let mut m = HardMask::empty(8, 8);
        m.data[0] = true;
        let masks = [m];
        assert_eq!(loss_grad(&x, &x, &x, &masks).unwrap().item(), 0.0);
        // output == gt: only the outside-mask term against the input remains,
        // and the dilated corner pixel covers the whole 8x8 interior.
        assert_eq!(loss_grad(&x, &y, &x, &masks).unwrap().item(), 0.0);
        let empty = [HardMask::empty(8, 8)];
        assert!(loss_grad(&x, &y, &x, &empty).unwrap().item() > 0.0);
        assert_eq!(loss_grad(&x, &x, &y, &empty).unwrap().item(), 0.0);
    }

    #[test]
    fn laplacian_of_quadratic_is_constant() {
        let d: Vec<f64> = (0..25).map(|i| ((i / 5) * (i / 5) + (i % 5) * (i % 5)) as f64).collect();
        let x = Tensor::new(d, &[1, 1, 5, 5]).unwrap();
        assert!(laplacian(&x).unwrap().data().iter().all(|&v| v == 4.0));
    }
}
