use cnsnet_tensor::{Float, Tensor};

use crate::error::{Error, Result};
use crate::nn::{lrelu, Conv2d, Init, VarStore};

/// Two 3x3 convolutions, each followed by a leaky ReLU.
#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new<T: Float>(init: &mut Init<T>, name: &str, cin: usize, cout: usize) -> Self {
        let mut p = init.sub(name);
        DoubleConv {
            a: Conv2d::new(&mut p, "conv1", cin, cout, 3),
            b: Conv2d::new(&mut p, "conv2", cout, cout, 3),
        }
    }

    fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(lrelu(&self.b.forward(vs, &lrelu(&self.a.forward(vs, x)?))?))
    }
}

/// Small UNet mapping RGB + hard mask to a soft shadow mask in `[0, 1]`.
///
/// Widths are `base * 2^i` for `i = 0..=depth`; each decoder level upsamples
/// bilinearly, concatenates the matching encoder features and applies a
/// double convolution. A 3x3 head with sigmoid gives the single-channel mask.
#[derive(Clone, Debug)]
pub struct SoftMaskPredictor {
    pub depth: usize,
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<DoubleConv>,
    head: Conv2d,
}

impl SoftMaskPredictor {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, base: usize, depth: usize) -> Self {
        let mut p = init.sub(name);
        let widths: Vec<usize> = (0..=depth).map(|i| base << i).collect();
        let mut cin = 4;
        let mut down = Vec::new();
        for (i, &w) in widths[..depth].iter().enumerate() {
            down.push(DoubleConv::new(&mut p, &format!("down{i}"), cin, w));
            cin = w;
        }
        let bottom = DoubleConv::new(&mut p, "bottom", cin, widths[depth]);
        let mut up = Vec::new();
        for i in (0..depth).rev() {
            up.push(DoubleConv::new(&mut p, &format!("up{i}"), widths[i + 1] + widths[i], widths[i]));
        }
        let head = Conv2d::new(&mut p, "head", widths[0], 1, 3);
        SoftMaskPredictor {
            depth,
            down,
            bottom,
            up,
            head,
        }
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// `rgb` is `[N, 3, H, W]`, `hard` is `[N, 1, H, W]` with 0/1 values;
    /// returns `[N, 1, H, W]`.
    pub fn forward<T: Float>(&self, vs: &VarStore<T>, rgb: &Tensor<T>, hard: &Tensor<T>) -> Result<Tensor<T>> {
        let m = 1usize << self.depth;
        if rgb.ndim() != 4 || !rgb.dim(2).is_multiple_of(m) || !rgb.dim(3).is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "mask predictor input {:?} must have H and W divisible by {m}",
                rgb.shape()
            )));
        }
        let mut x = Tensor::concat(&[rgb.clone(), hard.clone()], 1)?;
        let mut skips = Vec::with_capacity(self.depth);
        for level in &self.down {
            let f = level.forward(vs, &x)?;
            x = f.downsample2x()?;
            skips.push(f);
        }
        x = self.bottom.forward(vs, &x)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            x = level.forward(vs, &Tensor::concat(&[x.upsample_bilinear2x()?, skip], 1)?)?;
        }
        Ok(self.head.forward(vs, &x)?.sigmoid())
    }
}
