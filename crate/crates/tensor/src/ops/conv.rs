//! 2-D convolution (cross-correlation) via im2col + GEMM, and per-channel affine.

use crate::element::Float;
use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.l();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * l..][..l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let l = g.l();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * l..][..l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Tensor<T> {
    /// Cross-correlation of `[N, C, H, W]` with `[Co, C, kh, kw]` plus optional
    /// bias `[Co]`, zero padding on every side.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        if self.ndim() != 4 || weight.ndim() != 4 || self.dim(1) != weight.dim(1) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (co, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![co],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (k, l) = (geom.k(), geom.l());
        let in_sz = c * h * w;
        let mut out = vec![T::zero(); n * co * l];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
        for s in 0..n {
            let xs = &self.data()[s * in_sz..(s + 1) * in_sz];
            let src: &[T] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, &geom, &mut cols);
                &cols
            };
            let dst = &mut out[s * co * l..(s + 1) * co * l];
            if let Some(b) = bias {
                for (o, row) in dst.chunks_mut(l).enumerate() {
                    row.fill(b.data()[o]);
                }
            }
            T::gemm(co, k, l, T::one(), weight.data(), (k as isize, 1), src, (l as isize, 1), T::one(), dst, (l as isize, 1));
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "conv2d",
            out,
            vec![n, co, geom.oh, geom.ow],
            parents,
            Box::new(move |g, _, p| {
                let (x, wt) = (&p[0], &p[1]);
                let need_x = x.requires_grad();
                let need_w = wt.requires_grad();
                let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
                let mut gw = need_w.then(|| vec![T::zero(); wt.numel()]);
                let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { k * l }];
                let mut gcols = vec![T::zero(); if need_x && !geom.is_pointwise() { k * l } else { 0 }];
                for s in 0..n {
                    let gs = &g[s * co * l..(s + 1) * co * l];
                    if let Some(gw) = gw.as_mut() {
                        let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
                        let src: &[T] = if geom.is_pointwise() {
                            xs
                        } else {
                            im2col(xs, &geom, &mut cols);
                            &cols
                        };
                        // dW += G · colsᵀ
                        T::gemm(co, l, k, T::one(), gs, (l as isize, 1), src, (1, l as isize), T::one(), gw, (k as isize, 1));
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxs = &mut gx[s * in_sz..(s + 1) * in_sz];
                        // dcols = Wᵀ · G
                        if geom.is_pointwise() {
                            T::gemm(k, co, l, T::one(), wt.data(), (1, k as isize), gs, (l as isize, 1), T::zero(), gxs, (l as isize, 1));
                        } else {
                            T::gemm(k, co, l, T::one(), wt.data(), (1, k as isize), gs, (l as isize, 1), T::zero(), &mut gcols, (l as isize, 1));
                            col2im(&gcols, &geom, gxs);
                        }
                    }
                }
                let gb = p.get(2).filter(|b| b.requires_grad()).map(|_| {
                    let mut gb = vec![T::zero(); co];
                    for s in 0..n {
                        for (o, row) in g[s * co * l..(s + 1) * co * l].chunks(l).enumerate() {
                            gb[o] += row.iter().copied().sum::<T>();
                        }
                    }
                    gb
                });
                let mut grads = vec![gx, gw];
                if p.len() == 3 {
                    grads.push(gb);
                }
                grads
            }),
        ))
    }

    /// `y[n, c, ...] = x[n, c, ...] * scale[c] + shift[c]` for rank ≥ 2 input.
    pub fn channel_affine(&self, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ndim() < 2 || scale.shape() != [self.dim(1)] || shift.shape() != [self.dim(1)] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_affine",
                lhs: self.shape().to_vec(),
                rhs: scale.shape().to_vec(),
            });
        }
        let (n, c) = (self.dim(0), self.dim(1));
        let inner = self.numel() / (n * c).max(1);
        let mut out = Vec::with_capacity(self.numel());
        for (i, chunk) in self.data().chunks(inner.max(1)).enumerate() {
            let ch = i % c;
            let (a, b) = (scale.data()[ch], shift.data()[ch]);
            out.extend(chunk.iter().map(|&x| x * a + b));
        }
        Ok(Tensor::from_op(
            "channel_affine",
            out,
            self.shape().to_vec(),
            vec![self.clone(), scale.clone(), shift.clone()],
            Box::new(move |g, _, p| {
                let (x, a) = (p[0].data(), p[1].data());
                let mut gx = vec![T::zero(); x.len()];
                let mut ga = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for (i, (gc, xc)) in g.chunks(inner).zip(x.chunks(inner)).enumerate() {
                    let ch = i % c;
                    for (j, (&gv, &xv)) in gc.iter().zip(xc).enumerate() {
                        gx[i * inner + j] = gv * a[ch];
                        ga[ch] += gv * xv;
                        gb[ch] += gv;
                    }
                }
                vec![Some(gx), Some(ga), Some(gb)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn ones_kernel_over_ones() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::<f32>::new((0..18).map(|v| v as f32).collect(), &[2, 1, 3, 3]).unwrap();
        let k = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        assert_eq!(x.conv2d(&k, None, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn stride_and_padding_extent() {
        let x = Tensor::<f32>::zeros(&[1, 2, 8, 6]);
        let k = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        assert_eq!(x.conv2d(&k, None, 2, 1).unwrap().shape(), &[1, 4, 4, 3]);
    }

    #[test]
    fn descriptive_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(x.conv2d(&Tensor::zeros(&[1, 3, 1, 1]), None, 1, 0).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[1, 2, 5, 5]), None, 1, 0).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[1, 2, 1, 1]), None, 0, 0).is_err());
        let err = x.conv2d(&Tensor::zeros(&[1, 2, 5, 5]), None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("does not fit"));
    }

    #[test]
    fn channel_affine_values() {
        let x = Tensor::<f64>::ones(&[1, 2, 1, 2]);
        let a = Tensor::new(vec![2.0, 3.0], &[2]).unwrap();
        let b = Tensor::new(vec![0.5, -1.0], &[2]).unwrap();
        assert_eq!(x.channel_affine(&a, &b).unwrap().data(), &[2.5, 2.5, 2.0, 2.0]);
    }
}
