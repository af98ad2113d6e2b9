//! Spatial resampling over the last two axes.

use crate::element::Float;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Source taps along one axis for half-pixel bilinear interpolation.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl<T: Float> Tensor<T> {
    fn planes(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.ndim() < 2 {
            return Err(invalid(op, format!("needs rank >= 2, got {:?}", self.shape())));
        }
        let nd = self.ndim();
        let (h, w) = (self.dim(nd - 2), self.dim(nd - 1));
        Ok((self.numel() / (h * w).max(1), h, w))
    }

    fn with_hw(&self, oh: usize, ow: usize) -> Vec<usize> {
        let mut s = self.shape().to_vec();
        let nd = s.len();
        s[nd - 2] = oh;
        s[nd - 1] = ow;
        s
    }

    /// Nearest-neighbour resize; output pixel `(y, x)` reads input
    /// `(floor(y·h/oh), floor(x·w/ow))`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let (planes, h, w) = self.planes("resize_nearest")?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(invalid("resize_nearest", "extents must be positive"));
        }
        let ys: Vec<usize> = (0..oh).map(|y| y * h / oh).collect();
        let xs: Vec<usize> = (0..ow).map(|x| x * w / ow).collect();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in self.data().chunks(h * w) {
            for &y in &ys {
                out.extend(xs.iter().map(|&x| p[y * w + x]));
            }
        }
        Ok(Tensor::from_op(
            "resize_nearest",
            out,
            self.with_hw(oh, ow),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); planes * h * w];
                for (pi, gp) in g.chunks(oh * ow).enumerate() {
                    let dst = &mut gx[pi * h * w..(pi + 1) * h * w];
                    for (oy, &y) in ys.iter().enumerate() {
                        for (ox, &x) in xs.iter().enumerate() {
                            dst[y * w + x] += gp[oy * ow + ox];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let (planes, h, w) = self.planes("resize_bilinear")?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(invalid("resize_bilinear", "extents must be positive"));
        }
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in self.data().chunks(h * w) {
            for &(y0, y1, wy) in &ty {
                let wy = T::of(wy);
                for &(x0, x1, wx) in &tx {
                    let wx = T::of(wx);
                    let top = p[y0 * w + x0] * (T::one() - wx) + p[y0 * w + x1] * wx;
                    let bot = p[y1 * w + x0] * (T::one() - wx) + p[y1 * w + x1] * wx;
                    out.push(top * (T::one() - wy) + bot * wy);
                }
            }
        }
        Ok(Tensor::from_op(
            "resize_bilinear",
            out,
            self.with_hw(oh, ow),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); planes * h * w];
                for (pi, gp) in g.chunks(oh * ow).enumerate() {
                    let dst = &mut gx[pi * h * w..(pi + 1) * h * w];
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        let wy = T::of(wy);
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let wx = T::of(wx);
                            let gv = gp[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (T::one() - wy) * (T::one() - wx);
                            dst[y0 * w + x1] += gv * (T::one() - wy) * wx;
                            dst[y1 * w + x0] += gv * wy * (T::one() - wx);
                            dst[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        let (_, h, w) = self.planes("upsample_nearest2x")?;
        self.resize_nearest(2 * h, 2 * w)
    }

    pub fn upsample_bilinear2x(&self) -> Result<Tensor<T>> {
        let (_, h, w) = self.planes("upsample_bilinear2x")?;
        self.resize_bilinear(2 * h, 2 * w)
    }

    /// 2x downsampling by averaging each non-overlapping 2x2 block.
    pub fn downsample2x(&self) -> Result<Tensor<T>> {
        let (planes, h, w) = self.planes("downsample2x")?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(invalid("downsample2x", format!("spatial extent {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in self.data().chunks(h * w) {
            for y in 0..oh {
                for x in 0..ow {
                    let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                    out.push((p[r0 + 2 * x] + p[r0 + 2 * x + 1] + p[r1 + 2 * x] + p[r1 + 2 * x + 1]) * quarter);
                }
            }
        }
        Ok(Tensor::from_op(
            "downsample2x",
            out,
            self.with_hw(oh, ow),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); planes * h * w];
                for (pi, gp) in g.chunks(oh * ow).enumerate() {
                    let dst = &mut gx[pi * h * w..(pi + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            let v = gp[y * ow + x] * quarter;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dst[(2 * y + dy) * w + 2 * x + dx] = v;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
