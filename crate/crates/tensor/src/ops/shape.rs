//! Layout operations: reshape, permute, expand, concat, narrow.

use crate::element::Float;
use crate::error::{invalid, Result, TensorError};
use crate::tensor::{numel_of, Tensor};

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Visits every element of `shape` in row-major order, passing the linear
/// index and the offset under `strides`.
pub(crate) fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel_of(shape);
    if n == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let nd = shape.len();
    let (inner_len, inner_stride) = (shape[nd - 1], strides[nd - 1]);
    let outer = n / inner_len;
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    let mut lin = 0usize;
    for _ in 0..outer {
        for j in 0..inner_len {
            f(lin, base + j * inner_stride);
            lin += 1;
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn gather_strided<T: Float>(src: &[T], shape: &[usize], strides: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(numel_of(shape));
    for_each_offset(shape, strides, |_, off| out.push(src[off]));
    out
}

pub(crate) fn scatter_add_strided<T: Float>(
    src: &[T],
    shape: &[usize],
    strides: &[usize],
    out_len: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); out_len];
    for_each_offset(shape, strides, |lin, off| out[off] += src[lin]);
    out
}

fn check_axis(op: &'static str, axis: usize, ndim: usize) -> Result<()> {
    if axis >= ndim {
        return Err(invalid(op, format!("axis {axis} out of range for rank {ndim}")));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {nd}")));
        }
        let in_strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = gather_strided(self.data(), &out_shape, &src_strides);
        let n = self.numel();
        let shape_for_back = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(scatter_add_strided(g, &shape_for_back, &src_strides, n))]),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        check_axis("transpose", a.max(b), self.ndim())?;
        let mut perm: Vec<usize> = (0..self.ndim()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Replicates size-1 axes up to `shape` (same rank required).
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.len() != self.ndim()
            || self
                .shape()
                .iter()
                .zip(shape)
                .any(|(&s, &t)| s != t && s != 1)
        {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let base = contiguous_strides(self.shape());
        let strides: Vec<usize> = self
            .shape()
            .iter()
            .zip(&base)
            .zip(shape)
            .map(|((&s, &st), &t)| if s == 1 && t != 1 { 0 } else { st })
            .collect();
        let data = gather_strided(self.data(), shape, &strides);
        let n = self.numel();
        let out_shape = shape.to_vec();
        Ok(Tensor::from_op(
            "expand",
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(scatter_add_strided(g, &out_shape, &strides, n))]),
        ))
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        check_axis("concat", axis, first.ndim())?;
        for p in parts {
            let compatible = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total_chunk: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * total_chunk);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                data.extend_from_slice(&p.data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            "concat",
            data,
            shape,
            parts.to_vec(),
            Box::new(move |g, _, p| {
                let mut grads: Vec<Option<Vec<T>>> = p
                    .iter()
                    .map(|t| t.requires_grad().then(|| Vec::with_capacity(t.numel())))
                    .collect();
                for o in 0..outer {
                    let mut start = o * total_chunk;
                    for (gv, &c) in grads.iter_mut().zip(&chunks) {
                        if let Some(gv) = gv {
                            gv.extend_from_slice(&g[start..start + c]);
                        }
                        start += c;
                    }
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis("narrow", axis, self.ndim())?;
        if start + len > self.shape()[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {}", start + len, self.shape()[axis]),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let src_chunk = self.shape()[axis] * inner;
        let (off, chunk) = (start * inner, len * inner);
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let b = o * src_chunk + off;
            data.extend_from_slice(&self.data()[b..b + chunk]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut out = vec![T::zero(); n];
                for o in 0..outer {
                    let b = o * src_chunk + off;
                    out[b..b + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        check_axis("split", axis, self.ndim())?;
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(invalid(
                "split",
                format!("sizes {sizes:?} do not cover extent {}", self.shape()[axis]),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.narrow(axis, start, s);
                start += s;
                t
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    fn seq(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|v| v as f64).collect(), shape).unwrap()
    }

    #[test]
    fn transpose_2d() {
        let t = seq(&[2, 3]).transpose(0, 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn expand_and_its_gradient() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2, 1]).unwrap();
        let y = x.expand(&[2, 3]).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
        assert!(x.expand(&[3, 3]).is_err());
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = seq(&[2, 2, 3]);
        let b = seq(&[2, 1, 3]).mul_scalar(10.0);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        let parts = c.split(1, &[2, 1]).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn permute_rejects_non_permutations() {
        assert!(seq(&[2, 3, 4]).permute(&[0, 0, 1]).is_err());
        assert!(seq(&[2, 3, 4]).permute(&[0, 1]).is_err());
    }

    #[test]
    fn narrow_bounds() {
        let t = seq(&[4, 2]);
        assert_eq!(t.narrow(0, 1, 2).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(t.narrow(0, 3, 2).is_err());
    }
}
