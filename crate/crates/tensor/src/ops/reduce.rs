//! Sums, means and variances.

use crate::element::Float;
use crate::error::{invalid, Result};
use crate::ops::shape::{contiguous_strides, gather_strided, scatter_add_strided};
use crate::tensor::Tensor;

impl<T: Float> Tensor<T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().mul_scalar(T::one() / T::of(self.numel() as f64))
    }

    fn reduced_layout(&self, op: &'static str, axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut keep = self.shape().to_vec();
        for &a in axes {
            if a >= self.ndim() {
                return Err(invalid(op, format!("axis {a} out of range for rank {}", self.ndim())));
            }
            keep[a] = 1;
        }
        let out_strides = contiguous_strides(&keep);
        let strides = keep
            .iter()
            .zip(out_strides)
            .zip(self.shape())
            .map(|((&k, s), &orig)| if k == 1 && orig != 1 { 0 } else { s })
            .collect();
        Ok((keep, strides))
    }

    /// Sum over `axes`; reduced axes are kept with extent 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let (kept, strides) = self.reduced_layout("sum_axes", axes)?;
        let out_len = kept.iter().product();
        let data = scatter_add_strided(self.data(), self.shape(), &strides, out_len);
        let in_shape = self.shape().to_vec();
        let out_shape = if keepdim {
            kept
        } else {
            kept.iter()
                .enumerate()
                .filter(|(d, _)| !axes.contains(d))
                .map(|(_, &s)| s)
                .collect()
        };
        Ok(Tensor::from_op(
            "sum_axes",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(gather_strided(g, &in_shape, &strides))]),
        ))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        Ok(self
            .sum_axes(axes, keepdim)?
            .mul_scalar(T::one() / T::of(count.max(1) as f64)))
    }

    /// Population variance over `axes`.
    pub fn var_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let mu = self.mean_axes(axes, true)?.expand(self.shape())?;
        self.sub(&mu)?.square().mean_axes(axes, keepdim)
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn sum_axes_keepdim_and_squeeze() {
        let t = Tensor::<f64>::new((0..6).map(|v| v as f64).collect(), &[2, 3]).unwrap();
        let rows = t.sum_axes(&[1], true).unwrap();
        assert_eq!(rows.shape(), &[2, 1]);
        assert_eq!(rows.data(), &[3.0, 12.0]);
        let cols = t.sum_axes(&[0], false).unwrap();
        assert_eq!(cols.shape(), &[3]);
        assert_eq!(cols.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn variance_of_known_values() {
        let t = Tensor::<f64>::new(vec![1.0, 3.0, 1.0, 3.0], &[1, 4]).unwrap();
        let v = t.var_axes(&[1], false).unwrap();
        assert_eq!(v.data(), &[1.0]);
    }

    #[test]
    fn mean_gradient() {
        let x = Tensor::<f64>::param(vec![1.0; 4], &[4]).unwrap();
        x.mean().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }
}
