//! Pointwise arithmetic and activations.

use crate::element::Float;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

impl<T: Float> Tensor<T> {
    fn check_same(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Unary map with derivative `dy/dx = deriv(x, y)`.
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        deriv: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            name,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, out, p| {
                let x = p[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .zip(out)
                        .map(|((&g, &x), &y)| g * deriv(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = p[0]
                    .requires_grad()
                    .then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect());
                let gb = p[1]
                    .requires_grad()
                    .then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same(other, "div")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a / b).collect();
        Tensor::from_op(
            "div",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, out, p| {
                let b = p[1].data();
                let ga = p[0]
                    .requires_grad()
                    .then(|| g.iter().zip(b).map(|(&g, &b)| g / b).collect());
                let gb = p[1].requires_grad().then(|| {
                    g.iter()
                        .zip(out)
                        .zip(b)
                        .map(|((&g, &y), &b)| -g * y / b)
                        .collect()
                });
                vec![ga, gb]
            }),
        )
        .ensure_finite("div")
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary("add_scalar", |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.unary("mul_scalar", |x| x * s, move |_, _| s)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    /// `s - self`.
    pub fn rsub_scalar(&self, s: T) -> Tensor<T> {
        self.unary("rsub_scalar", |x| s - x, |_, _| -T::one())
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary("abs", |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|&x| x < T::zero()) {
            return Err(TensorError::NonFinite("sqrt"));
        }
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::of(0.5) / y)
            .ensure_finite("sqrt")
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary("exp", |x| x.exp(), |_, y| y).ensure_finite("exp")
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            "sigmoid",
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f32>::param(vec![0.5; 4], &[2, 2]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[3, 2]);
        assert!(a.add(&b).is_err());
        assert!(a.mul(&b).is_err());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let a = Tensor::<f32>::ones(&[2]);
        let b = Tensor::<f32>::zeros(&[2]);
        assert!(a.div(&b).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::<f32>::new(vec![-200.0, 0.0, 200.0], &[3]).unwrap();
        let y = x.sigmoid();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn leaky_relu_slope() {
        let x = Tensor::<f64>::new(vec![-1.0, 2.0], &[2]).unwrap();
        assert_eq!(x.leaky_relu(0.2).data(), &[-0.2, 2.0]);
    }
}
