//! Central finite-difference gradient checking in double precision.

use rand::seq::index::sample;

use crate::error::Result;
use crate::init::seeded_rng;
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// `(input, flat index, autodiff, finite difference)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Coordinates whose step straddled a kink and were re-differenced with a
    /// step 100 times smaller.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// At most this many coordinates per input are perturbed (all when smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            max_coords: 24,
            seed: 0,
        }
    }
}

/// Compares autodiff gradients of the scalar `f(inputs)` against central
/// differences.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`
/// where `floor` is `1e-3` times the largest gradient magnitude seen, so
/// coordinates with vanishing gradient are judged on the overall scale.
///
/// When the forward and backward one-sided differences of a coordinate
/// disagree by more than 1%, the step crosses a point where `f` is not
/// differentiable (a ReLU kink, say). That coordinate is re-differenced with
/// `step / 100` and counted in [`GradCheckReport::kinks`].
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    f(&leaves)?.backward()?;
    let f0 = {
        let _g = no_grad();
        f(inputs)?.item()
    };

    let mut rng = seeded_rng(opts.seed);
    let mut pairs = Vec::new();
    let mut kinks = 0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let numeric = {
                let _g = no_grad();
                let eval = |delta: f64| -> Result<f64> {
                    let perturbed: Vec<Tensor<f64>> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut d = t.to_vec();
                            if j == i {
                                d[idx] += delta;
                            }
                            Tensor::new(d, t.shape())
                        })
                        .collect::<Result<_>>()?;
                    Ok(f(&perturbed)?.item())
                };
                let h = opts.step;
                let (up, down) = (eval(h)?, eval(-h)?);
                let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
                if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-10 {
                    kinks += 1;
                    let h = h / 100.0;
                    (eval(h)? - eval(-h)?) / (2.0 * h)
                } else {
                    (up - down) / (2.0 * h)
                }
            };
            pairs.push((i, idx, analytic[idx], numeric));
        }
    }

    let scale = pairs
        .iter()
        .map(|&(_, _, a, n)| a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: pairs.len(),
        worst: None,
        kinks,
    };
    for (i, idx, a, n) in pairs {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = Some((i, idx, a, n));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_gradient_checks_out() {
        let x = Tensor::new(vec![0.3, -1.2, 2.0], &[3]).unwrap();
        let y = Tensor::new(vec![1.5, 0.7, -0.4], &[3]).unwrap();
        let r = check_gradients(|t| Ok(t[0].mul(&t[1])?.square().sum()), &[x, y], GradCheckOptions::default()).unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn wrong_backward_is_detected() {
        let x = Tensor::new(vec![0.5, 1.5], &[2]).unwrap();
        let r = check_gradients(
            |t| {
                let p = &t[0];
                let y = Tensor::from_op(
                    "bad_square",
                    p.data().iter().map(|v| v * v).collect(),
                    p.shape().to_vec(),
                    vec![p.clone()],
                    Box::new(|g, _, p| vec![Some(g.iter().zip(p[0].data()).map(|(g, x)| g * x).collect())]),
                );
                Ok(y.sum())
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passes(1e-3));
    }

    #[test]
    fn kinks_are_redifferenced() {
        // |x| at 2e-5: a step of 1e-4 crosses the kink at zero.
        let x = Tensor::new(vec![2e-5, 0.7], &[2]).unwrap();
        let r = check_gradients(|t| Ok(t[0].abs().sum()), &[x], GradCheckOptions::default()).unwrap();
        assert_eq!(r.kinks, 1);
        assert!(r.passes(1e-6), "{r:?}");
    }
}
