//! Finite-difference checks for every differentiable operation.

use cnsnet_tensor::gradcheck::{check_gradients, GradCheckOptions};
use cnsnet_tensor::{init, Result, Tensor};

const TOL: f64 = 1e-3;

fn rand_t(seed: u64, shape: &[usize], bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(init::uniform(&mut init::seeded_rng(seed), n, bound), shape).unwrap()
}

fn positive(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rand_t(seed, shape, 1.0).abs().add_scalar(0.5)
}

/// Projects onto a fixed random direction so every output element matters.
fn project(y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let w = rand_t(999, y.shape(), 1.0);
    Ok(y.mul(&w)?.sum())
}

fn check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>) {
    for seed in 0..3 {
        let r = check_gradients(&f, inputs, GradCheckOptions { seed, ..Default::default() }).unwrap();
        assert!(r.passes(TOL), "{name}: {r:?}");
    }
}

#[test]
fn arithmetic() {
    let (a, b) = (rand_t(1, &[3, 4], 2.0), positive(2, &[3, 4]));
    check("add", &[a.clone(), b.clone()], |t| project(&t[0].add(&t[1])?));
    check("sub", &[a.clone(), b.clone()], |t| project(&t[0].sub(&t[1])?));
    check("mul", &[a.clone(), b.clone()], |t| project(&t[0].mul(&t[1])?));
    check("div", &[a.clone(), b.clone()], |t| project(&t[0].div(&t[1])?));
    check("scalar", std::slice::from_ref(&a), |t| project(&t[0].mul_scalar(-1.7).add_scalar(0.3).rsub_scalar(2.0)));
    check("square", std::slice::from_ref(&a), |t| project(&t[0].square()));
    check("sqrt", std::slice::from_ref(&b), |t| project(&t[0].sqrt()?));
    check("exp", std::slice::from_ref(&a), |t| project(&t[0].exp()?));
    check("abs", &[a], |t| project(&t[0].abs()));
}

#[test]
fn activations() {
    let a = rand_t(3, &[2, 5], 3.0);
    check("leaky_relu", std::slice::from_ref(&a), |t| project(&t[0].leaky_relu(0.2)));
    check("sigmoid", &[a], |t| project(&t[0].sigmoid()));
}

#[test]
fn linear_algebra() {
    let (a, b) = (rand_t(4, &[3, 5], 1.0), rand_t(5, &[5, 2], 1.0));
    check("matmul", &[a.clone(), b], |t| project(&t[0].matmul(&t[1])?));
    check("softmax last", std::slice::from_ref(&a), |t| project(&t[0].softmax(1)?));
    check("softmax first", &[a], |t| project(&t[0].softmax(0)?));
}

#[test]
fn layout() {
    let a = rand_t(6, &[2, 3, 4], 1.0);
    let b = rand_t(7, &[2, 1, 4], 1.0);
    check("reshape", std::slice::from_ref(&a), |t| project(&t[0].reshape(&[6, 4])?));
    check("permute", std::slice::from_ref(&a), |t| project(&t[0].permute(&[2, 0, 1])?));
    check("transpose", std::slice::from_ref(&a), |t| project(&t[0].transpose(0, 2)?));
    check("expand", std::slice::from_ref(&b), |t| project(&t[0].expand(&[2, 3, 4])?));
    check("concat", &[a.clone(), b], |t| project(&Tensor::concat(&[t[0].clone(), t[1].clone()], 1)?));
    check("narrow", std::slice::from_ref(&a), |t| project(&t[0].narrow(2, 1, 2)?));
    check("split", std::slice::from_ref(&a), |t| {
        let p = t[0].split(1, &[1, 2])?;
        project(&p[0])?.add(&project(&p[1].square())?)
    });
    let mask: Vec<bool> = (0..24).map(|i| i % 3 != 1).collect();
    let m2 = mask.clone();
    check("masked_select", std::slice::from_ref(&a), move |t| project(&t[0].masked_select(&mask)?));
    check("masked_fill", &[a], move |t| project(&t[0].masked_fill(&m2, 0.5)?));
}

#[test]
fn reductions() {
    let a = rand_t(8, &[2, 3, 4], 1.0);
    check("sum", std::slice::from_ref(&a), |t| Ok(t[0].square().sum()));
    check("mean", std::slice::from_ref(&a), |t| Ok(t[0].square().mean()));
    check("sum_axes", std::slice::from_ref(&a), |t| project(&t[0].sum_axes(&[0, 2], true)?));
    check("mean_axes", std::slice::from_ref(&a), |t| project(&t[0].mean_axes(&[1], false)?));
    check("var_axes", &[a], |t| project(&t[0].var_axes(&[1, 2], false)?));
}

#[test]
fn spatial() {
    let x = rand_t(9, &[2, 3, 6, 4], 1.0);
    let w = rand_t(10, &[4, 3, 3, 3], 0.5);
    let b = rand_t(11, &[4], 0.5);
    check("conv2d pad1", &[x.clone(), w.clone(), b.clone()], |t| project(&t[0].conv2d(&t[1], Some(&t[2]), 1, 1)?));
    check("conv2d stride2", &[x.clone(), w], |t| project(&t[0].conv2d(&t[1], None, 2, 1)?));
    let pw = rand_t(12, &[2, 3, 1, 1], 0.5);
    check("conv2d 1x1", &[x.clone(), pw], |t| project(&t[0].conv2d(&t[1], None, 1, 0)?));
    check("upsample nearest", std::slice::from_ref(&x), |t| project(&t[0].upsample_nearest2x()?));
    check("upsample bilinear", std::slice::from_ref(&x), |t| project(&t[0].upsample_bilinear2x()?));
    check("resize bilinear", std::slice::from_ref(&x), |t| project(&t[0].resize_bilinear(4, 7)?));
    check("resize nearest", std::slice::from_ref(&x), |t| project(&t[0].resize_nearest(3, 5)?));
    check("downsample", std::slice::from_ref(&x), |t| project(&t[0].downsample2x()?));
    let (s, sh) = (rand_t(13, &[3], 1.0), rand_t(14, &[3], 1.0));
    check("channel_affine", &[x, s, sh], |t| project(&t[0].channel_affine(&t[1], &t[2])?));
}
