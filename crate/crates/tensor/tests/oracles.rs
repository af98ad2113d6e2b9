use cnsnet_tensor::{init, Tensor};
use proptest::prelude::*;

/// Direct quadruple loop in f64; returns the output and Σ|x·w| per output
/// element (the scale of the rounding error of any summation order).
fn naive_conv(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    let mut mag = vec![0.0; n * co * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    let mut m = bias[o].abs();
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k[((o * c + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                                m += (xv * kv).abs();
                            }
                        }
                    }
                    let i = ((s * co + o) * oh + oy) * ow + ox;
                    out[i] = acc;
                    mag[i] = m;
                }
            }
        }
    }
    (out, mag, oh, ow)
}

#[test]
fn conv2d_matches_loop_oracle_on_spec_shapes() {
    let mut rng = init::seeded_rng(11);
    let x: Vec<f32> = init::uniform(&mut rng, 2 * 5 * 5, 1.0);
    let k: Vec<f32> = init::uniform(&mut rng, 3 * 2 * 3 * 3, 1.0);
    let xt = Tensor::new(x.clone(), &[1, 2, 5, 5]).unwrap();
    let kt = Tensor::new(k.clone(), &[3, 2, 3, 3]).unwrap();
    let y = xt.conv2d(&kt, None, 1, 1).unwrap();
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let kd: Vec<f64> = k.iter().map(|&v| v as f64).collect();
    let (want, _, oh, ow) = naive_conv(&xd, (1, 2, 5, 5), &kd, (3, 3, 3), &[0.0; 3], 1, 1);
    assert_eq!(y.shape(), &[1, 3, oh, ow]);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_loop_oracle(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, co in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut rng = init::seeded_rng(seed);
        let x: Vec<f32> = init::uniform(&mut rng, n * c * h * w, 10.0);
        let kv: Vec<f32> = init::uniform(&mut rng, co * c * k * k, 10.0);
        let b: Vec<f32> = init::uniform(&mut rng, co, 10.0);
        let y = Tensor::new(x.clone(), &[n, c, h, w]).unwrap()
            .conv2d(&Tensor::new(kv.clone(), &[co, c, k, k]).unwrap(), Some(&Tensor::new(b.clone(), &[co]).unwrap()), stride, pad)
            .unwrap();
        let f = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
        let (want, mag, _, _) = naive_conv(&f(&x), (n, c, h, w), &f(&kv), (co, k, k), &f(&b), stride, pad);
        for ((a, b), m) in y.data().iter().zip(&want).zip(&mag) {
            // 1e-6 relative to the magnitude of the summed terms.
            prop_assert!((*a as f64 - b).abs() <= 1e-6 * m.max(1.0), "{} vs {} (scale {})", a, b, m);
        }
    }

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..30.0) {
        let mut rng = init::seeded_rng(seed);
        let t = Tensor::<f64>::new(init::uniform(&mut rng, rows * cols, scale), &[rows, cols]).unwrap();
        let s = t.softmax(1).unwrap();
        for r in s.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(r.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn reshape_roundtrip_is_identity(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let mut rng = init::seeded_rng(seed);
        let t = Tensor::<f32>::new(init::uniform(&mut rng, a * b * c, 1.0), &[a, b, c]).unwrap();
        let back = t.reshape(&[c * b, a]).unwrap().reshape(&[a, b, c]).unwrap();
        prop_assert_eq!(back.data(), t.data());
        prop_assert_eq!(back.shape(), t.shape());
    }
}
