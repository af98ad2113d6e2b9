//! Masked attention against hand-computed values.

use cnsnet_core::nn::{Init, VarStore};
use cnsnet_core::saat::{add_positional, masked_attention, MaskedAttention};
use cnsnet_tensor::init::seeded_rng;
use cnsnet_tensor::Tensor;

fn fixture(channels: usize, heads: usize) -> (VarStore<f64>, MaskedAttention) {
    let mut vs = VarStore::new();
    let mut rng = seeded_rng(3);
    let attn = MaskedAttention::new(&mut Init::new(&mut vs, &mut rng), "attn", channels, heads);
    (vs, attn)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

// Row vector times a row-major [c, c] matrix.
fn vecmat(x: &[f64], w: &[f64], c: usize) -> Vec<f64> {
    (0..c).map(|j| (0..c).map(|i| x[i] * w[i * c + j]).sum()).collect()
}

#[test]
fn two_token_attention_matches_hand_computation() {
    let c = 2;
    let (mut vs, attn) = fixture(c, 1);
    let wq = vec![1.0, 0.5, -0.5, 2.0];
    let wk = vec![0.3, -1.0, 1.5, 0.2];
    let wv = vec![2.0, 0.0, 1.0, -1.0];
    let wp = vec![1.0, 0.0, 0.0, 1.0];
    let bp = vec![0.1, -0.2];
    vs.set(attn.wq.weight, wq.clone());
    vs.set(attn.wk.weight, wk.clone());
    vs.set(attn.wv.weight, wv.clone());
    vs.set(attn.proj.weight, wp);
    vs.set(attn.proj.bias.unwrap(), bp.clone());

    let x = [[0.4, -1.2], [1.0, 0.7]];
    let m = [0.25, 0.9];
    let xt = Tensor::new(vec![0.4, -1.2, 1.0, 0.7], &[2, 2]).unwrap();
    let mt = Tensor::new(m.to_vec(), &[2, 1]).unwrap();
    let got = masked_attention(&vs, &attn, &xt, &mt).unwrap();

    let q: Vec<Vec<f64>> = x.iter().map(|r| vecmat(r, &wq, c)).collect();
    let k: Vec<Vec<f64>> = x
        .iter()
        .zip(m)
        .map(|(r, mi)| vecmat(&[r[0] * mi, r[1] * mi], &wk, c))
        .collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| vecmat(r, &wv, c)).collect();
    let scale = 1.0 / (c as f64).sqrt();
    for i in 0..2 {
        let logits: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale).collect();
        let a = softmax(&logits);
        for ch in 0..c {
            let want = a[0] * v[0][ch] + a[1] * v[1][ch] + bp[ch];
            assert!((got.data()[i * c + ch] - want).abs() < 1e-12, "token {i} channel {ch}");
        }
    }
}

#[test]
fn all_ones_mask_equals_plain_attention() {
    let (vs, attn) = fixture(8, 4);
    let mut rng = seeded_rng(4);
    let x = cnsnet_core::selftest::random_tensor::<f64>(&mut rng, &[5, 8], -1.0, 1.0);
    let masked = masked_attention(&vs, &attn, &x, &Tensor::ones(&[5, 1])).unwrap();
    let plain = attn.forward(&vs, &x, None).unwrap();
    for (a, b) in masked.data().iter().zip(plain.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn logits_are_linear_in_the_mask() {
    let (vs, attn) = fixture(4, 2);
    let mut rng = seeded_rng(5);
    let x = cnsnet_core::selftest::random_tensor::<f64>(&mut rng, &[6, 4], -1.0, 1.0);
    let m = cnsnet_core::selftest::random_tensor::<f64>(&mut rng, &[6, 1], 0.0, 1.0);
    let base = attn.logits(&vs, &x, Some(&m)).unwrap();
    let scaled = attn.logits(&vs, &x, Some(&m.mul_scalar(0.3))).unwrap();
    for (a, b) in base.iter().zip(&scaled) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((0.3 * u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (vs, attn) = fixture(6, 3);
    let mut rng = seeded_rng(6);
    let x = cnsnet_core::selftest::random_tensor::<f64>(&mut rng, &[7, 6], -2.0, 2.0);
    let m = cnsnet_core::selftest::random_tensor::<f64>(&mut rng, &[7, 1], 0.0, 1.0);
    for map in attn.attention_maps(&vs, &x, Some(&m)).unwrap() {
        for row in map.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn positional_table_reaches_tokens_and_mask() {
    let tokens = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let mask = Tensor::new(vec![0.5, 1.0], &[2, 1]).unwrap();
    let pe = Tensor::new(vec![0.1, 0.2, 0.3, 0.4], &[2, 2]).unwrap();
    let (t, m) = add_positional(&tokens, &mask, &pe).unwrap();
    let want_t = [1.1f64, 2.2, 3.3, 4.4];
    let want_m = [0.6f64, 0.7, 1.3, 1.4];
    for i in 0..4 {
        assert!((t.data()[i] - want_t[i]).abs() < 1e-12);
        assert!((m.data()[i] - want_m[i]).abs() < 1e-12);
    }
}
