//! Pixel-token transformer whose key projection is modulated by a mask.
//!
//! Every pixel of the deepest feature map is a token. Inside each layer the
//! tokens are layer-normalised and a learned positional table is added to
//! both the features and the (channel-broadcast) mask stream. Keys are
//! computed from the features multiplied elementwise by the mask stream, so
//! shadow pixels (small complement-mask values) contribute damped keys.

use cnsnet_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lrelu, Init, LayerNorm, Linear, ParamId, VarStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Complement of the predicted soft mask, bilinearly resized.
    Soft,
    /// Complement of the hard mask, nearest resized.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaatConfig {
    pub heads: usize,
    pub layers: usize,
    pub channels: usize,
    pub mask_mode: MaskMode,
    pub ffn_expansion: usize,
}

impl Default for SaatConfig {
    fn default() -> Self {
        SaatConfig {
            heads: 4,
            layers: 2,
            channels: 64,
            mask_mode: MaskMode::Soft,
            ffn_expansion: 2,
        }
    }
}

impl SaatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_expansion == 0 {
            return Err(Error::Config("attention needs at least one layer and a positive expansion".into()));
        }
        Ok(())
    }
}

/// Row-major pixel tokens `[h*w, c]` together with the grid they came from.
#[derive(Clone, Debug)]
pub struct TokenGrid<T: Float> {
    pub tokens: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

/// Flattens `[h, w, c]` features and an `[h, w]` mask to `[n, c]` tokens and
/// `[n, 1]` mask tokens, `n = h*w` in row-major order.
pub fn tokenize<T: Float>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<(TokenGrid<T>, Tensor<T>)> {
    let s = x.shape();
    if s.len() != 3 || mask.shape() != &s[..2] {
        return Err(Error::Shape(format!("tokenize: features {s:?} with mask {:?}", mask.shape())));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    Ok((
        TokenGrid {
            tokens: x.reshape(&[h * w, c])?,
            h,
            w,
        },
        mask.reshape(&[h * w, 1])?,
    ))
}

pub fn detokenize<T: Float>(grid: &TokenGrid<T>) -> Result<Tensor<T>> {
    let c = grid.tokens.dim(1);
    Ok(grid.tokens.reshape(&[grid.h, grid.w, c])?)
}

/// `[1, c, h, w]` feature map to `[h*w, c]` tokens.
pub fn tokens_from_nchw<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    Ok(x.reshape(&[c, h, w])?.permute(&[1, 2, 0])?.reshape(&[h * w, c])?)
}

/// `[h*w, c]` tokens back to a `[1, c, h, w]` feature map.
pub fn tokens_to_nchw<T: Float>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = t.dim(1);
    Ok(t.reshape(&[h, w, c])?.permute(&[2, 0, 1])?.reshape(&[1, c, h, w])?)
}

/// Adds the positional table to the tokens and to the mask tokens, which
/// are first broadcast across channels when given as `[n, 1]`.
pub fn add_positional<T: Float>(tokens: &Tensor<T>, mask_tokens: &Tensor<T>, pe: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if tokens.shape() != pe.shape() {
        return Err(Error::Shape(format!(
            "token grid {:?} differs from the positional table {:?}",
            tokens.shape(),
            pe.shape()
        )));
    }
    let m = broadcast_mask(mask_tokens, tokens.shape())?;
    Ok((tokens.add(pe)?, m.add(pe)?))
}

fn broadcast_mask<T: Float>(m: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if m.shape() == shape {
        Ok(m.clone())
    } else if m.shape() == [shape[0], 1] {
        Ok(m.expand(shape)?)
    } else {
        Err(Error::Shape(format!("mask tokens {:?} for tokens {shape:?}", m.shape())))
    }
}

/// Multi-head attention with query/key/value projections without bias and
/// an output projection with bias.
#[derive(Clone, Debug)]
pub struct MaskedAttention {
    pub heads: usize,
    pub channels: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
}

impl MaskedAttention {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, channels: usize, heads: usize) -> Self {
        let mut p = init.sub(name);
        MaskedAttention {
            heads,
            channels,
            wq: Linear::new(&mut p, "q", channels, channels, false),
            wk: Linear::new(&mut p, "k", channels, channels, false),
            wv: Linear::new(&mut p, "v", channels, channels, false),
            proj: Linear::new(&mut p, "proj", channels, channels, true),
        }
    }

    fn qkv<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, m: Option<&Tensor<T>>) -> Result<[Tensor<T>; 3]> {
        let keyed = match m {
            Some(m) => x.mul(&broadcast_mask(m, x.shape())?)?,
            None => x.clone(),
        };
        Ok([self.wq.forward(vs, x)?, self.wk.forward(vs, &keyed)?, self.wv.forward(vs, x)?])
    }

    /// Pre-softmax logits `Q_h K_h^T / sqrt(c)` for every head.
    pub fn logits<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, m: Option<&Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        let [q, k, _] = self.qkv(vs, x, m)?;
        self.head_logits(&q, &k)
    }

    fn head_logits<T: Float>(&self, q: &Tensor<T>, k: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let d = self.channels / self.heads;
        let scale = T::of(1.0 / (self.channels as f64).sqrt());
        (0..self.heads)
            .map(|h| {
                let qh = q.narrow(1, h * d, d)?;
                let kh = k.narrow(1, h * d, d)?;
                Ok(qh.matmul(&kh.transpose(0, 1)?)?.mul_scalar(scale))
            })
            .collect()
    }

    /// Row-stochastic `[n, n]` attention map of every head.
    pub fn attention_maps<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, m: Option<&Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        self.logits(vs, x, m)?.iter().map(|l| Ok(l.softmax(1)?)).collect()
    }

    /// Attention output `[n, c]`; `m = None` gives plain (unmasked) attention.
    pub fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, m: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if x.ndim() != 2 || x.dim(1) != self.channels {
            return Err(Error::Shape(format!("attention expects [n, {}] tokens, got {:?}", self.channels, x.shape())));
        }
        let [q, k, v] = self.qkv(vs, x, m)?;
        let d = self.channels / self.heads;
        let logits = self.head_logits(&q, &k)?;
        let outs = logits
            .iter()
            .enumerate()
            .map(|(h, l)| Ok(l.softmax(1)?.matmul(&v.narrow(1, h * d, d)?)?))
            .collect::<Result<Vec<_>>>()?;
        let cat = if outs.len() == 1 { outs[0].clone() } else { Tensor::concat(&outs, 1)? };
        self.proj.forward(vs, &cat)
    }
}

/// Masked attention on already-encoded tokens and mask tokens.
pub fn masked_attention<T: Float>(vs: &VarStore<T>, attn: &MaskedAttention, tokens: &Tensor<T>, mask_tokens: &Tensor<T>) -> Result<Tensor<T>> {
    attn.forward(vs, tokens, Some(mask_tokens))
}

#[derive(Clone, Debug)]
pub struct SaatLayer {
    pub norm1: LayerNorm,
    pub attn: MaskedAttention,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl SaatLayer {
    fn new<T: Float>(init: &mut Init<T>, name: &str, cfg: &SaatConfig) -> Self {
        let mut p = init.sub(name);
        let c = cfg.channels;
        SaatLayer {
            norm1: LayerNorm::new(&mut p, "norm1", c),
            attn: MaskedAttention::new(&mut p, "attn", c, cfg.heads),
            norm2: LayerNorm::new(&mut p, "norm2", c),
            ffn1: Linear::new(&mut p, "ffn1", c, c * cfg.ffn_expansion, true),
            ffn2: Linear::new(&mut p, "ffn2", c * cfg.ffn_expansion, c, true),
        }
    }

    fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, m: &Tensor<T>, pe: &Tensor<T>) -> Result<Tensor<T>> {
        let (xt, mt) = add_positional(&self.norm1.forward(vs, x)?, m, pe)?;
        let x = x.add(&masked_attention(vs, &self.attn, &xt, &mt)?)?;
        let h = lrelu(&self.ffn1.forward(vs, &self.norm2.forward(vs, &x)?)?);
        Ok(x.add(&self.ffn2.forward(vs, &h)?)?)
    }
}

/// Cascade of mask-guided transformer layers on a fixed build-time grid.
#[derive(Clone, Debug)]
pub struct Saat {
    pub cfg: SaatConfig,
    pub grid: (usize, usize),
    pub pe: ParamId,
    pub layers: Vec<SaatLayer>,
}

impl Saat {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, cfg: &SaatConfig, grid: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let mut p = init.sub(name);
        let n = grid.0 * grid.1;
        // Small random table so positions are distinguishable from the start.
        let pe = p.kaiming("pe", &[n, cfg.channels], 50 * cfg.channels);
        let layers = (0..cfg.layers).map(|i| SaatLayer::new(&mut p, &format!("layer{i}"), cfg)).collect();
        Ok(Saat {
            cfg: *cfg,
            grid,
            pe,
            layers,
        })
    }

    /// Positional table for an `h x w` grid: the learned table itself at the
    /// build grid, otherwise its bilinear resampling.
    pub fn positional<T: Float>(&self, vs: &VarStore<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let pe = vs.get(self.pe);
        if (h, w) == self.grid {
            return Ok(pe);
        }
        let (gh, gw) = self.grid;
        let grid = tokens_to_nchw(&pe, gh, gw)?.resize_bilinear(h, w)?;
        tokens_from_nchw(&grid)
    }

    /// Token-level forward on `[n, c]` tokens and `[n, 1]` (or `[n, c]`) mask
    /// tokens with an explicit positional table.
    pub fn forward_tokens<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, m: &Tensor<T>, pe: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(vs, &x, m, pe)?;
        }
        Ok(x)
    }

    /// `x` is `[N, c, h, w]`, `mask` the complement mask `[N, 1, h, w]`.
    pub fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if c != self.cfg.channels || mask.shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "attention block expects [N, {}, h, w] features and [N, 1, h, w] mask, got {:?} and {:?}",
                self.cfg.channels,
                x.shape(),
                mask.shape()
            )));
        }
        let pe = self.positional(vs, h, w)?;
        let outs = (0..n)
            .map(|i| {
                let xi = tokens_from_nchw(&x.narrow(0, i, 1)?)?;
                let mi = mask.narrow(0, i, 1)?.reshape(&[h * w, 1])?;
                let y = self.forward_tokens(vs, &xi, &mi, &pe)?;
                tokens_to_nchw(&y, h, w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(if n == 1 { outs[0].clone() } else { Tensor::concat(&outs, 0)? })
    }

    /// Parameters whose zeroing turns every layer into the identity.
    pub fn output_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                [l.attn.proj.weight, l.attn.proj.bias.unwrap(), l.ffn2.weight, l.ffn2.bias.unwrap()]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cnsnet_tensor::init::seeded_rng;

    fn build(cfg: &SaatConfig, grid: (usize, usize), seed: u64) -> (Saat, VarStore<f64>) {
        let mut vs = VarStore::new();
        let mut rng = seeded_rng(seed);
        let s = Saat::new(&mut Init::new(&mut vs, &mut rng), "saat", cfg, grid).unwrap();
        (s, vs)
    }

    #[test]
    fn token_order_is_row_major() {
        // [h=2, w=2, c=1] with values encoding (y, x).
        let x = Tensor::<f64>::new(vec![0.0, 1.0, 10.0, 11.0], &[2, 2, 1]).unwrap();
        let m = Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let (g, mt) = tokenize(&x, &m).unwrap();
        assert_eq!(g.tokens.data(), &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(mt.shape(), &[4, 1]);
        assert_eq!(detokenize(&g).unwrap().data(), x.data());
        let nchw = Tensor::<f64>::new((0..12).map(|v| v as f64).collect(), &[1, 3, 2, 2]).unwrap();
        let t = tokens_from_nchw(&nchw).unwrap();
        assert_eq!(&t.data()[..3], &[0.0, 4.0, 8.0]);
        assert_eq!(tokens_to_nchw(&t, 2, 2).unwrap().data(), nchw.data());
    }

    #[test]
    fn positional_identity_and_rows() {
        let t = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let m = Tensor::<f64>::new(vec![0.5, 1.0], &[2, 1]).unwrap();
        let (a, b) = add_positional(&t, &m, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(a.data(), t.data());
        assert_eq!(b.data(), &[0.5, 0.5, 1.0, 1.0]);
        let pe = Tensor::<f64>::new(vec![0.1, 0.2, 0.3, 0.4], &[2, 2]).unwrap();
        let (a, _) = add_positional(&Tensor::zeros(&[2, 2]), &m, &pe).unwrap();
        assert_eq!(a.data(), pe.data());
        assert!(add_positional(&Tensor::zeros(&[3, 2]), &m, &pe).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = SaatConfig { channels: 4, heads: 2, ..Default::default() };
        let (s, vs) = build(&cfg, (1, 1), 0);
        let attn = &s.layers[0].attn;
        let x = Tensor::new(vec![0.3, -0.2, 0.9, 0.1], &[1, 4]).unwrap();
        for m in [0.0, 0.4, 1.0] {
            let mt = Tensor::full(&[1, 1], m);
            for a in attn.attention_maps(&vs, &x, Some(&mt)).unwrap() {
                assert_eq!(a.data(), &[1.0]);
            }
            let out = masked_attention(&vs, attn, &x, &mt).unwrap();
            let expected = attn.proj.forward(&vs, &attn.wv.forward(&vs, &x).unwrap()).unwrap();
            for (o, e) in out.data().iter().zip(expected.data()) {
                assert!((o - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let cfg = SaatConfig { channels: 8, heads: 4, ..Default::default() };
        let (s, mut vs) = build(&cfg, (2, 3), 1);
        for id in s.output_params() {
            let n = vs.get(id).numel();
            vs.set(id, vec![0.0; n]);
        }
        let x = Tensor::new((0..48).map(|v| (v as f64 * 0.37).sin()).collect(), &[1, 8, 2, 3]).unwrap();
        let m = Tensor::new((0..6).map(|v| v as f64 / 6.0).collect(), &[1, 1, 2, 3]).unwrap();
        assert_eq!(s.forward(&vs, &x, &m).unwrap().data(), x.data());
    }

    #[test]
    fn positional_resampling_keeps_build_grid() {
        let cfg = SaatConfig { channels: 4, heads: 1, layers: 1, ..Default::default() };
        let (s, vs) = build(&cfg, (2, 2), 2);
        assert_eq!(s.positional(&vs, 2, 2).unwrap().data(), vs.get(s.pe).data());
        assert_eq!(s.positional(&vs, 4, 6).unwrap().shape(), &[24, 4]);
        assert!(SaatConfig { channels: 6, heads: 4, ..cfg }.validate().is_err());
    }
}
