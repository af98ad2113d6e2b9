//! Parameter storage and the basic layers shared by every network.
//!
//! Layers only hold [`ParamId`]s; the values live in a [`VarStore`] of a
//! chosen float type. Building the same architecture with the same seed into
//! an `f32` and an `f64` store yields the same parameters, which is what the
//! double-precision gradient checks rely on.

use std::cell::{Cell, RefCell};

use cnsnet_tensor::init::{kaiming_uniform, SeededRng};
use cnsnet_tensor::{Archive, Float, Tensor};

use crate::error::{Error, Result};

/// Negative slope of every hidden-layer leaky ReLU.
pub const LRELU_SLOPE: f64 = 0.2;

pub fn lrelu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.leaky_relu(T::of(LRELU_SLOPE))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
struct Buffer<T> {
    name: String,
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Named trainable parameters plus non-trainable buffers (running statistics).
#[derive(Debug)]
pub struct VarStore<T: Float> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    buffers: RefCell<Vec<Buffer<T>>>,
}

impl<T: Float> Default for VarStore<T> {
    fn default() -> Self {
        VarStore {
            names: Vec::new(),
            params: Vec::new(),
            buffers: RefCell::new(Vec::new()),
        }
    }
}

impl<T: Float> VarStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> Tensor<T> {
        self.params[id.0].clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn add_param(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.params.push(Tensor::param(values, shape).expect("parameter values match shape"));
        ParamId(self.params.len() - 1)
    }

    /// Replaces a parameter's values with a fresh leaf (dropping its gradient).
    pub fn set(&mut self, id: ParamId, values: Vec<T>) {
        let shape = self.params[id.0].shape().to_vec();
        self.params[id.0] = Tensor::param(values, &shape).expect("parameter values match shape");
    }

    pub fn grad(&self, id: ParamId) -> Option<Vec<T>> {
        self.params[id.0].grad()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn add_buffer(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> BufferId {
        let mut b = self.buffers.borrow_mut();
        assert!(b.iter().all(|x| x.name != name), "duplicate buffer {name}");
        b.push(Buffer {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: values,
        });
        BufferId(b.len() - 1)
    }

    pub fn buffer(&self, id: BufferId) -> Vec<T> {
        self.buffers.borrow()[id.0].data.clone()
    }

    pub fn set_buffer(&self, id: BufferId, values: Vec<T>) {
        let mut b = self.buffers.borrow_mut();
        assert_eq!(b[id.0].data.len(), values.len());
        b[id.0].data = values;
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.borrow().len()
    }

    /// Same parameters and buffers in another float type.
    pub fn cast<U: Float>(&self) -> VarStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        VarStore {
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|p| Tensor::param(conv(p.data()), p.shape()).unwrap())
                .collect(),
            buffers: RefCell::new(
                self.buffers
                    .borrow()
                    .iter()
                    .map(|b| Buffer {
                        name: b.name.clone(),
                        shape: b.shape.clone(),
                        data: conv(&b.data),
                    })
                    .collect(),
            ),
        }
    }

    /// Writes parameters as `{prefix}{name}` and buffers as `{prefix}buffer.{name}`.
    pub fn save_to(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        for (name, p) in self.names.iter().zip(&self.params) {
            archive.push_tensor(&format!("{prefix}{name}"), p)?;
        }
        for b in self.buffers.borrow().iter() {
            archive.push_values(&format!("{prefix}buffer.{}", b.name), &b.shape, &b.data)?;
        }
        Ok(())
    }

    /// Loads every parameter and buffer; names and shapes must match exactly.
    pub fn load_from(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        for i in 0..self.params.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let (shape, values) = archive
                .values::<T>(&key)
                .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))?;
            if shape != self.params[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}: stored shape {shape:?}, model expects {:?}",
                    self.params[i].shape()
                )));
            }
            self.params[i] = Tensor::param(values, &shape)?;
        }
        for b in self.buffers.borrow_mut().iter_mut() {
            let key = format!("{prefix}buffer.{}", b.name);
            let (shape, values) = archive
                .values::<T>(&key)
                .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))?;
            if shape != b.shape {
                return Err(Error::Checkpoint(format!("{key}: stored shape {shape:?}, expected {:?}", b.shape)));
            }
            b.data = values;
        }
        Ok(())
    }
}

/// Creates named, seeded parameters under a dotted prefix.
pub struct Init<'a, T: Float> {
    vs: &'a mut VarStore<T>,
    rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a, T: Float> Init<'a, T> {
    pub fn new(vs: &'a mut VarStore<T>, rng: &'a mut SeededRng) -> Self {
        Init {
            vs,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        let prefix = self.path(name);
        Init {
            vs: &mut *self.vs,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let n = shape.iter().product();
        let values = kaiming_uniform(&mut *self.rng, n, fan_in, LRELU_SLOPE);
        let path = self.path(name);
        self.vs.add_param(&path, shape, values)
    }

    /// Kaiming-uniform values multiplied by `scale`.
    pub fn kaiming_scaled(&mut self, name: &str, shape: &[usize], fan_in: usize, scale: f64) -> ParamId {
        let n = shape.iter().product();
        let values: Vec<T> = kaiming_uniform(&mut *self.rng, n, fan_in, LRELU_SLOPE);
        let path = self.path(name);
        self.vs.add_param(&path, shape, values.into_iter().map(|v| v * T::of(scale)).collect())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n = shape.iter().product();
        let path = self.path(name);
        self.vs.add_param(&path, shape, vec![T::of(v); n])
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f64) -> BufferId {
        let n = shape.iter().product();
        let path = self.path(name);
        self.vs.add_buffer(&path, shape, vec![T::of(v); n])
    }
}

/// Counters for conditions that are handled but worth reporting.
#[derive(Debug, Default)]
pub struct Diagnostics {
    /// Samples where a regional normalisation had an empty shadow or
    /// non-shadow region and fell back to the identity.
    pub empty_region_fallbacks: Cell<u64>,
}

/// Per-call forward options.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    pub diagnostics: Diagnostics,
}

impl ForwardCtx {
    pub fn train() -> Self {
        ForwardCtx {
            train: true,
            ..Default::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding for odd `k`.
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::scaled(init, name, cin, cout, k, 1.0)
    }

    /// Like [`Conv2d::new`] with the initial weights multiplied by `scale`.
    pub fn scaled<T: Float>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize, scale: f64) -> Self {
        let mut p = init.sub(name);
        Conv2d {
            weight: p.kaiming_scaled("weight", &[cout, cin, k, k], cin * k * k, scale),
            bias: Some(p.constant("bias", &[cout], 0.0)),
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.map(|b| vs.get(b));
        Ok(x.conv2d(&vs.get(self.weight), b.as_ref(), self.stride, self.padding)?)
    }
}

/// Affine map on `[n, in]` rows: `x W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let mut p = init.sub(name);
        Linear {
            weight: p.kaiming("weight", &[din, dout], din),
            bias: bias.then(|| p.constant("bias", &[dout], 0.0)),
        }
    }

    pub fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&vs.get(self.weight))?;
        match self.bias {
            Some(b) => {
                let b = vs.get(b);
                let d = b.dim(0);
                Ok(y.add(&b.reshape(&[1, d])?.expand(&[y.dim(0), d])?)?)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis of `[n, c]` rows.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, dim: usize) -> Self {
        let mut p = init.sub(name);
        LayerNorm {
            gamma: p.constant("gamma", &[dim], 1.0),
            beta: p.constant("beta", &[dim], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Float>(&self, vs: &VarStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let mu = x.mean_axes(&[1], true)?.expand(&shape)?;
        let centered = x.sub(&mu)?;
        let sd = centered.square().mean_axes(&[1], true)?.add_scalar(T::of(self.eps)).sqrt()?;
        let normed = centered.div(&sd.expand(&shape)?)?;
        let g = vs.get(self.gamma).reshape(&[1, c])?.expand(&[n, c])?;
        let b = vs.get(self.beta).reshape(&[1, c])?.expand(&[n, c])?;
        Ok(normed.mul(&g)?.add(&b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cnsnet_tensor::init::seeded_rng;

    #[test]
    fn conv_param_count() {
        let mut vs = VarStore::<f32>::new();
        let mut rng = seeded_rng(0);
        let mut init = Init::new(&mut vs, &mut rng);
        Conv2d::new(&mut init, "c", 3, 8, 3);
        assert_eq!(vs.param_count(), 224);
        assert_eq!(VarStore::<f32>::new().param_count(), 0);
    }

    #[test]
    fn f32_and_f64_builds_agree() {
        let build = |seed| {
            let mut vs = VarStore::<f64>::new();
            let mut rng = seeded_rng(seed);
            let mut init = Init::new(&mut vs, &mut rng);
            Linear::new(&mut init, "l", 4, 3, true);
            vs
        };
        let a = build(3);
        let b: VarStore<f32> = {
            let mut vs = VarStore::<f32>::new();
            let mut rng = seeded_rng(3);
            let mut init = Init::new(&mut vs, &mut rng);
            Linear::new(&mut init, "l", 4, 3, true);
            vs
        };
        for id in a.ids() {
            for (x, y) in a.get(id).data().iter().zip(b.get(id).data()) {
                assert!((x - *y as f64).abs() < 1e-6);
            }
        }
        assert_eq!(a.name(ParamId(0)), "l.weight");
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut vs = VarStore::<f64>::new();
        let mut rng = seeded_rng(0);
        let ln = LayerNorm::new(&mut Init::new(&mut vs, &mut rng), "ln", 4);
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0], &[2, 4]).unwrap();
        let y = ln.forward(&vs, &x).unwrap();
        for row in y.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn archive_roundtrip_and_shape_check() {
        let mut vs = VarStore::<f32>::new();
        let mut rng = seeded_rng(1);
        let mut init = Init::new(&mut vs, &mut rng);
        Conv2d::new(&mut init, "c", 2, 2, 1);
        init.buffer("running", &[2], 1.0);
        let mut ar = Archive::new();
        vs.save_to(&mut ar, "m.").unwrap();
        let mut other = vs.cast::<f32>();
        other.set(ParamId(0), vec![0.0; 4]);
        other.load_from(&ar, "m.").unwrap();
        assert_eq!(other.get(ParamId(0)).data(), vs.get(ParamId(0)).data());

        let mut wrong = VarStore::<f32>::new();
        let mut rng = seeded_rng(1);
        Conv2d::new(&mut Init::new(&mut wrong, &mut rng), "c", 3, 2, 1);
        assert!(wrong.load_from(&ar, "m.").is_err());
    }
}
