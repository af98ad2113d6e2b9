//! Adam with bias correction and plateau-based learning-rate halving.

use cnsnet_tensor::{Archive, Float};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::VarStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate multiplier applied on a plateau.
    pub decay_factor: f64,
    /// Validation rounds without improvement before decaying.
    pub decay_patience: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.5,
            decay_patience: 10,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1): {} {}", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("eps must be positive and decay factor in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Optimizer state: step count, current learning rate and per-parameter moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Float>(cfg: AdamConfig, vs: &VarStore<T>) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = vs.ids().map(|id| vs.get(id).numel()).collect();
        Ok(Adam {
            cfg,
            lr: cfg.lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// One update from the gradients stored on the parameters. Missing
    /// gradients count as zero; a non-finite gradient aborts before any
    /// parameter changes.
    pub fn step<T: Float>(&mut self, vs: &mut VarStore<T>) -> Result<()> {
        let ids: Vec<_> = vs.ids().collect();
        if ids.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                ids.len()
            )));
        }
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                let n = vs.get(id).numel();
                vs.grad(id).map_or(vec![0.0; n], |g| g.iter().map(|x| x.as_f64()).collect())
            })
            .collect();
        for (&id, g) in ids.iter().zip(&grads) {
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad(format!("{} (element {k}: {})", vs.name(id), g[k])));
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, (&id, g)) in ids.iter().zip(&grads).enumerate() {
            let p = vs.get(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let values: Vec<T> = p
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    T::of(x.as_f64() - self.lr * mhat / (vhat.sqrt() + c.eps))
                })
                .collect();
            vs.set(id, values);
        }
        Ok(())
    }

    pub fn save_to(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        archive.push_values(&format!("{prefix}lr"), &[1], &[self.lr])?;
        archive.push_i64(&format!("{prefix}t"), &[self.t as i64])?;
        for (k, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            archive.push_values(&format!("{prefix}m.{k}"), &[m.len()], m)?;
            archive.push_values(&format!("{prefix}v.{k}"), &[v.len()], v)?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        let ck = |e: cnsnet_tensor::TensorError| Error::Checkpoint(e.to_string());
        self.lr = archive.values::<f64>(&format!("{prefix}lr")).map_err(ck)?.1[0];
        self.t = archive.i64s(&format!("{prefix}t")).map_err(ck)?[0] as u64;
        for k in 0..self.m.len() {
            for (name, dst) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let (_, vals) = archive.values::<f64>(&format!("{prefix}{name}.{k}")).map_err(ck)?;
                if vals.len() != dst.len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer {name}.{k}: stored {} values, expected {}",
                        vals.len(),
                        dst.len()
                    )));
                }
                *dst = vals;
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by a factor when the tracked metric (lower is
/// better) has not improved for `patience` consecutive observations.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauDecay {
    pub patience: usize,
    pub factor: f64,
    pub best: Option<f64>,
    pub stale: usize,
}

impl PlateauDecay {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauDecay {
            patience,
            factor,
            best: None,
            stale: 0,
        }
    }

    /// Records a metric value; returns true when the learning rate was decayed.
    pub fn observe(&mut self, metric: f64, adam: &mut Adam) -> bool {
        if self.best.is_none_or(|b| metric < b) {
            self.best = Some(metric);
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.patience > 0 && self.stale >= self.patience {
            adam.lr *= self.factor;
            self.stale = 0;
            return true;
        }
        false
    }
}
