//! Training loop with deterministic batching, validation-driven learning-rate
//! decay and resumable checkpoints.

use std::path::{Path, PathBuf};

use cnsnet_tensor::init::seeded_rng;
use cnsnet_tensor::{Archive, Float, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;

use crate::config::Config;
use crate::data::{augment, synth_dataset, ImageTriplet, TripletSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate, stack_images, stack_planes};
use crate::loss::{loss_grad, loss_per, loss_rem, loss_total, LossParts, PerceptualExtractor};
use crate::mask::{soft_mask_loss, soft_mask_target};
use crate::metrics::{EvalProtocol, MetricReport};
use crate::model::Cnsnet;
use crate::nn::{ForwardCtx, VarStore};
use crate::optim::{Adam, PlateauDecay};

/// Offset separating the validation seeds from the training seeds.
const VAL_SEED_OFFSET: u64 = 1 << 32;

/// Synthetic training and validation sets derived from the run seed.
pub fn synthetic_splits(cfg: &Config) -> Result<(Vec<ImageTriplet>, Vec<ImageTriplet>)> {
    let spec = cfg.synth();
    let base = cfg.seed.wrapping_mul(1 << 40);
    Ok((
        synth_dataset(&spec, base, cfg.train_count)?,
        synth_dataset(&spec, base.wrapping_add(VAL_SEED_OFFSET), cfg.val_count)?,
    ))
}

/// Progress counters that, together with parameters and optimizer moments,
/// fully determine the continuation of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    /// Best validation shadow-region error so far.
    pub best_val: Option<f64>,
    pub plateau: PlateauDecay,
}

/// Losses of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Removal, soft-mask, perceptual and gradient losses.
    pub parts: [f64; 4],
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub history: Vec<StepLog>,
    pub validations: Vec<(u64, MetricReport)>,
}

pub struct Trainer<T: Float> {
    pub cfg: Config,
    pub net: Cnsnet,
    pub vs: VarStore<T>,
    pub adam: Adam,
    pub extractor: PerceptualExtractor<T>,
    pub state: TrainState,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Float> Trainer<T> {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let (net, vs) = Cnsnet::build::<T>(&cfg.model(), cfg.seed)?;
        let adam = Adam::new(cfg.adam(), &vs)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            net,
            vs,
            adam,
            extractor: PerceptualExtractor::seeded(cfg.perceptual_seed),
            state: TrainState {
                step: 0,
                seed: cfg.seed,
                best_val: None,
                plateau: PlateauDecay::new(cfg.decay_patience, cfg.decay_factor),
            },
        })
    }

    pub fn steps_per_epoch(&self, len: usize) -> u64 {
        len.div_ceil(self.cfg.batch_size) as u64
    }

    /// Dataset indices of the batch used at `step`: a fresh permutation per
    /// epoch, seeded by `(seed, epoch)`.
    pub fn batch_indices(&self, len: usize, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch(len);
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut seeded_rng(mix(self.state.seed, epoch)));
        let b = self.cfg.batch_size;
        order[pos * b..((pos + 1) * b).min(len)].to_vec()
    }

    fn batch(&self, source: &(impl TripletSource + ?Sized), step: u64) -> Result<Vec<ImageTriplet>> {
        let crop = (self.cfg.patch_size > 0).then_some(self.cfg.patch_size);
        self.batch_indices(source.len(), step)
            .into_iter()
            .enumerate()
            .map(|(i, k)| augment(&source.get(k)?, mix(mix(self.state.seed, step), i as u64 + 1), crop))
            .collect()
    }

    /// Losses of a batch, with the graph attached for backpropagation.
    pub fn losses(&self, batch: &[ImageTriplet]) -> Result<LossParts<T>> {
        let shadows: Vec<_> = batch.iter().map(|t| &t.shadow).collect();
        let frees: Vec<_> = batch.iter().map(|t| &t.free).collect();
        let (h, w) = (batch[0].height(), batch[0].width());
        let hard: Vec<Vec<f32>> = batch.iter().map(|t| t.mask.data.iter().map(|&b| b as u8 as f32).collect()).collect();
        let targets = batch
            .iter()
            .map(|t| soft_mask_target(&t.shadow, &t.free))
            .collect::<Result<Vec<_>>>()?;
        let shadow = stack_images::<T>(&shadows)?;
        let free = stack_images::<T>(&frees)?;
        let hard_t = stack_planes::<T>(&hard.iter().map(Vec::as_slice).collect::<Vec<_>>(), h, w)?;
        let target_t = stack_planes::<T>(&targets.iter().map(|m| m.data.as_slice()).collect::<Vec<_>>(), h, w)?;
        let masks: Vec<_> = batch.iter().map(|t| t.mask.clone()).collect();
        let out = self.net.forward(&self.vs, &shadow, &hard_t, &ForwardCtx::train())?;
        Ok(LossParts {
            rem: loss_rem(&out.output, &free)?,
            soft: soft_mask_loss(&out.soft_mask, &target_t)?,
            per: loss_per(&out.output, &free, &self.extractor)?,
            grad: loss_grad(&out.output, &shadow, &free, &masks)?,
        })
    }

    /// One optimizer step on the batch scheduled for the current step.
    pub fn step(&mut self, source: &(impl TripletSource + ?Sized)) -> Result<StepLog> {
        if source.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let step = self.state.step;
        let batch = self.batch(source, step)?;
        self.vs.zero_grads();
        let parts = self.losses(&batch)?;
        let total: Tensor<T> = loss_total(&parts, self.net.cfg.lambda)?;
        let tv = total.item().as_f64();
        if !tv.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        total.backward()?;
        let lr = self.adam.lr;
        self.adam.step(&mut self.vs)?;
        self.state.step += 1;
        let log = StepLog {
            step,
            epoch: step / self.steps_per_epoch(source.len()),
            lr,
            parts: parts.values(),
            total: tv,
        };
        debug!(
            "step {} rem {:.5} soft {:.5} per {:.5} grad {:.6} total {:.5}",
            step, log.parts[0], log.parts[1], log.parts[2], log.parts[3], tv
        );
        Ok(log)
    }

    pub fn validate(&self, val: &(impl TripletSource + ?Sized)) -> Result<MetricReport> {
        evaluate(&self.net, &self.vs, val, EvalProtocol::default())
    }

    /// Trains until `cfg.steps`, validating every `val_every` steps (once per
    /// epoch when zero). With `out_dir`, `best.ckpt` tracks the lowest
    /// validation shadow-region error and `last.ckpt` the latest state.
    pub fn fit(
        &mut self,
        train: &(impl TripletSource + ?Sized),
        val: &(impl TripletSource + ?Sized),
        out_dir: Option<&Path>,
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d)?;
        }
        let every = match self.cfg.val_every {
            0 => self.steps_per_epoch(train.len()),
            n => n,
        };
        let mut summary = TrainSummary::default();
        while self.state.step < self.cfg.steps {
            let log = self.step(train)?;
            if self.cfg.log_every > 0 && (log.step % self.cfg.log_every == 0 || self.state.step == self.cfg.steps) {
                info!(
                    "step {} epoch {} lr {:.2e} rem {:.5} soft {:.5} per {:.5} grad {:.6} total {:.5}",
                    log.step, log.epoch, log.lr, log.parts[0], log.parts[1], log.parts[2], log.parts[3], log.total
                );
            }
            summary.history.push(log);
            let done = self.state.step == self.cfg.steps;
            if !val.is_empty() && (self.state.step.is_multiple_of(every) || done) {
                let report = self.validate(val)?;
                let score = report.rmse_s.or(report.rmse_all).unwrap_or(f64::INFINITY);
                info!("validation at step {}: shadow RMSE {score:.4}", self.state.step);
                if self.state.plateau.observe(score, &mut self.adam) {
                    info!("learning rate decayed to {:.2e}", self.adam.lr);
                }
                if self.state.best_val.is_none_or(|b| score < b) {
                    self.state.best_val = Some(score);
                    if let Some(d) = out_dir {
                        self.save(d.join("best.ckpt"))?;
                    }
                }
                summary.validations.push((self.state.step, report));
            }
            if let Some(d) = out_dir {
                if done || self.state.step.is_multiple_of(every) {
                    self.save(d.join("last.ckpt"))?;
                }
            }
        }
        Ok(summary)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.push_bytes("config", self.cfg.to_toml().as_bytes())?;
        a.push_bytes("dtype", T::DTYPE.name().as_bytes())?;
        self.vs.save_to(&mut a, "model.")?;
        self.adam.save_to(&mut a, "adam.")?;
        let s = &self.state;
        a.push_i64("state.step", &[s.step as i64])?;
        a.push_i64("state.seed", &[s.seed as i64])?;
        a.push_values("state.best_val", &[1], &[s.best_val.unwrap_or(f64::NAN)])?;
        a.push_values("state.plateau_best", &[1], &[s.plateau.best.unwrap_or(f64::NAN)])?;
        a.push_i64("state.plateau_stale", &[s.plateau.stale as i64])?;
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        self.to_archive()?.save(path)?;
        Ok(path.to_path_buf())
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save`].
    pub fn from_archive(a: &Archive) -> Result<Self> {
        let ck = |e: cnsnet_tensor::TensorError| Error::Checkpoint(e.to_string());
        let cfg = checkpoint_config(a)?;
        let dtype = std::str::from_utf8(a.bytes("dtype").map_err(ck)?).unwrap_or("?").to_string();
        if dtype != T::DTYPE.name() {
            return Err(Error::Checkpoint(format!("checkpoint holds {dtype} weights, requested {}", T::DTYPE.name())));
        }
        let mut t = Trainer::<T>::new(&cfg)?;
        t.vs.load_from(a, "model.")?;
        t.adam.load_from(a, "adam.")?;
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        t.state.step = a.i64s("state.step").map_err(ck)?[0] as u64;
        t.state.seed = a.i64s("state.seed").map_err(ck)?[0] as u64;
        t.state.best_val = opt(a.values::<f64>("state.best_val").map_err(ck)?.1[0]);
        t.state.plateau.best = opt(a.values::<f64>("state.plateau_best").map_err(ck)?.1[0]);
        t.state.plateau.stale = a.i64s("state.plateau_stale").map_err(ck)?[0] as usize;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let a = Archive::load(path.as_ref()).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_archive(&a)
    }
}

/// Run configuration stored in a checkpoint.
pub fn checkpoint_config(a: &Archive) -> Result<Config> {
    let text = a.bytes("config").map_err(|e| Error::Checkpoint(e.to_string()))?;
    let text = std::str::from_utf8(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Config::from_toml(text)
}

/// Network and weights from a checkpoint. When `expected` is given its model
/// configuration must equal the stored one.
pub fn load_model<T: Float>(path: impl AsRef<Path>, expected: Option<&Config>) -> Result<(Config, Cnsnet, VarStore<T>)> {
    let path = path.as_ref();
    let a = Archive::load(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let cfg = checkpoint_config(&a)?;
    if let Some(e) = expected {
        if e.model() != cfg.model() {
            return Err(Error::Checkpoint(format!(
                "{}: model configuration differs from the one given",
                path.display()
            )));
        }
    }
    let (net, mut vs) = Cnsnet::build::<T>(&cfg.model(), cfg.seed)?;
    vs.load_from(&a, "model.")?;
    Ok((cfg, net, vs))
}
