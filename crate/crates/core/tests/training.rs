//! Optimizer behaviour, deterministic training, resume and ablation variants.

mod common;

use cnsnet_core::model::{param_count, Ablation};
use cnsnet_core::nn::VarStore;
use cnsnet_core::optim::{Adam, AdamConfig};
use cnsnet_core::train::{load_model, synthetic_splits, Trainer};
use cnsnet_tensor::Archive;
use common::tiny_config;

fn params(t: &Trainer<f32>) -> Vec<Vec<f32>> {
    t.vs.ids().map(|id| t.vs.get(id).data().to_vec()).collect()
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut vs = VarStore::<f64>::new();
    let id = vs.add_param("x", &[3], vec![2.0, -1.5, 0.5]);
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(cfg, &vs).unwrap();
    for _ in 0..400 {
        vs.zero_grads();
        vs.get(id).square().sum().backward().unwrap();
        adam.step(&mut vs).unwrap();
    }
    assert!(vs.get(id).data().iter().all(|v| v.abs() < 1e-2), "{:?}", vs.get(id).data());
}

#[test]
fn adam_first_step_moves_by_lr_against_the_gradient_sign() {
    let mut vs = VarStore::<f64>::new();
    let id = vs.add_param("x", &[2], vec![1.0, -3.0]);
    let mut adam = Adam::new(AdamConfig::default(), &vs).unwrap();
    vs.get(id).mul_scalar(7.0).sum().backward().unwrap();
    adam.step(&mut vs).unwrap();
    let want = 1e-3 * 7.0 / (7.0 + 1e-8);
    let d = vs.get(id).data().to_vec();
    assert!((d[0] - (1.0 - want)).abs() < 1e-12);
    assert!((d[1] - (-3.0 - want)).abs() < 1e-12);
}

#[test]
fn identical_runs_are_bit_identical() {
    let cfg = tiny_config();
    let (train, _) = synthetic_splits(&cfg).unwrap();
    let mut a = Trainer::<f32>::new(&cfg).unwrap();
    let mut b = Trainer::<f32>::new(&cfg).unwrap();
    for _ in 0..2 {
        let (la, lb) = (a.step(&train).unwrap(), b.step(&train).unwrap());
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
    }
    assert_eq!(params(&a), params(&b));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let cfg = tiny_config();
    let (train, _) = synthetic_splits(&cfg).unwrap();
    let mut straight = Trainer::<f32>::new(&cfg).unwrap();
    straight.step(&train).unwrap();
    straight.step(&train).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::<f32>::new(&cfg).unwrap();
    first.step(&train).unwrap();
    let path = first.save(dir.path().join("mid.ckpt")).unwrap();
    drop(first);
    let mut resumed = Trainer::<f32>::load(&path).unwrap();
    assert_eq!(resumed.state.step, 1);
    resumed.step(&train).unwrap();

    assert_eq!(params(&straight), params(&resumed));
    assert_eq!(straight.to_archive().unwrap().to_bytes(), resumed.to_archive().unwrap().to_bytes());
}

#[test]
fn fit_writes_checkpoints_and_validates() {
    let cfg = tiny_config();
    let (train, val) = synthetic_splits(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::<f32>::new(&cfg).unwrap();
    let summary = t.fit(&train, &val, Some(dir.path())).unwrap();
    assert_eq!(summary.history.len(), 3);
    assert!(!summary.validations.is_empty());
    assert!(dir.path().join("best.ckpt").exists());
    let (loaded_cfg, _, vs) = load_model::<f32>(dir.path().join("last.ckpt"), Some(&cfg)).unwrap();
    assert_eq!(loaded_cfg.model(), cfg.model());
    assert_eq!(param_count(&vs), param_count(&t.vs));
    let mut other = cfg.clone();
    other.base_width = 4;
    assert!(load_model::<f32>(dir.path().join("last.ckpt"), Some(&other)).is_err());
}

#[test]
fn checkpoint_bytes_roundtrip() {
    let cfg = tiny_config();
    let (train, _) = synthetic_splits(&cfg).unwrap();
    let mut t = Trainer::<f32>::new(&cfg).unwrap();
    t.step(&train).unwrap();
    let bytes = t.to_archive().unwrap().to_bytes();
    let back = Trainer::<f32>::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_archive().unwrap().to_bytes(), bytes);
}

#[test]
fn every_ablation_trains_one_step_and_differs() {
    let base = tiny_config();
    let (train, _) = synthetic_splits(&base).unwrap();
    let mut outputs = Vec::new();
    for ab in Ablation::ALL {
        let mut cfg = base.clone();
        cfg.ablation = ab;
        let mut t = Trainer::<f32>::new(&cfg).unwrap();
        let log = t.step(&train).unwrap();
        assert!(log.total.is_finite(), "{}", ab.name());
        let img = &train[0];
        let p = cnsnet_core::eval::predict(&t.net, &t.vs, &img.shadow, &img.mask).unwrap();
        outputs.push((ab.name(), p.output.data));
    }
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            assert_ne!(outputs[i].1, outputs[j].1, "{} vs {}", outputs[i].0, outputs[j].0);
        }
    }
}

#[test]
fn empty_training_set_is_an_error() {
    let cfg = tiny_config();
    let mut t = Trainer::<f32>::new(&cfg).unwrap();
    let empty: Vec<cnsnet_core::data::ImageTriplet> = Vec::new();
    assert!(t.step(&empty).is_err());
    assert!(t.fit(&empty, &empty, None).is_err());
}
