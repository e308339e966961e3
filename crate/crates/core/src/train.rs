//! SGD training with a poly schedule, augmentation and per-epoch evaluation.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::{Confusion, EvalReport};
use crate::network::Network;
use crate::ops::{self, Tape};
use crate::params::ParamKind;
use crate::seed;
use crate::tensor::Matrix;
use crate::voxel::{project_predictions, voxelize, PointCloud, SparseTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    pub scale: bool,
    pub rotate: bool,
    pub translate: bool,
    pub jitter: bool,
}

impl AugmentConfig {
    pub const OFF: Self = Self {
        scale: false,
        rotate: false,
        translate: false,
        jitter: false,
    };
    pub const ALL: Self = Self {
        scale: true,
        rotate: true,
        translate: true,
        jitter: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub class_weights: Option<Vec<f64>>,
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            class_weights: None,
            voxel_size: 0.05,
            augment: AugmentConfig::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("lr0 must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return Err(Error::Config("momentum in [0, 1), weight_decay and poly_power >= 0".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("class weights must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// `lr0 * (1 - step / total)^power`, clamped to zero past the end.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total_steps as f64).powf(power)
}

/// Momentum SGD on one flat buffer: `v = mu v + g + wd p; p -= lr v`.
pub fn sgd_update(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Velocity per trainable parameter tensor.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        let velocity = net
            .params()
            .iter()
            .map(|p| (p.kind == ParamKind::Trainable).then(|| vec![0.0; p.numel()]))
            .collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// `grads` is indexed like the parameter store; `None` means zero gradient.
    pub fn step(&mut self, net: &mut Network, grads: &[Option<Matrix>], lr: f64) -> Result<()> {
        let store = net.params_mut();
        if grads.len() != store.len() {
            return Err(Error::Shape("one gradient slot per parameter required".into()));
        }
        for i in 0..store.len() {
            let Some(v) = self.velocity[i].as_mut() else { continue };
            let p = store.entry_mut(i);
            match &grads[i] {
                Some(g) => sgd_update(p.value.as_mut_slice(), v, g.as_slice(), lr, self.momentum, self.weight_decay),
                None => {
                    let zero = vec![0.0; v.len()];
                    sgd_update(p.value.as_mut_slice(), v, &zero, lr, self.momentum, self.weight_decay);
                }
            }
        }
        Ok(())
    }
}

/// Random scale, z-rotation, translation and color jitter; labels untouched.
pub fn augment(pc: &PointCloud, cfg: AugmentConfig, rng: &mut impl Rng) -> PointCloud {
    let s = if cfg.scale { rng.random_range(0.9..=1.1) } else { 1.0 };
    let theta = if cfg.rotate { rng.random_range(0.0..TAU) } else { 0.0 };
    let t: [f64; 3] = if cfg.translate {
        [(); 3].map(|_| rng.random_range(-0.2..=0.2))
    } else {
        [0.0; 3]
    };
    let (sin, cos) = theta.sin_cos();
    let positions = pc
        .positions
        .iter()
        .map(|&[x, y, z]| {
            if !(cfg.scale || cfg.rotate || cfg.translate) {
                return [x, y, z];
            }
            [s * (cos * x - sin * y) + t[0], s * (sin * x + cos * y) + t[1], s * z + t[2]]
        })
        .collect();
    let colors = if cfg.jitter {
        let n = Normal::new(0.0, 0.05).expect("valid sigma");
        pc.colors
            .iter()
            .map(|c| c.map(|v| (v + n.sample(rng)).clamp(0.0, 1.0)))
            .collect()
    } else {
        pc.colors.clone()
    };
    PointCloud {
        positions,
        colors,
        labels: pc.labels.clone(),
    }
}

/// Voxelized scenes stacked into one batch tensor plus aligned voxel labels.
pub fn make_batch(scenes: &[PointCloud], voxel_size: f64) -> Result<(SparseTensor, Vec<i32>)> {
    let mut parts = Vec::with_capacity(scenes.len());
    let mut labels = Vec::new();
    for pc in scenes {
        let v = voxelize(pc, voxel_size)?;
        labels.extend_from_slice(&v.labels);
        parts.push(v.tensor);
    }
    Ok((SparseTensor::concat_batches(&parts)?, labels))
}

fn argmax_rows(m: &Matrix) -> Vec<i32> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as i32
        })
        .collect()
}

/// Per-point predictions: voxelize, run in eval mode, project back.
pub fn predict_points(net: &mut Network, pc: &PointCloud, voxel_size: f64) -> Result<Vec<i32>> {
    let v = voxelize(pc, voxel_size)?;
    let logits = net.predict(&v.tensor, false)?;
    project_predictions(&argmax_rows(&logits), &v.map)
}

/// Aggregate point-level scores over `scenes`.
pub fn evaluate_scenes(net: &mut Network, scenes: &[PointCloud], voxel_size: f64) -> Result<EvalReport> {
    let mut conf = Confusion::new(net.config().num_classes);
    for pc in scenes {
        let pred = predict_points(net, pc, voxel_size)?;
        conf.add(&pred, &pc.labels)?;
    }
    Ok(conf.report())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Filled on the last step of each epoch.
    pub eval: Option<(f64, f64, f64)>,
}

pub const LOG_HEADER: &str = "step,epoch,lr,loss,miou,oa,macc";

impl LogRow {
    pub fn csv(&self) -> String {
        let (m, o, a) = match self.eval {
            Some((m, o, a)) => (m.to_string(), o.to_string(), a.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        format!("{},{},{},{},{m},{o},{a}", self.step, self.epoch, self.lr, self.loss)
    }
}

/// One forward/backward pass; returns the loss and per-parameter gradients.
pub fn loss_and_grads(
    net: &mut Network,
    input: &SparseTensor,
    labels: &[i32],
    class_weights: Option<&[f64]>,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, input, true)?;
    let (loss, lv) = ops::cross_entropy(&mut tape, fwd.logits, labels, class_weights)?;
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let grads = tape.backward(lv, Matrix::filled(1, 1, 1.0))?;
    let out = fwd
        .param_vars
        .iter()
        .map(|v| v.and_then(|v| grads.get(v).cloned()))
        .collect();
    Ok((loss, out))
}

/// Train in place. `on_row` sees every log row as it is produced.
///
/// Scenes are shuffled each epoch and augmented per (epoch, scene) from the
/// `shuffle` and `augment` streams of `cfg.seed`. Evaluation after each
/// epoch runs on `val` (or on `train` when `val` is empty) without
/// augmentation.
pub fn train(
    net: &mut Network,
    cfg: &TrainConfig,
    train_set: &[PointCloud],
    val_set: &[PointCloud],
    mut on_row: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let n = train_set.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = Sgd::new(net, cfg.momentum, cfg.weight_decay);
    let mut rows = Vec::with_capacity(total);
    let eval_set = if val_set.is_empty() { train_set } else { val_set };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seed::substream(cfg.seed, "shuffle", epoch as u64);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scenes: Vec<PointCloud> = chunk
                .iter()
                .map(|&i| {
                    let mut r = seed::substream(cfg.seed, "augment", (epoch * n + i) as u64);
                    augment(&train_set[i], cfg.augment, &mut r)
                })
                .collect();
            let (input, labels) = make_batch(&scenes, cfg.voxel_size)?;
            let (loss, grads) = loss_and_grads(net, &input, &labels, cfg.class_weights.as_deref())?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let lr = poly_lr(step, total, cfg.lr0, cfg.poly_power);
            opt.step(net, &grads, lr)?;
            let eval = if b + 1 == per_epoch {
                let r = evaluate_scenes(net, eval_set, cfg.voxel_size)?;
                Some((r.miou, r.oa, r.macc))
            } else {
                None
            };
            let row = LogRow {
                step,
                epoch,
                lr,
                loss,
                eval,
            };
            on_row(&row);
            rows.push(row);
            step += 1;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrp::LrpConfig;
    use crate::network::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 0.1, 0.9), 0.1);
        assert_eq!(poly_lr(100, 100, 0.1, 0.9), 0.0);
        // 0.1 * 0.5^0.9
        assert!((poly_lr(50, 100, 0.1, 0.9) - 0.053_588_673_126_814_63).abs() < 1e-15);
    }

    #[test]
    fn sgd_trivial_cases() {
        let mut p = [1.5];
        let mut v = [0.0];
        sgd_update(&mut p, &mut v, &[0.0], 0.3, 0.9, 0.0);
        assert_eq!(p, [1.5]);
        sgd_update(&mut p, &mut v, &[0.25], 1.0, 0.0, 0.0);
        assert_eq!(p, [1.25]);
    }

    #[test]
    fn sgd_quadratic_trajectory() {
        // f(p) = 0.5 * a * p^2, reference recurrence unrolled by hand
        let (a, lr, mu, wd) = (2.0, 0.05, 0.9, 1e-4);
        let (mut p, mut v) = ([3.0], [0.0]);
        let (mut rp, mut rv) = (3.0f64, 0.0f64);
        for _ in 0..10 {
            let g = a * p[0];
            sgd_update(&mut p, &mut v, &[g], lr, mu, wd);
            let rg = a * rp;
            rv = mu * rv + rg + wd * rp;
            rp -= lr * rv;
            assert!((p[0] - rp).abs() < 1e-12);
        }
        assert!(p[0].abs() < 3.0);
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let positions = (0..n).map(|_| [0.0; 3].map(|_: f64| rng.random_range(0.0..1.0))).collect();
        let colors = (0..n).map(|_| [0.0; 3].map(|_: f64| rng.random_range(0.0..1.0))).collect();
        let labels = (0..n).map(|_| rng.random_range(-1..4)).collect();
        PointCloud::new(positions, colors, labels).unwrap()
    }

    #[test]
    fn augment_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pc = cloud(&mut rng, 300);
        assert_eq!(augment(&pc, AugmentConfig::OFF, &mut rng), pc);
        let a = augment(&pc, AugmentConfig::ALL, &mut ChaCha8Rng::seed_from_u64(1));
        let b = augment(&pc, AugmentConfig::ALL, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.labels, pc.labels);
        assert_eq!(a.len(), pc.len());
        assert!(a.colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        assert_ne!(a.positions, pc.positions);
    }

    fn tiny_net(rng: &mut ChaCha8Rng) -> Network {
        let cfg = NetworkConfig {
            stage_channels: vec![4, 4, 4, 4],
            num_classes: 4,
            in_channels: 3,
            lrp: Some(LrpConfig::default()),
        };
        Network::init(cfg, rng).unwrap()
    }

    #[test]
    fn zero_lr_keeps_trainable_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = vec![cloud(&mut rng, 200), cloud(&mut rng, 200)];
        let mut net = tiny_net(&mut rng);
        let before = net.params().flat_trainable();
        let cfg = TrainConfig {
            lr0: 0.0,
            epochs: 1,
            batch_size: 1,
            voxel_size: 0.2,
            ..TrainConfig::default()
        };
        let rows = train(&mut net, &cfg, &data, &[], |_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].eval.is_some());
        assert_eq!(net.params().flat_trainable(), before);
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let data = vec![cloud(&mut rng, 150), cloud(&mut rng, 150), cloud(&mut rng, 150)];
            let mut net = tiny_net(&mut rng);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 2,
                voxel_size: 0.2,
                lr0: 0.05,
                ..TrainConfig::default()
            };
            let rows = train(&mut net, &cfg, &data, &[], |_| {}).unwrap();
            (rows, net.params().flat_trainable())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.iter().all(|r| r.loss >= 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = vec![cloud(&mut rng, 100)];
        let mut net = tiny_net(&mut rng);
        let cfg = TrainConfig {
            lr0: 1e200,
            epochs: 5,
            batch_size: 1,
            voxel_size: 0.2,
            ..TrainConfig::default()
        };
        match train(&mut net, &cfg, &data, &[], |_| {}) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
