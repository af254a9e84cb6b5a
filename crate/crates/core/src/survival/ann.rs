//! One-hidden-layer ReLU regressor trained with minibatch Adam on MSE.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SurvivalError, TargetScale};
use crate::net::layers::{linear_backward, linear_forward, relu_backward, relu_forward};
use crate::net::{Optimizer, OptimizerConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fit on z-scored targets and map predictions back to days.
    pub standardize_target: bool,
    /// Fraction of training rows held out (seeded) to trace validation MSE.
    pub validation_fraction: f64,
    /// Restore the weights of the epoch with the lowest validation MSE.
    pub select_best_epoch: bool,
}

impl Default for AnnConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            epochs: 900,
            batch_size: 10,
            lr: 1e-3,
            standardize_target: true,
            validation_fraction: 0.0,
            select_best_epoch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnModel {
    pub input_dim: usize,
    pub hidden: usize,
    /// (input_dim, hidden), row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// (hidden, 1).
    pub w2: Vec<f64>,
    pub b2: f64,
    pub target: TargetScale,
    /// Training-set MSE in days² after each epoch.
    pub train_curve: Vec<f64>,
    /// MSE on the internal validation split, when one was requested.
    pub validation_curve: Vec<f64>,
    /// MSE on externally supplied monitor rows (for example a CV test fold).
    pub monitor_curve: Vec<f64>,
    /// 1-based epoch whose weights the model holds.
    pub epoch: usize,
}

struct Params {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Params {
    fn list(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn zero_grad(&mut self) {
        self.list().into_iter().for_each(Tensor::zero_grad);
    }
}

fn forward(p: &Params, x: &Tensor) -> (Tensor, Tensor, Tensor) {
    let pre = linear_forward(x, &p.w1, &p.b1).expect("validated dims");
    let h = relu_forward(&pre);
    let out = linear_forward(&h, &p.w2, &p.b2).expect("validated dims");
    (pre, h, out)
}

fn to_tensor(rows: &[&[f64]]) -> Tensor {
    let p = rows.first().map_or(0, |r| r.len());
    Tensor::new(vec![rows.len(), p], rows.iter().flat_map(|r| r.iter().copied()).collect()).expect("rectangular")
}

impl AnnModel {
    /// A model with explicit parameters and identity target scaling.
    pub fn from_parts(input_dim: usize, hidden: usize, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> Result<Self, SurvivalError> {
        if w1.len() != input_dim * hidden || b1.len() != hidden || w2.len() != hidden {
            return Err(SurvivalError::Shape("ANN parameter sizes do not match dims".into()));
        }
        Ok(Self {
            input_dim,
            hidden,
            w1,
            b1,
            w2,
            b2,
            target: TargetScale::identity(),
            train_curve: Vec::new(),
            validation_curve: Vec::new(),
            monitor_curve: Vec::new(),
            epoch: 0,
        })
    }

    /// Raw (unclamped) output in days for an already standardized row.
    pub fn predict_standardized(&self, z: &[f64]) -> f64 {
        let mut out = self.b2;
        for j in 0..self.hidden {
            let mut a = self.b1[j];
            for (i, v) in z.iter().enumerate() {
                a += v * self.w1[i * self.hidden + j];
            }
            if a > 0.0 {
                out += a * self.w2[j];
            }
        }
        self.target.inverse(out)
    }

    fn set_params(&mut self, p: &Params) {
        self.w1 = p.w1.values().to_vec();
        self.b1 = p.b1.values().to_vec();
        self.w2 = p.w2.values().to_vec();
        self.b2 = p.b2.values()[0];
    }
}

fn mse_days(p: &Params, target: &TargetScale, x: &[Vec<f64>], y: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let rows: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let (_, _, out) = forward(p, &to_tensor(&rows));
    out.values()
        .iter()
        .zip(y)
        .map(|(o, t)| (target.inverse(*o) - t).powi(2))
        .sum::<f64>()
        / y.len() as f64
}

/// Trains on standardized features `z` and targets `y` (days). `monitor`
/// rows only produce a learning curve and never influence the weights.
pub fn train_ann(
    z: &[Vec<f64>],
    y: &[f64],
    cfg: &AnnConfig,
    seed: u64,
    monitor: Option<(&[Vec<f64>], &[f64])>,
) -> Result<AnnModel, SurvivalError> {
    if z.len() < 2 {
        return Err(SurvivalError::TooFewRows { need: 2, got: z.len() });
    }
    if cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(SurvivalError::Invalid("hidden width and batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(SurvivalError::Invalid("validation_fraction must lie in [0, 1)".into()));
    }
    let p = z[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..z.len()).collect();
    let n_val = (cfg.validation_fraction * z.len() as f64).round() as usize;
    let (train_idx, val_idx) = if n_val > 0 {
        order.shuffle(&mut rng);
        let (v, t) = order.split_at(n_val.min(z.len() - 2));
        let (mut t, mut v) = (t.to_vec(), v.to_vec());
        t.sort_unstable();
        v.sort_unstable();
        (t, v)
    } else {
        (order, Vec::new())
    };
    let xs = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| z[i].clone()).collect() };
    let ys = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| y[i]).collect() };
    let (tx, ty, vx, vy) = (xs(&train_idx), ys(&train_idx), xs(&val_idx), ys(&val_idx));

    let target = if cfg.standardize_target {
        TargetScale::fit(&ty)
    } else {
        TargetScale::identity()
    };
    let ty_s: Vec<f64> = ty.iter().map(|&v| target.forward(v)).collect();

    let he1 = Normal::new(0.0, (2.0 / p.max(1) as f64).sqrt()).expect("finite std");
    let he2 = Normal::new(0.0, (1.0 / cfg.hidden as f64).sqrt()).expect("finite std");
    let mut params = Params {
        w1: Tensor::new(vec![p, cfg.hidden], (0..p * cfg.hidden).map(|_| he1.sample(&mut rng)).collect()).expect("sized"),
        b1: Tensor::zeros(vec![cfg.hidden]),
        w2: Tensor::new(vec![cfg.hidden, 1], (0..cfg.hidden).map(|_| he2.sample(&mut rng)).collect()).expect("sized"),
        b2: Tensor::filled(vec![1], 0.0),
    };
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr));

    let mut batch = cfg.batch_size;
    if batch > tx.len() {
        log::warn!("batch size {batch} exceeds {} training rows; clamping", tx.len());
        batch = tx.len();
    }

    let mut model = AnnModel::from_parts(p, cfg.hidden, vec![0.0; p * cfg.hidden], vec![0.0; cfg.hidden], vec![0.0; cfg.hidden], 0.0)?;
    model.target = target;
    let mut best: Option<(f64, usize, Vec<f64>, Vec<f64>, Vec<f64>, f64)> = None;
    let mut idx: Vec<usize> = (0..tx.len()).collect();
    for epoch in 1..=cfg.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| tx[i].as_slice()).collect();
            let x = to_tensor(&rows);
            let (_, h, out) = forward(&params, &x);
            let m = chunk.len() as f64;
            let mut loss = 0.0;
            let grad: Vec<f64> = out
                .values()
                .iter()
                .zip(chunk)
                .map(|(o, &i)| {
                    let d = o - ty_s[i];
                    loss += d * d / m;
                    2.0 * d / m
                })
                .collect();
            if !loss.is_finite() {
                return Err(SurvivalError::NonFinite(epoch));
            }
            params.zero_grad();
            let gh = linear_backward(&h, &mut params.w2, &mut params.b2, &grad);
            let gpre = relu_backward(h.values(), &gh);
            linear_backward(&x, &mut params.w1, &mut params.b1, &gpre);
            opt.step(&mut params.list());
        }
        model.train_curve.push(mse_days(&params, &target, &tx, &ty));
        if !vx.is_empty() {
            let v = mse_days(&params, &target, &vx, &vy);
            model.validation_curve.push(v);
            if cfg.select_best_epoch && best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((
                    v,
                    epoch,
                    params.w1.values().to_vec(),
                    params.b1.values().to_vec(),
                    params.w2.values().to_vec(),
                    params.b2.values()[0],
                ));
            }
        }
        if let Some((mx, my)) = monitor {
            model.monitor_curve.push(mse_days(&params, &target, mx, my));
        }
    }
    model.set_params(&params);
    model.epoch = cfg.epochs;
    if let Some((_, epoch, w1, b1, w2, b2)) = best {
        model.w1 = w1;
        model.b1 = b1;
        model.w2 = w2;
        model.b2 = b2;
        model.epoch = epoch;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn hand_set_chain() {
        // one input, one hidden unit: out = 2 * relu(3x - 1) + 5
        let m = AnnModel::from_parts(1, 1, vec![3.0], vec![-1.0], vec![2.0], 5.0).unwrap();
        assert_eq!(m.predict_standardized(&[1.0]), 9.0);
        assert_eq!(m.predict_standardized(&[0.0]), 5.0);
        let c = AnnModel::from_parts(3, 4, vec![0.0; 12], vec![0.0; 4], vec![0.0; 4], 200.0).unwrap();
        assert_eq!(c.predict_standardized(&[1.0, -7.0, 3.0]), 200.0);
        assert!(AnnModel::from_parts(2, 2, vec![0.0; 3], vec![0.0; 2], vec![0.0; 2], 0.0).is_err());
    }

    fn linear_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.7..1.7)]).collect();
        let y = x.iter().map(|r| 3.0 * r[0]).collect();
        (x, y)
    }

    #[test]
    fn learns_one_feature_linear_law() {
        let (x, y) = linear_data(60, 1);
        let cfg = AnnConfig {
            hidden: 20,
            epochs: 300,
            lr: 1e-2,
            ..AnnConfig::default()
        };
        let m = train_ann(&x, &y, &cfg, 7, None).unwrap();
        let (hx, hy) = linear_data(40, 2);
        let mse = hx
            .iter()
            .zip(&hy)
            .map(|(r, t)| (m.predict_standardized(r) - t).powi(2))
            .sum::<f64>()
            / 40.0;
        assert!(mse < 1e-2, "held-out mse {mse}");
        assert_eq!(m.train_curve.len(), 300);
        assert!(m.train_curve[299] < m.train_curve[0]);
    }

    #[test]
    fn zero_learning_rate_keeps_initial_weights() {
        let (x, y) = linear_data(20, 3);
        let mut cfg = AnnConfig {
            hidden: 8,
            epochs: 1,
            lr: 0.0,
            ..AnnConfig::default()
        };
        let a = train_ann(&x, &y, &cfg, 5, None).unwrap();
        cfg.epochs = 30;
        let b = train_ann(&x, &y, &cfg, 5, None).unwrap();
        assert_eq!((a.w1.clone(), a.w2.clone(), a.b1.clone(), a.b2), (b.w1, b.w2, b.b1, b.b2));
        assert!(a.b1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (x, y) = linear_data(30, 4);
        let cfg = AnnConfig {
            epochs: 10,
            validation_fraction: 0.2,
            select_best_epoch: true,
            ..AnnConfig::default()
        };
        let a = train_ann(&x, &y, &cfg, 7, Some((&x[..5], &y[..5]))).unwrap();
        let b = train_ann(&x, &y, &cfg, 7, Some((&x[..5], &y[..5]))).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(a.validation_curve.len(), 10);
        assert_eq!(a.monitor_curve.len(), 10);
        let best = a.validation_curve.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(a.validation_curve[a.epoch - 1], best);
    }

    #[test]
    fn oversized_batch_is_clamped() {
        let (x, y) = linear_data(4, 5);
        let cfg = AnnConfig {
            epochs: 2,
            batch_size: 50,
            ..AnnConfig::default()
        };
        assert!(train_ann(&x, &y, &cfg, 0, None).is_ok());
        assert!(matches!(train_ann(&x[..1], &y[..1], &cfg, 0, None), Err(SurvivalError::TooFewRows { .. })));
    }

    #[test]
    fn non_finite_targets_fail() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let y = vec![1.0, f64::NAN, 2.0];
        let cfg = AnnConfig {
            epochs: 1,
            standardize_target: false,
            ..AnnConfig::default()
        };
        assert!(matches!(train_ann(&x, &y, &cfg, 0, None), Err(SurvivalError::NonFinite(1))));
    }
}
