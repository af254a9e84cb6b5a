//! Central finite-difference verification of backprop.
//!
//! ReLU and max-pool are piecewise linear. A perturbation that flips any
//! activation pattern or pooling winner straddles a point where the derivative
//! does not exist, so such coordinates are counted as kink crossings and left
//! out of the error statistic rather than compared.

use super::layers::BnMode;
use super::model::{loss_and_grad, ForwardCache, PixelNet};
use super::train::SampleBatch;
use super::NetError;

pub const STEP: f64 = 1e-5;
/// Denominator floor for relative error, so that vanishing gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
    pub checked: usize,
    pub kink_skips: usize,
    pub failures: Vec<GradMismatch>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn signature(cache: &ForwardCache) -> Vec<u64> {
    cache.decision_pattern()
}

fn eval(net: &PixelNet, batch: &SampleBatch, labels: &[usize]) -> Result<(f64, Vec<u64>), NetError> {
    let cache = net.forward(&batch.images, &batch.pixel_refs(), BnMode::Train)?;
    let (loss, _) = loss_and_grad(&cache, labels)?;
    Ok((loss, signature(&cache)))
}

/// Compares backprop against central differences for every parameter and every
/// input value of `batch`, with batch norm in train mode.
pub fn gradient_check(net: &PixelNet, batch: &SampleBatch, tolerance: f64) -> Result<GradCheckReport, NetError> {
    let labels = batch.flat_labels();
    let pixels = batch.pixel_refs();
    let mut analytic_net = net.clone();
    analytic_net.zero_grad();
    let cache = analytic_net.forward(&batch.images, &pixels, BnMode::Train)?;
    let base_sig = signature(&cache);
    let (_, grad) = loss_and_grad(&cache, &labels)?;
    let result = analytic_net.backward(&cache, &grad, true);
    let input_grad = result.input_grad.expect("requested");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kink_skips: 0,
        failures: Vec::new(),
        tolerance,
    };
    let record = |report: &mut GradCheckReport, tensor: &str, index: usize, analytic: f64, plus: (f64, Vec<u64>), minus: (f64, Vec<u64>)| {
        if plus.1 != base_sig || minus.1 != base_sig {
            report.kink_skips += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * STEP);
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        let m = GradMismatch {
            tensor: tensor.to_string(),
            index,
            analytic,
            numeric,
            rel_error: rel,
        };
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(m.clone());
        }
        if rel > tolerance {
            report.failures.push(m);
        }
    };

    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic_net
        .params()
        .iter()
        .map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut probe = net.clone();
    for (k, name) in names.iter().enumerate() {
        let n = analytic[k].len();
        for i in 0..n {
            let orig = probe.params_mut()[k].values()[i];
            probe.params_mut()[k].values_mut()[i] = orig + STEP;
            let plus = eval(&probe, batch, &labels)?;
            probe.params_mut()[k].values_mut()[i] = orig - STEP;
            let minus = eval(&probe, batch, &labels)?;
            probe.params_mut()[k].values_mut()[i] = orig;
            record(&mut report, name, i, analytic[k][i], plus, minus);
        }
    }

    let mut perturbed = batch.clone();
    for i in 0..batch.images.len() {
        let orig = batch.images.values()[i];
        perturbed.images.values_mut()[i] = orig + STEP;
        let plus = eval(net, &perturbed, &labels)?;
        perturbed.images.values_mut()[i] = orig - STEP;
        let minus = eval(net, &perturbed, &labels)?;
        perturbed.images.values_mut()[i] = orig;
        record(&mut report, "input", i, input_grad[i], plus, minus);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::spec::{NetSpec, PixelBlockSpec};
    use crate::net::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize, fractional: bool) -> SampleBatch {
        let vals = (0..b * 4 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..b {
            let c: Vec<(f64, f64)> = (0..5)
                .map(|_| {
                    if fractional {
                        (rng.random_range(0.0..(h - 1) as f64), rng.random_range(0.0..(w - 1) as f64))
                    } else {
                        (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64)
                    }
                })
                .collect();
            labels.push((0..5).map(|_| rng.random_range(0..4)).collect());
            coords.push(c);
        }
        SampleBatch {
            images: Tensor::new(vec![b, 4, h, w], vals).unwrap(),
            pixel_coords: coords,
            labels,
        }
    }

    fn spec(blocks: &[(usize, bool)], pools: Vec<usize>, taps: Vec<usize>) -> NetSpec {
        NetSpec {
            in_channels: 4,
            blocks: blocks.iter().map(|&(c, bn)| PixelBlockSpec::new(c, bn)).collect(),
            pool_after: pools,
            hypercolumn_taps: taps,
            mlp_widths: vec![6, 5, 4],
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    fn check(spec: NetSpec, fractional: bool, seed: u64) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PixelNet::new(spec, &mut rng).unwrap();
        let b = batch(&mut rng, 2, 8, 8, fractional);
        let r = gradient_check(&net, &b, 1e-4).unwrap();
        assert!(r.checked > 0);
        assert!(r.kink_skips * 20 < r.checked, "too many kinks: {r:?}");
        r
    }

    #[test]
    fn conv_only() {
        let r = check(spec(&[(3, false)], vec![], vec![0]), false, 1);
        assert!(r.passed(), "{:?}", r.worst);
    }

    #[test]
    fn with_train_mode_batch_norm() {
        let r = check(spec(&[(3, true), (2, true)], vec![], vec![0, 1]), false, 2);
        assert!(r.passed(), "{:?}", r.worst);
    }

    #[test]
    fn tap_on_pooled_layer_with_fractional_coords() {
        let r = check(spec(&[(3, true), (3, false), (2, true)], vec![0], vec![0, 2]), true, 3);
        assert!(r.passed(), "{:?}", r.worst);
    }

    #[test]
    fn detects_a_broken_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = PixelNet::new(spec(&[(2, false)], vec![], vec![0]), &mut rng).unwrap();
        let b = batch(&mut rng, 1, 4, 4, false);
        let good = gradient_check(&net, &b, 1e-4).unwrap();
        assert!(good.passed());
        // relative error is scale-free, so corrupt the analytic side by swapping labels
        net.mlp[2].b.values_mut()[0] += 1.0;
        let mut wrong = b.clone();
        wrong.labels[0][0] = (wrong.labels[0][0] + 1) % 4;
        let r = gradient_check(&net, &wrong, 1e-4).unwrap();
        assert!(r.passed(), "label changes keep backprop consistent");
        assert!(relative_error(1.0, 1.1) > 1e-4);
        assert_eq!(relative_error(0.0, 1e-9), 1e-9 / REL_FLOOR);
    }
}
