//! Multinomial logistic regression over the survival buckets; predicts the
//! midpoint days of the most probable bucket.

use serde::{Deserialize, Serialize};

use super::eval::Buckets;
use super::SurvivalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    /// Days reported for the short, mid and long buckets.
    pub midpoints: [f64; 3],
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            midpoints: [150.0, 380.0, 600.0],
            iterations: 500,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// (3, p + 1); column 0 is the bias.
    pub weights: Vec<[f64; 3]>,
    pub midpoints: [f64; 3],
}

fn softmax(logits: [f64; 3]) -> [f64; 3] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

impl LogisticModel {
    /// Full-batch gradient descent on the L2-regularized cross-entropy, from
    /// zero weights (so the fit is deterministic without a seed).
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &LogisticConfig, buckets: &Buckets) -> Result<Self, SurvivalError> {
        if x.is_empty() || x.len() != y.len() {
            return Err(SurvivalError::Shape("logistic fit needs equal, nonzero row counts".into()));
        }
        let p = x[0].len();
        let n = x.len() as f64;
        let classes: Vec<usize> = y.iter().map(|&d| buckets.bucket(d)).collect();
        let mut w = vec![[0.0; 3]; p + 1];
        for _ in 0..cfg.iterations {
            let mut g = vec![[0.0; 3]; p + 1];
            for (row, &c) in x.iter().zip(&classes) {
                let prob = softmax(Self::logits_of(&w, row));
                let d: [f64; 3] = std::array::from_fn(|k| prob[k] - (k == c) as u8 as f64);
                for k in 0..3 {
                    g[0][k] += d[k] / n;
                    for (j, v) in row.iter().enumerate() {
                        g[j + 1][k] += d[k] * v / n;
                    }
                }
            }
            for (j, (wj, gj)) in w.iter_mut().zip(&g).enumerate() {
                for k in 0..3 {
                    let reg = if j == 0 { 0.0 } else { cfg.l2 * wj[k] };
                    wj[k] -= cfg.lr * (gj[k] + reg);
                }
            }
        }
        Ok(Self {
            weights: w,
            midpoints: cfg.midpoints,
        })
    }

    fn logits_of(w: &[[f64; 3]], row: &[f64]) -> [f64; 3] {
        let mut l = w[0];
        for (wj, v) in w[1..].iter().zip(row) {
            for k in 0..3 {
                l[k] += wj[k] * v;
            }
        }
        l
    }

    pub fn probabilities(&self, z: &[f64]) -> [f64; 3] {
        softmax(Self::logits_of(&self.weights, z))
    }

    pub fn predict_bucket(&self, z: &[f64]) -> usize {
        let p = self.probabilities(z);
        let mut best = 0;
        for k in 1..3 {
            if p[k] > p[best] {
                best = k;
            }
        }
        best
    }

    pub fn predict_standardized(&self, z: &[f64]) -> f64 {
        self.midpoints[self.predict_bucket(z)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_buckets_are_recovered() {
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![(i as f64 - 30.0) / 10.0]).collect();
        let y: Vec<f64> = (0..60).map(|i| 100.0 + 12.0 * i as f64).collect();
        let b = Buckets::default();
        let m = LogisticModel::fit(&x, &y, &LogisticConfig::default(), &b).unwrap();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(r, t)| m.predict_bucket(r) == b.bucket(**t))
            .count();
        assert!(correct >= 54, "{correct}/60");
        assert!([150.0, 380.0, 600.0].contains(&m.predict_standardized(&x[0])));
        let p = m.probabilities(&x[10]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
