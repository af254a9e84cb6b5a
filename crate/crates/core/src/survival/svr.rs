//! ε-support vector regression with an RBF kernel, solved by SMO with
//! second-order working-set selection over the 2n-variable dual.

use serde::{Deserialize, Serialize};

use super::{SurvivalError, TargetScale};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrConfig {
    pub c: f64,
    /// Tube half-width in days; `None` means 0.1 × target standard deviation.
    pub epsilon: Option<f64>,
    /// RBF width; `None` means 1 / number of features.
    pub gamma: Option<f64>,
    /// Stop once the maximal KKT violation falls below this.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Solve on z-scored targets so `c` is independent of the day scale.
    pub standardize_target: bool,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epsilon: None,
            gamma: None,
            tolerance: 1e-3,
            max_iter: 10_000_000,
            standardize_target: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub support: Vec<Vec<f64>>,
    /// α_i − α*_i for each support vector.
    pub coef: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub target: TargetScale,
    pub kkt_gap: f64,
    pub iterations: usize,
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d).exp()
}

const TAU: f64 = 1e-12;

/// Dual solution of the ε-SVR: `alpha` holds the 2n box-constrained
/// variables (α then α*), `gap` the final maximal violation m(α) − M(α).
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub gap: f64,
    pub iterations: usize,
}

/// Minimizes ½βᵀQβ + pᵀβ subject to Σ s_t β_t = 0, 0 ≤ β ≤ C, where
/// s = (+1…, −1…), Q_st = s_s s_t K(s mod n, t mod n), p = (ε − y, ε + y).
pub fn solve_dual(k: &[Vec<f64>], y: &[f64], c: f64, eps: f64, tol: f64, max_iter: usize) -> DualSolution {
    let n = y.len();
    let l = 2 * n;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let q = |s: usize, t: usize| sign(s) * sign(t) * k[s % n][t % n];
    let mut alpha = vec![0.0; l];
    let mut grad: Vec<f64> = (0..l).map(|t| if t < n { eps - y[t] } else { eps + y[t - n] }).collect();
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let mut iter = 0;
    let mut gap;
    loop {
        // i maximizes −s_t G_t over I_up
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..l {
            let up = if sign(t) > 0.0 { !upper(alpha[t]) } else { !lower(alpha[t]) };
            if up && -sign(t) * grad[t] >= gmax {
                gmax = -sign(t) * grad[t];
                i = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..l {
            let low = if sign(t) > 0.0 { !lower(alpha[t]) } else { !upper(alpha[t]) };
            if !low {
                continue;
            }
            let v = sign(t) * grad[t];
            gmax2 = gmax2.max(v);
            if i == usize::MAX {
                continue;
            }
            let diff = gmax + v;
            if diff > 0.0 {
                let quad = q(i, i) + q(t, t) - 2.0 * sign(i) * sign(t) * q(i, t);
                let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        gap = gmax + gmax2;
        if gap < tol || j == usize::MAX || iter >= max_iter {
            break;
        }
        iter += 1;

        let (ai, aj) = (alpha[i], alpha[j]);
        let qij = q(i, j);
        if sign(i) != sign(j) {
            let quad = (q(i, i) + q(j, j) + 2.0 * qij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            let (mut ni, mut nj) = (ai + delta, aj + delta);
            if diff > 0.0 {
                if nj < 0.0 {
                    nj = 0.0;
                    ni = diff;
                }
            } else if ni < 0.0 {
                ni = 0.0;
                nj = -diff;
            }
            if diff > 0.0 {
                if ni > c {
                    ni = c;
                    nj = c - diff;
                }
            } else if nj > c {
                nj = c;
                ni = c + diff;
            }
            alpha[i] = ni;
            alpha[j] = nj;
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * qij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            let (mut ni, mut nj) = (ai - delta, aj + delta);
            if sum > c {
                if ni > c {
                    ni = c;
                    nj = sum - c;
                }
            } else if nj < 0.0 {
                nj = 0.0;
                ni = sum;
            }
            if sum > c {
                if nj > c {
                    nj = c;
                    ni = sum - c;
                }
            } else if ni < 0.0 {
                ni = 0.0;
                nj = sum;
            }
            alpha[i] = ni;
            alpha[j] = nj;
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(i, t) * di + q(j, t) * dj;
        }
    }

    let (mut ub, mut lb, mut free, mut sum_free) = (f64::INFINITY, f64::NEG_INFINITY, 0usize, 0.0);
    for t in 0..l {
        let yg = sign(t) * grad[t];
        if upper(alpha[t]) {
            if sign(t) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if sign(t) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { 0.5 * (ub + lb) };
    DualSolution {
        alpha,
        rho,
        gap,
        iterations: iter,
    }
}

impl SvrModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &SvrConfig) -> Result<Self, SurvivalError> {
        if x.is_empty() || x.len() != y.len() {
            return Err(SurvivalError::Shape("svr fit needs equal, nonzero row counts".into()));
        }
        if !(cfg.c > 0.0) {
            return Err(SurvivalError::Invalid("svr c must be positive".into()));
        }
        let p = x[0].len().max(1);
        let gamma = cfg.gamma.unwrap_or(1.0 / p as f64);
        let target = if cfg.standardize_target {
            TargetScale::fit(y)
        } else {
            TargetScale::identity()
        };
        let ys: Vec<f64> = y.iter().map(|&v| target.forward(v)).collect();
        let eps = match cfg.epsilon {
            Some(e) => e / target.scale,
            None => {
                let mean = y.iter().sum::<f64>() / y.len() as f64;
                let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
                0.1 * std / target.scale
            }
        };
        let k: Vec<Vec<f64>> = x.iter().map(|a| x.iter().map(|b| rbf(a, b, gamma)).collect()).collect();
        let sol = solve_dual(&k, &ys, cfg.c, eps, cfg.tolerance, cfg.max_iter);
        if sol.gap >= cfg.tolerance && sol.iterations >= cfg.max_iter {
            log::warn!("SMO stopped at the iteration cap with KKT gap {}", sol.gap);
        }
        let n = y.len();
        let mut support = Vec::new();
        let mut coef = Vec::new();
        for i in 0..n {
            let c = sol.alpha[i] - sol.alpha[i + n];
            if c != 0.0 {
                support.push(x[i].clone());
                coef.push(c);
            }
        }
        Ok(Self {
            support,
            coef,
            rho: sol.rho,
            gamma,
            target,
            kkt_gap: sol.gap,
            iterations: sol.iterations,
        })
    }

    pub fn predict_standardized(&self, z: &[f64]) -> f64 {
        let f: f64 = self.support.iter().zip(&self.coef).map(|(s, c)| c * rbf(s, z, self.gamma)).sum::<f64>() - self.rho;
        self.target.inverse(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent KKT check: rebuild the gradient from α alone and report
    /// the maximal violation.
    fn kkt_violation(k: &[Vec<f64>], y: &[f64], c: f64, eps: f64, alpha: &[f64]) -> f64 {
        let n = y.len();
        let s = |t: usize| if t < n { 1.0 } else { -1.0 };
        let beta: Vec<f64> = (0..n).map(|i| alpha[i] - alpha[i + n]).collect();
        let mut up = f64::NEG_INFINITY;
        let mut low = f64::INFINITY;
        for t in 0..2 * n {
            let f: f64 = (0..n).map(|m| beta[m] * k[t % n][m]).sum();
            let p = if t < n { eps - y[t] } else { eps + y[t - n] };
            let g = s(t) * f + p;
            let a = alpha[t];
            let in_up = if s(t) > 0.0 { a < c } else { a > 0.0 };
            let in_low = if s(t) > 0.0 { a > 0.0 } else { a < c };
            if in_up {
                up = up.max(-s(t) * g);
            }
            if in_low {
                low = low.min(-s(t) * g);
            }
        }
        up - low
    }

    #[test]
    fn fits_identity_within_tube() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 19.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0]).collect();
        let cfg = SvrConfig {
            c: 10.0,
            epsilon: Some(0.01),
            gamma: Some(1.0),
            ..Default::default()
        };
        let m = SvrModel::fit(&x, &y, &cfg).unwrap();
        for (r, t) in x.iter().zip(&y) {
            assert!((m.predict_standardized(r) - t).abs() <= 0.01 + 0.05);
        }
        assert!(m.kkt_gap < 1e-3);
    }

    #[test]
    fn wide_tube_predicts_the_center() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y = vec![5.0; 10];
        let m = SvrModel::fit(&x, &y, &SvrConfig::default()).unwrap();
        assert!(m.coef.is_empty());
        assert!((m.predict_standardized(&[3.0]) - 5.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kkt_residual_small_at_convergence(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -3.0f64..3.0), 5..40),
            c in 0.1f64..10.0,
            eps in 0.0f64..0.5,
        ) {
            let x: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.2).collect();
            let k: Vec<Vec<f64>> = x.iter().map(|a| x.iter().map(|b| rbf(a, b, 0.5)).collect()).collect();
            let sol = solve_dual(&k, &y, c, eps, 1e-3, 10_000_000);
            prop_assert!(sol.gap < 1e-3);
            prop_assert!(sol.alpha.iter().all(|&a| (0.0..=c).contains(&a)));
            let balance: f64 = (0..y.len()).map(|i| sol.alpha[i] - sol.alpha[i + y.len()]).sum();
            prop_assert!(balance.abs() < 1e-9);
            prop_assert!(kkt_violation(&k, &y, c, eps, &sol.alpha) <= 1e-3 + 1e-9);
        }
    }
}
