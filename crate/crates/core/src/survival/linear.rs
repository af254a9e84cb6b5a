//! Ordinary least squares via the normal equations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Standardizer, SurvivalError};

/// Ridge added to the Gram matrix when it is not positive definite.
pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    /// Coefficients on standardized features.
    pub coef: Vec<f64>,
    pub ridge_used: bool,
}

impl LinearModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self, SurvivalError> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(SurvivalError::Shape("linear fit needs equal, nonzero row counts".into()));
        }
        let p = x[0].len();
        let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
        let target = DVector::from_column_slice(y);
        let gram = design.transpose() * &design;
        let rhs = design.transpose() * target;
        let (beta, ridge_used) = match gram.clone().cholesky() {
            Some(c) if c.l().diagonal().iter().all(|d| *d > 1e-7 * gram.diagonal().max().sqrt()) => (c.solve(&rhs), false),
            _ => {
                let mut g = gram;
                for i in 0..=p {
                    g[(i, i)] += RIDGE_FALLBACK;
                }
                let sol = match g.clone().cholesky() {
                    Some(c) => c.solve(&rhs),
                    None => g
                        .lu()
                        .solve(&rhs)
                        .ok_or_else(|| SurvivalError::Invalid("normal equations are singular".into()))?,
                };
                (sol, true)
            }
        };
        if ridge_used {
            log::warn!("singular Gram matrix; solved with ridge {RIDGE_FALLBACK}");
        }
        Ok(Self {
            intercept: beta[0],
            coef: beta.iter().skip(1).copied().collect(),
            ridge_used,
        })
    }

    pub fn predict_standardized(&self, z: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(z).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Intercept and coefficients in raw feature units.
    pub fn raw_coefficients(&self, s: &Standardizer) -> (f64, Vec<f64>) {
        let coef: Vec<f64> = self.coef.iter().zip(&s.scale).map(|(c, sc)| c / sc).collect();
        let shift: f64 = coef.iter().zip(&s.mean).map(|(c, m)| c * m).sum();
        (self.intercept - shift, coef)
    }
}
