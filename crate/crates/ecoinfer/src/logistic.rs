//! Binomial logistic regression by IRLS, with Wald inference.

use nalgebra::{DMatrix, DVector};

use crate::error::{EcoError, Result};

/// |beta| beyond this is treated as separation
const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub beta: Vec<f64>,
    /// inverse Fisher information; None under separation
    pub cov: Option<DMatrix<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub separation: bool,
}

impl LogisticFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        match &self.cov {
            Some(c) => (0..self.beta.len()).map(|k| c[(k, k)].sqrt()).collect(),
            None => vec![f64::INFINITY; self.beta.len()],
        }
    }

    /// Two-sided Wald p-values.
    pub fn p_values(&self) -> Vec<f64> {
        self.beta
            .iter()
            .zip(self.standard_errors())
            .map(|(&b, se)| {
                if !se.is_finite() || se == 0.0 {
                    1.0
                } else {
                    2.0 * normal_sf((b / se).abs())
                }
            })
            .collect()
    }
}

pub fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Upper tail of the standard normal, via the complementary error function.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

// Abramowitz & Stegun 7.1.26-style rational approximation, |error| < 1.5e-7,
// refined by one step of the continued-fraction tail for large z.
fn erfc(x: f64) -> f64 {
    let ax = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * ax);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let v = poly * (-ax * ax).exp();
    if x >= 0.0 {
        v
    } else {
        2.0 - v
    }
}

/// Fit successes/trials ~ Binomial(trials, inv_logit(X beta)) by IRLS.
pub fn fit_binomial_logistic(
    design: &DMatrix<f64>,
    trials: &[f64],
    successes: &[f64],
) -> Result<LogisticFit> {
    let n = design.nrows();
    let p = design.ncols();
    if trials.len() != n || successes.len() != n {
        return Err(EcoError::DimensionMismatch(format!(
            "design has {n} rows, {} trials, {} successes",
            trials.len(),
            successes.len()
        )));
    }
    if n < p {
        return Err(EcoError::Underdetermined { n, p });
    }

    let mut beta = DVector::<f64>::zeros(p);
    let mut converged = false;
    let mut separation = false;
    let mut loglik = f64::NEG_INFINITY;

    for _ in 0..100 {
        let eta = design * &beta;
        let mut info = DMatrix::<f64>::zeros(p, p);
        let mut score = DVector::<f64>::zeros(p);
        let mut ll = 0.0;
        for r in 0..n {
            let mu = inv_logit(eta[r]);
            let w = trials[r] * mu * (1.0 - mu);
            let resid = successes[r] - trials[r] * mu;
            ll += successes[r] * eta[r] - trials[r] * ln_1p_exp(eta[r]);
            let row = design.row(r);
            for a in 0..p {
                score[a] += row[a] * resid;
                for b in 0..p {
                    info[(a, b)] += row[a] * w * row[b];
                }
            }
        }
        let chol = match info.clone().cholesky() {
            Some(c) => c,
            None => {
                separation = true;
                break;
            }
        };
        let delta = chol.solve(&score);
        beta += &delta;
        loglik = ll;
        if beta.amax() > SEPARATION_BOUND {
            separation = true;
            break;
        }
        if delta.amax() < 1e-10 {
            converged = true;
            break;
        }
    }

    let cov = if separation {
        None
    } else {
        let eta = design * &beta;
        let mut info = DMatrix::<f64>::zeros(p, p);
        for r in 0..n {
            let mu = inv_logit(eta[r]);
            let w = trials[r] * mu * (1.0 - mu);
            let row = design.row(r);
            for a in 0..p {
                for b in 0..p {
                    info[(a, b)] += row[a] * w * row[b];
                }
            }
        }
        info.try_inverse()
    };

    Ok(LogisticFit {
        beta: beta.as_slice().to_vec(),
        cov,
        loglik,
        converged,
        separation,
    })
}

/// log(1 + exp(x)) without overflow.
pub fn ln_1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
