//! King-OLS estimator: nonlinear least squares on the accounting identity
//! with transition probabilities on a multinomial-logit scale, so the
//! estimates are always inside (0,1) and may depend on unit covariates.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{EcoError, Result};
use crate::goodman;
use crate::model::{CovariateVector, DatasetMeta, TransitionMatrix, UnitAggregate};
use crate::optim::{bfgs, BfgsOptions};

/// Logit-scale parameters shared with the Brown-Payne estimator: intercepts
/// gamma (R x (C-1)) and covariate slopes delta (R x (C-1) x q), with the
/// last column as the softmax reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub gamma: Vec<Vec<f64>>,
    pub delta: Vec<Vec<Vec<f64>>>,
}

impl LinkParams {
    pub fn zeros(r: usize, c: usize, q: usize) -> Self {
        Self {
            gamma: vec![vec![0.0; c - 1]; r],
            delta: vec![vec![vec![0.0; q]; c - 1]; r],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.gamma.len()
    }

    pub fn n_cols(&self) -> usize {
        self.gamma[0].len() + 1
    }

    pub fn n_covariates(&self) -> usize {
        self.delta[0][0].len()
    }

    pub fn n_params(&self) -> usize {
        let r = self.n_rows();
        let cm1 = self.n_cols() - 1;
        r * cm1 * (1 + self.n_covariates())
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for row in &self.gamma {
            out.extend_from_slice(row);
        }
        for row in &self.delta {
            for cell in row {
                out.extend_from_slice(cell);
            }
        }
        out
    }

    pub fn unpack(flat: &[f64], r: usize, c: usize, q: usize) -> Self {
        let mut it = flat.iter().copied();
        let gamma = (0..r)
            .map(|_| (0..c - 1).map(|_| it.next().unwrap()).collect())
            .collect();
        let delta = (0..r)
            .map(|_| {
                (0..c - 1)
                    .map(|_| (0..q).map(|_| it.next().unwrap()).collect())
                    .collect()
            })
            .collect();
        Self { gamma, delta }
    }

    /// Per-unit transition matrix: softmax over columns with reference C.
    pub fn unit_pi(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let r = self.n_rows();
        let c = self.n_cols();
        let mut pi = vec![vec![0.0; c]; r];
        for i in 0..r {
            let mut logits = Vec::with_capacity(c);
            for j in 0..c - 1 {
                let mut eta = self.gamma[i][j];
                for (m, &zm) in z.iter().enumerate() {
                    eta += self.delta[i][j][m] * zm;
                }
                logits.push(eta);
            }
            logits.push(0.0);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..c {
                pi[i][j] = exps[j] / s;
            }
        }
        pi
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KingFit {
    pub params: LinkParams,
    /// population-average transition matrix (mean of unit-level matrices)
    pub pi_hat: TransitionMatrix,
    /// final sum of squared residuals
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub(crate) struct PreparedData {
    pub t: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub n: Vec<f64>,
    pub unit_ids: Vec<String>,
}

pub(crate) fn prepare(
    units: &[UnitAggregate],
    covariates: Option<&[CovariateVector]>,
    weighted: bool,
) -> Result<PreparedData> {
    let by_id: BTreeMap<&str, &CovariateVector> = covariates
        .unwrap_or(&[])
        .iter()
        .map(|cv| (cv.unit_id.as_str(), cv))
        .collect();
    let q = covariates
        .and_then(|c| c.first())
        .map_or(0, |cv| cv.z.len());

    let mut data = PreparedData {
        t: vec![],
        v: vec![],
        w: vec![],
        z: vec![],
        n: vec![],
        unit_ids: vec![],
    };
    for u in units {
        if u.n == 0 {
            continue;
        }
        let p = u.proportions()?;
        let z = if q > 0 {
            let cv = by_id.get(u.unit_id.as_str()).ok_or_else(|| {
                EcoError::InvalidData(format!("unit `{}` has no covariates", u.unit_id))
            })?;
            if cv.z.len() != q {
                return Err(EcoError::DimensionMismatch(format!(
                    "unit `{}` has {} covariates, expected {q}",
                    u.unit_id,
                    cv.z.len()
                )));
            }
            cv.z.clone()
        } else {
            Vec::new()
        };
        data.t.push(p.t);
        data.v.push(p.v);
        data.w.push(if weighted { u.n as f64 } else { 1.0 });
        data.z.push(z);
        data.n.push(u.n as f64);
        data.unit_ids.push(u.unit_id.clone());
    }
    if data.t.is_empty() {
        return Err(EcoError::InvalidData("no usable units".into()));
    }
    if q > 0 {
        // covariate design [1 | z] must have full rank
        let n = data.z.len();
        let m = DMatrix::from_fn(n, q + 1, |r, c| if c == 0 { 1.0 } else { data.z[r][c - 1] });
        let svd = m.svd(false, false);
        let smax = svd.singular_values.max();
        if svd.singular_values.iter().any(|&s| s < smax * 1e-10) {
            return Err(EcoError::RankDeficient(
                "covariate columns are collinear".into(),
            ));
        }
    }
    Ok(data)
}

/// Least-squares objective and its analytic gradient over packed parameters.
pub(crate) fn objective_and_gradient(
    flat: &[f64],
    data: &PreparedData,
    r: usize,
    c: usize,
    q: usize,
) -> (f64, Vec<f64>) {
    let theta = LinkParams::unpack(flat, r, c, q);
    let mut f = 0.0;
    let mut grad = vec![0.0; flat.len()];
    let gamma_len = r * (c - 1);

    for u in 0..data.t.len() {
        let pi = theta.unit_pi(&data.z[u]);
        let t = &data.t[u];
        let w = data.w[u];
        let mut resid = vec![0.0; c - 1];
        for j in 0..c - 1 {
            let mut mu = 0.0;
            for i in 0..r {
                mu += t[i] * pi[i][j];
            }
            resid[j] = data.v[u][j] - mu;
            f += w * resid[j] * resid[j];
        }
        for k in 0..r {
            if t[k] == 0.0 {
                continue;
            }
            // sum_j r_j pi_kj over non-reference columns
            let mut rp = 0.0;
            for j in 0..c - 1 {
                rp += resid[j] * pi[k][j];
            }
            for l in 0..c - 1 {
                let g = -2.0 * w * t[k] * pi[k][l] * (resid[l] - rp);
                grad[k * (c - 1) + l] += g;
                for m in 0..q {
                    grad[gamma_len + (k * (c - 1) + l) * q + m] += g * data.z[u][m];
                }
            }
        }
    }
    (f, grad)
}

/// Analytic gradient of the King-OLS objective at `theta`; the test suite
/// checks it against central finite differences.
pub fn king_gradient(
    theta: &LinkParams,
    units: &[UnitAggregate],
    covariates: Option<&[CovariateVector]>,
) -> Result<Vec<f64>> {
    let data = prepare(units, covariates, false)?;
    let (r, c, q) = (theta.n_rows(), theta.n_cols(), theta.n_covariates());
    Ok(objective_and_gradient(&theta.pack(), &data, r, c, q).1)
}

/// Value of the King-OLS objective at `theta`.
pub fn king_objective(
    theta: &LinkParams,
    units: &[UnitAggregate],
    covariates: Option<&[CovariateVector]>,
) -> Result<f64> {
    let data = prepare(units, covariates, false)?;
    let (r, c, q) = (theta.n_rows(), theta.n_cols(), theta.n_covariates());
    Ok(objective_and_gradient(&theta.pack(), &data, r, c, q).0)
}

/// Deterministic initialization: truncated Goodman estimates clipped to
/// [0.01, 0.99] and mapped through the multinomial logit; zero slopes.
pub fn initial_params(units: &[UnitAggregate], meta: &DatasetMeta, q: usize) -> LinkParams {
    let (r, c) = (meta.n_rows, meta.n_cols);
    let mut init = LinkParams::zeros(r, c, q);
    if let Ok(fit) = goodman::fit_goodman(units, meta, false, true) {
        let est = fit.estimate();
        for i in 0..r {
            let reference = est[i][c - 1].clamp(0.01, 0.99);
            for j in 0..c - 1 {
                init.gamma[i][j] = (est[i][j].clamp(0.01, 0.99) / reference).ln();
            }
        }
    }
    init
}

pub fn fit_king_ols(
    units: &[UnitAggregate],
    meta: &DatasetMeta,
    covariates: Option<&[CovariateVector]>,
    init: Option<LinkParams>,
    weighted: bool,
) -> Result<KingFit> {
    let (r, c) = (meta.n_rows, meta.n_cols);
    let data = prepare(units, covariates, weighted)?;
    let q = data.z.first().map_or(0, |z| z.len());
    let n_params = r * (c - 1) * (1 + q);
    if data.t.len() < n_params {
        return Err(EcoError::Underdetermined {
            n: data.t.len(),
            p: n_params,
        });
    }
    let init = init.unwrap_or_else(|| initial_params(units, meta, q));
    let res = bfgs(
        |x| objective_and_gradient(x, &data, r, c, q),
        &init.pack(),
        BfgsOptions::default(),
    );
    let params = LinkParams::unpack(&res.x, r, c, q);

    // population-average matrix
    let n_units = data.t.len() as f64;
    let mut acc = vec![vec![0.0; c]; r];
    for z in &data.z {
        let pi = params.unit_pi(z);
        for i in 0..r {
            for j in 0..c {
                acc[i][j] += pi[i][j] / n_units;
            }
        }
    }
    for row in acc.iter_mut() {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }

    Ok(KingFit {
        params,
        pi_hat: TransitionMatrix::new(acc)?,
        objective: res.value,
        converged: res.converged,
        iterations: res.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_difference_gradient;
    use crate::synth::{generate, paradox_fixture, GeneratorConfig};

    #[test]
    fn constant_p_dataset_recovered() {
        let pi = vec![vec![0.7, 0.3], vec![0.25, 0.75]];
        let cfg = GeneratorConfig::no_bias(80, 4, pi.clone(), 2000.0, 11);
        let pop = generate(&cfg).unwrap();
        let fit = fit_king_ols(&pop.units, &pop.meta, None, None, false).unwrap();
        // sampling noise at n ~ 2000 keeps the optimum near truth
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (fit.pi_hat.get(i, j) - pi[i][j]).abs() < 0.01,
                    "cell ({i},{j}) = {} vs {}",
                    fit.pi_hat.get(i, j),
                    pi[i][j]
                );
            }
        }
        assert!(fit.converged);
    }

    #[test]
    fn paradox_matches_goodman_exact_solve() {
        let pop = paradox_fixture(20).unwrap();
        let fit = fit_king_ols(&pop.units, &pop.meta, None, None, false).unwrap();
        assert!((fit.pi_hat.get(0, 1) - 0.85).abs() < 1e-3);
        assert!((fit.pi_hat.get(1, 1) - 0.10).abs() < 1e-3);
        assert!(fit.objective < 1e-12);
    }

    #[test]
    fn single_row_reduces_to_mean() {
        let units = vec![
            UnitAggregate::new("a", vec![100], vec![40, 60]).unwrap(),
            UnitAggregate::new("b", vec![100], vec![80, 20]).unwrap(),
            UnitAggregate::new("c", vec![100], vec![60, 40]).unwrap(),
        ];
        let ids: Vec<String> = units.iter().map(|u| u.unit_id.clone()).collect();
        let meta = DatasetMeta::unlabeled(1, 2, &ids).unwrap();
        let fit = fit_king_ols(&units, &meta, None, None, false).unwrap();
        assert!((fit.pi_hat.get(0, 0) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn gradient_symmetry_at_zero() {
        // symmetric two-unit data: swapping the two rows maps one gamma
        // coordinate onto the other, so the gradient components agree
        let units = vec![
            UnitAggregate::new("a", vec![30, 70], vec![40, 60]).unwrap(),
            UnitAggregate::new("b", vec![70, 30], vec![40, 60]).unwrap(),
        ];
        let theta = LinkParams::zeros(2, 2, 0);
        let g = king_gradient(&theta, &units, None).unwrap();
        assert!((g[0] - g[1]).abs() < 1e-12, "{g:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = GeneratorConfig::no_bias(
            12,
            2,
            vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.5, 0.5]],
            150.0,
            5,
        );
        let pop = generate(&cfg).unwrap();
        let theta = LinkParams {
            gamma: vec![vec![0.4], vec![-0.3], vec![0.1]],
            delta: vec![vec![vec![]], vec![vec![]], vec![vec![]]],
        };
        let analytic = king_gradient(&theta, &pop.units, None).unwrap();
        let flat = theta.pack();
        let fd = finite_difference_gradient(
            |x| {
                let th = LinkParams::unpack(x, 3, 2, 0);
                king_objective(&th, &pop.units, None).unwrap()
            },
            &flat,
            1e-6,
        );
        for (a, f) in analytic.iter().zip(&fd) {
            let scale = a.abs().max(f.abs()).max(1e-8);
            assert!((a - f).abs() / scale < 1e-5, "{analytic:?} vs {fd:?}");
        }
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let cfg =
            GeneratorConfig::no_bias(60, 3, vec![vec![0.65, 0.35], vec![0.2, 0.8]], 1000.0, 3);
        let pop = generate(&cfg).unwrap();
        let fit = fit_king_ols(&pop.units, &pop.meta, None, None, false).unwrap();
        let g = king_gradient(&fit.params, &pop.units, None).unwrap();
        let norm = g.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn multi_start_objectives_agree() {
        let cfg = GeneratorConfig::no_bias(100, 5, vec![vec![0.7, 0.3], vec![0.3, 0.7]], 800.0, 17);
        let pop = generate(&cfg).unwrap();
        let starts = [
            LinkParams {
                gamma: vec![vec![0.0], vec![0.0]],
                delta: vec![vec![vec![]]; 2],
            },
            LinkParams {
                gamma: vec![vec![1.0], vec![-1.0]],
                delta: vec![vec![vec![]]; 2],
            },
            LinkParams {
                gamma: vec![vec![-0.5], vec![0.5]],
                delta: vec![vec![vec![]]; 2],
            },
            LinkParams {
                gamma: vec![vec![2.0], vec![1.0]],
                delta: vec![vec![vec![]]; 2],
            },
            LinkParams {
                gamma: vec![vec![-2.0], vec![-1.0]],
                delta: vec![vec![vec![]]; 2],
            },
        ];
        let objectives: Vec<f64> = starts
            .iter()
            .map(|s| {
                fit_king_ols(&pop.units, &pop.meta, None, Some(s.clone()), false)
                    .unwrap()
                    .objective
            })
            .collect();
        let lo = objectives.iter().cloned().fold(f64::INFINITY, f64::min);
        for o in &objectives {
            assert!((o - lo).abs() < 1e-6, "{objectives:?}");
        }
    }

    #[test]
    fn objective_not_above_init() {
        let pop = paradox_fixture(40).unwrap();
        let init = LinkParams::zeros(2, 2, 0);
        let data = prepare(&pop.units, None, false).unwrap();
        let (f0, _) = objective_and_gradient(&init.pack(), &data, 2, 2, 0);
        let fit = fit_king_ols(&pop.units, &pop.meta, None, Some(init), false).unwrap();
        assert!(fit.objective <= f0 + 1e-15);
    }
}
