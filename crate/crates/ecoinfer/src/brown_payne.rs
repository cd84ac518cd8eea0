//! Revised Brown-Payne estimator: the King-OLS mean model combined with an
//! overdispersed multinomial working covariance, maximized as a Gaussian
//! quasi-likelihood by alternating Gauss-Newton steps for the link
//! parameters and profile updates for the dispersion scalars.
//!
//! The covariance inflates the multinomial covariance of the mean by
//! `c_u = 1 + (phi + tau) (n_u - 1) w_u` with `w_u = sum_i t_ui^2`, a
//! Dirichlet-multinomial heterogeneity term plus an additive cluster
//! surrogate sharing the same size structure. Only the sum `phi + tau`
//! enters the working covariance, so a free fit attributes the whole
//! estimated dispersion to `phi` and leaves `tau` at its fixed value.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EcoError, Result};
use crate::king::{initial_params, prepare, LinkParams, PreparedData};
use crate::model::{CovariateVector, DatasetMeta, TransitionMatrix, UnitAggregate};
use crate::optim::golden_section;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BPVarianceSpec {
    /// Dirichlet heterogeneity, in [0, 1)
    pub phi: f64,
    /// cluster-component weight, >= 0
    pub tau: f64,
}

impl BPVarianceSpec {
    pub fn inflation(&self, n: f64, t: &[f64]) -> f64 {
        let w: f64 = t.iter().map(|ti| ti * ti).sum();
        1.0 + (self.phi + self.tau) * (n - 1.0) * w
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BPDiagnostics {
    /// units whose working covariance needed a diagonal jitter
    pub jittered_units: usize,
    pub phi_at_boundary: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BPFit {
    pub params: LinkParams,
    pub variance: BPVarianceSpec,
    pub pi_hat: TransitionMatrix,
    /// sandwich standard errors for the packed link parameters
    pub se: Vec<f64>,
    pub quasi_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub diagnostics: BPDiagnostics,
}

/// Model mean of the column proportions: mu_j = sum_i t_ui pi_uij.
pub fn bp_mean(theta: &LinkParams, t: &[f64], z: &[f64]) -> Vec<f64> {
    let pi = theta.unit_pi(z);
    let c = theta.n_cols();
    let mut mu = vec![0.0; c];
    for (i, ti) in t.iter().enumerate() {
        for j in 0..c {
            mu[j] += ti * pi[i][j];
        }
    }
    mu
}

/// Working covariance of the observed column proportions of a unit:
/// the multinomial covariance of the mean scaled by the inflation factor.
pub fn bp_covariance(
    theta: &LinkParams,
    variance: &BPVarianceSpec,
    t: &[f64],
    n: f64,
    z: &[f64],
) -> DMatrix<f64> {
    let mu = bp_mean(theta, t, z);
    let c = mu.len();
    let scale = variance.inflation(n, t) / n;
    DMatrix::from_fn(c, c, |a, b| {
        let base = if a == b {
            mu[a] * (1.0 - mu[a])
        } else {
            -mu[a] * mu[b]
        };
        scale * base
    })
}

struct QuasiModel<'a> {
    data: &'a PreparedData,
    r: usize,
    c: usize,
    q: usize,
}

impl QuasiModel<'_> {
    /// Reduced (C-1) mean, residual and covariance for one unit.
    fn unit_parts(
        &self,
        theta: &LinkParams,
        spec: &BPVarianceSpec,
        u: usize,
    ) -> (Vec<Vec<f64>>, DVector<f64>, DMatrix<f64>) {
        let t = &self.data.t[u];
        let z = &self.data.z[u];
        let pi = theta.unit_pi(z);
        let cm1 = self.c - 1;
        let mut mu = vec![0.0; self.c];
        for (i, ti) in t.iter().enumerate() {
            for j in 0..self.c {
                mu[j] += ti * pi[i][j];
            }
        }
        let resid = DVector::from_fn(cm1, |j, _| self.data.v[u][j] - mu[j]);
        let scale = spec.inflation(self.data.n[u], t) / self.data.n[u];
        let v = DMatrix::from_fn(cm1, cm1, |a, b| {
            let base = if a == b {
                mu[a] * (1.0 - mu[a])
            } else {
                -mu[a] * mu[b]
            };
            scale * base
        });
        (pi, resid, v)
    }

    /// Jacobian of the reduced mean with respect to the packed parameters.
    fn unit_jacobian(&self, pi: &[Vec<f64>], u: usize) -> DMatrix<f64> {
        let cm1 = self.c - 1;
        let p = self.r * cm1 * (1 + self.q);
        let t = &self.data.t[u];
        let z = &self.data.z[u];
        let gamma_len = self.r * cm1;
        let mut jac = DMatrix::<f64>::zeros(cm1, p);
        for j in 0..cm1 {
            for k in 0..self.r {
                if t[k] == 0.0 {
                    continue;
                }
                for l in 0..cm1 {
                    let d = t[k] * pi[k][j] * ((j == l) as u8 as f64 - pi[k][l]);
                    jac[(j, k * cm1 + l)] += d;
                    for m in 0..self.q {
                        jac[(j, gamma_len + (k * cm1 + l) * self.q + m)] += d * z[m];
                    }
                }
            }
        }
        jac
    }

    /// Gaussian quasi-log-likelihood (up to the 2 pi constant), with jitter
    /// accounting for numerically non-PSD covariances.
    fn quasi_loglik(&self, theta: &LinkParams, spec: &BPVarianceSpec) -> (f64, usize) {
        let mut q = 0.0;
        let mut jittered = 0;
        for u in 0..self.data.t.len() {
            let (_, resid, mut v) = self.unit_parts(theta, spec, u);
            let chol = loop {
                match v.clone().cholesky() {
                    Some(c) => break c,
                    None => {
                        jittered += 1;
                        for d in 0..v.nrows() {
                            v[(d, d)] += 1e-10;
                        }
                    }
                }
            };
            let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            let sol = chol.solve(&resid);
            q += -0.5 * (logdet + resid.dot(&sol));
        }
        (q, jittered)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fit_brown_payne(
    units: &[UnitAggregate],
    meta: &DatasetMeta,
    covariates: Option<&[CovariateVector]>,
    fix_phi: Option<f64>,
    fix_tau: Option<f64>,
) -> Result<BPFit> {
    let (r, c) = (meta.n_rows, meta.n_cols);
    let data = prepare(units, covariates, false)?;
    let q = data.z.first().map_or(0, |z| z.len());
    let n_params = r * (c - 1) * (1 + q);
    if data.t.len() < n_params {
        return Err(EcoError::Underdetermined {
            n: data.t.len(),
            p: n_params,
        });
    }
    let model = QuasiModel {
        data: &data,
        r,
        c,
        q,
    };

    // with covariates, warm-start from the covariate-free fit: the extra
    // slope directions make the weak-association surface multimodal and a
    // cold start can wander to degenerate cell allocations
    let tau = fix_tau.unwrap_or(0.0);
    let (mut theta, phi_init) = if q > 0 {
        let warm = fit_brown_payne(units, meta, None, fix_phi, fix_tau)?;
        let mut t = LinkParams::zeros(r, c, q);
        t.gamma = warm.params.gamma.clone();
        (t, warm.variance.phi)
    } else {
        (initial_params(units, meta, q), 0.02)
    };
    let mut spec = BPVarianceSpec {
        phi: fix_phi.unwrap_or(phi_init),
        tau,
    };
    let (mut q_cur, mut jittered) = model.quasi_loglik(&theta, &spec);
    let mut converged = false;
    let mut iterations = 0;

    for outer in 0..500 {
        iterations = outer + 1;

        // Gauss-Newton step for theta with step halving on the true objective
        let p = n_params;
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        for u in 0..data.t.len() {
            let (pi, resid, mut v) = model.unit_parts(&theta, &spec, u);
            let chol = loop {
                match v.clone().cholesky() {
                    Some(ch) => break ch,
                    None => {
                        for d in 0..v.nrows() {
                            v[(d, d)] += 1e-10;
                        }
                    }
                }
            };
            let jac = model.unit_jacobian(&pi, u);
            let vinv_j = chol.solve(&jac);
            a += jac.transpose() * &vinv_j;
            b += vinv_j.transpose() * resid;
        }
        // tiny ridge keeps the step defined when covariates are nearly flat
        for d in 0..p {
            a[(d, d)] += 1e-12 * (1.0 + a[(d, d)].abs());
        }
        let step = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a
                .lu()
                .solve(&b)
                .ok_or_else(|| EcoError::RankDeficient("normal equations singular".into()))?,
        };

        let flat = DVector::from_vec(theta.pack());
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &flat + &step * alpha;
            let cand_theta = LinkParams::unpack(cand.as_slice(), r, c, q);
            let (q_new, j_new) = model.quasi_loglik(&cand_theta, &spec);
            if q_new.is_finite() && q_new >= q_cur - 1e-12 {
                let gain = q_new - q_cur;
                theta = cand_theta;
                q_cur = q_new;
                jittered = j_new;
                improved = gain > 1e-10 * q_cur.abs().max(1.0);
                break;
            }
            alpha *= 0.5;
        }

        // profile update of the dispersion; only phi + tau is identified
        // from ecological data, so the free scalar is phi
        let mut dispersion_moved = false;
        if fix_phi.is_none() {
            let old_phi = spec.phi;
            let best = golden_section(
                |phi| {
                    let s = BPVarianceSpec { phi, tau };
                    -model.quasi_loglik(&theta, &s).0
                },
                0.0,
                0.95,
                1e-7,
            );
            spec.phi = if best < 1e-5 { 0.0 } else { best };
            let (q_new, j_new) = model.quasi_loglik(&theta, &spec);
            if q_new >= q_cur {
                q_cur = q_new;
                jittered = j_new;
            } else {
                spec.phi = old_phi;
            }
            dispersion_moved = (spec.phi - old_phi).abs() > 1e-7;
        }

        if !improved && !dispersion_moved {
            converged = true;
            break;
        }
    }

    // sandwich covariance for the packed link parameters
    let p = n_params;
    let mut bread = DMatrix::<f64>::zeros(p, p);
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for u in 0..data.t.len() {
        let (pi, resid, mut v) = model.unit_parts(&theta, &spec, u);
        let chol = loop {
            match v.clone().cholesky() {
                Some(ch) => break ch,
                None => {
                    for d in 0..v.nrows() {
                        v[(d, d)] += 1e-10;
                    }
                }
            }
        };
        let jac = model.unit_jacobian(&pi, u);
        let vinv_j = chol.solve(&jac);
        bread += jac.transpose() * &vinv_j;
        let score_u = vinv_j.transpose() * resid;
        meat += &score_u * score_u.transpose();
    }
    let se = match bread.clone().try_inverse() {
        Some(bi) => {
            let cov = &bi * meat * &bi;
            (0..p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect()
        }
        None => vec![f64::NAN; p],
    };

    // population-average matrix
    let n_units = data.t.len() as f64;
    let mut acc = vec![vec![0.0; c]; r];
    for z in &data.z {
        let pi = theta.unit_pi(z);
        for i in 0..r {
            for j in 0..c {
                acc[i][j] += pi[i][j] / n_units;
            }
        }
    }
    for row in acc.iter_mut() {
        let s: f64 = row.iter().sum();
        for vv in row.iter_mut() {
            *vv /= s;
        }
    }

    Ok(BPFit {
        params: theta,
        variance: spec,
        pi_hat: TransitionMatrix::new(acc)?,
        se,
        quasi_loglik: q_cur,
        converged,
        iterations,
        diagnostics: BPDiagnostics {
            jittered_units: jittered,
            phi_at_boundary: fix_phi.is_none() && spec.phi == 0.0,
        },
    })
}

/// Expected R x C cell counts per unit under the fitted model.
pub fn bp_predict_cells(
    fit: &BPFit,
    units: &[UnitAggregate],
    covariates: Option<&[CovariateVector]>,
) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    let data = prepare(units, covariates, false)?;
    let mut out = Vec::with_capacity(data.t.len());
    for u in 0..data.t.len() {
        let pi = fit.params.unit_pi(&data.z[u]);
        let r = pi.len();
        let c = pi[0].len();
        let mut cells = vec![vec![0.0; c]; r];
        for i in 0..r {
            let x_i = data.t[u][i] * data.n[u];
            for j in 0..c {
                cells[i][j] = x_i * pi[i][j];
            }
        }
        out.push((data.unit_ids[u].clone(), cells));
    }
    Ok(out)
}
