//! Individual-data baselines: the pooled raw estimator and binomial
//! logistic mixed models with random intercepts for stations nested in
//! seats. The station effect is integrated out by adaptive Gauss-Hermite
//! quadrature, the seat effect by a Laplace approximation; the score is
//! analytic, with the seat mode handled by the envelope theorem and
//! implicit differentiation.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EcoError, Result};
use crate::logistic::{fit_binomial_logistic, inv_logit, ln_1p_exp, normal_sf};
use crate::model::{CovariateVector, IndividualTable, TransitionMatrix};
use crate::optim::{bfgs, gauss_hermite, BfgsOptions};

/// One binomial cell: voters out of eligible for one group in one station.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellObservation {
    pub unit_id: String,
    pub seat_id: String,
    pub group: usize,
    pub trials: u64,
    pub successes: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct MLOptions {
    /// 2 = station intercept only, 3 = station nested in seat
    pub levels: u8,
    pub quadrature_nodes: usize,
}

impl Default for MLOptions {
    fn default() -> Self {
        Self {
            levels: 3,
            quadrature_nodes: 9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MLFit {
    pub beta: Vec<f64>,
    pub beta_names: Vec<String>,
    pub se: Vec<f64>,
    pub sigma_station: f64,
    pub sigma_seat: f64,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl MLFit {
    /// Significance code per coefficient from the Wald statistic, using
    /// the same legend as the diagnostics tables.
    pub fn significance_codes(&self) -> Vec<&'static str> {
        self.beta
            .iter()
            .zip(&self.se)
            .map(|(&b, &se)| {
                if !se.is_finite() || se <= 0.0 {
                    return "∘";
                }
                crate::diagnostics::significance_code(2.0 * normal_sf((b / se).abs()))
            })
            .collect()
    }
}

/// Pooled proportions over all units: pi_ij = sum_u n_uij / sum_u x_ui.
pub fn raw_estimates(tables: &[IndividualTable]) -> Result<TransitionMatrix> {
    let first = tables
        .first()
        .ok_or_else(|| EcoError::InvalidData("no tables".into()))?;
    let r = first.n_rows();
    let c = first.n_cols();
    let mut acc = vec![vec![0u64; c]; r];
    for t in tables {
        if t.n_rows() != r || t.n_cols() != c {
            return Err(EcoError::DimensionMismatch(format!(
                "table `{}` is {}x{}, expected {r}x{c}",
                t.unit_id,
                t.n_rows(),
                t.n_cols()
            )));
        }
        for i in 0..r {
            for j in 0..c {
                acc[i][j] += t.counts[i][j];
            }
        }
    }
    let mut pi = vec![vec![0.0; c]; r];
    for i in 0..r {
        let tot: u64 = acc[i].iter().sum();
        if tot == 0 {
            return Err(EcoError::InvalidData(format!(
                "pooled row {i} has zero total; estimates undefined"
            )));
        }
        for j in 0..c {
            pi[i][j] = acc[i][j] as f64 / tot as f64;
        }
    }
    TransitionMatrix::new(pi)
}

/// Build per-cell binomial observations from individual tables, counting
/// column `success_col` as a success and everything else as failure.
pub fn observations_from_tables(
    tables: &[IndividualTable],
    seat_of_unit: &BTreeMap<String, String>,
    success_col: usize,
) -> Vec<CellObservation> {
    let mut obs = Vec::new();
    for t in tables {
        let seat = seat_of_unit
            .get(&t.unit_id)
            .cloned()
            .unwrap_or_else(|| "seat_0".into());
        for (g, row) in t.counts.iter().enumerate() {
            let trials: u64 = row.iter().sum();
            obs.push(CellObservation {
                unit_id: t.unit_id.clone(),
                seat_id: seat.clone(),
                group: g,
                trials,
                successes: row[success_col],
            });
        }
    }
    obs
}

// ---------------------------------------------------------------------------
// likelihood machinery
// ---------------------------------------------------------------------------

struct StationData {
    /// one row of fixed-effect covariate values per cell
    design: Vec<Vec<f64>>,
    trials: Vec<f64>,
    successes: Vec<f64>,
}

struct SeatData {
    stations: Vec<StationData>,
}

pub(crate) struct MLData {
    seats: Vec<SeatData>,
    n_fixed: usize,
}

/// Station-level integral value and derivatives at a given seat effect.
/// Theta derivatives stack the fixed effects first and sigma_station last.
#[derive(Clone)]
struct StationMoments {
    m: f64,
    m1: f64,
    m2: f64,
    m3: f64,
    dm: Vec<f64>,
    dm1: Vec<f64>,
    dm2: Vec<f64>,
}

fn logsumexp(vals: &[f64]) -> f64 {
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx.is_infinite() {
        return mx;
    }
    mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

impl StationData {
    /// g(b, a) = sum_g [s eta - x log(1+e^eta)] and its eta-derivatives
    /// collapsed to the shared additive effect.
    fn loglik_at(&self, beta: &[f64], offset: f64) -> f64 {
        let mut g = 0.0;
        for (row, (&x, &s)) in self
            .design
            .iter()
            .zip(self.trials.iter().zip(&self.successes))
        {
            let eta: f64 = row.iter().zip(beta).map(|(w, b)| w * b).sum::<f64>() + offset;
            g += s * eta - x * ln_1p_exp(eta);
        }
        g
    }

    /// Find the mode of g(sigma_b c, a) - c^2/2 over the scaled effect c.
    fn inner_mode(&self, beta: &[f64], sigma_b: f64, a: f64) -> (f64, f64) {
        let mut c = 0.0;
        for _ in 0..80 {
            let mut d1 = 0.0;
            let mut d2 = 0.0;
            for (row, (&x, &s)) in self
                .design
                .iter()
                .zip(self.trials.iter().zip(&self.successes))
            {
                let eta: f64 =
                    row.iter().zip(beta).map(|(w, b)| w * b).sum::<f64>() + a + sigma_b * c;
                let p = inv_logit(eta);
                d1 += s - x * p;
                d2 -= x * p * (1.0 - p);
            }
            let h1 = sigma_b * d1 - c;
            let h2 = sigma_b * sigma_b * d2 - 1.0;
            let step = h1 / h2;
            c -= step;
            if step.abs() < 1e-12 {
                break;
            }
        }
        let mut d2 = 0.0;
        for (row, (&x, _)) in self
            .design
            .iter()
            .zip(self.trials.iter().zip(&self.successes))
        {
            let eta: f64 = row.iter().zip(beta).map(|(w, b)| w * b).sum::<f64>() + a + sigma_b * c;
            let p = inv_logit(eta);
            d2 -= x * p * (1.0 - p);
        }
        let curv = 1.0 - sigma_b * sigma_b * d2; // -H''
        (c, (1.0 / curv).sqrt())
    }

    /// AGQ value of log integral over the station effect, plus derivatives
    /// in the seat effect a (orders 1..3) and in theta = (beta, sigma_b).
    fn moments(
        &self,
        beta: &[f64],
        sigma_b: f64,
        a: f64,
        nodes: &[f64],
        weights: &[f64],
        with_derivs: bool,
    ) -> StationMoments {
        let p = beta.len();
        let n_theta = p + 1;
        if sigma_b < 1e-12 {
            // quadrature collapses to the point b = 0
            let mut d1 = 0.0;
            let mut d2 = 0.0;
            let mut d3 = 0.0;
            let mut dtheta = vec![0.0; n_theta];
            let mut dtheta1 = vec![0.0; n_theta];
            let mut dtheta2 = vec![0.0; n_theta];
            let g = self.loglik_at(beta, a);
            for (row, (&x, &s)) in self
                .design
                .iter()
                .zip(self.trials.iter().zip(&self.successes))
            {
                let eta: f64 = row.iter().zip(beta).map(|(w, b)| w * b).sum::<f64>() + a;
                let pr = inv_logit(eta);
                let r = s - x * pr;
                let f2 = -x * pr * (1.0 - pr);
                let f3 = -x * pr * (1.0 - pr) * (1.0 - 2.0 * pr);
                d1 += r;
                d2 += f2;
                d3 += f3;
                for (k, w) in row.iter().enumerate() {
                    dtheta[k] += r * w;
                    dtheta1[k] += f2 * w;
                    dtheta2[k] += f3 * w;
                }
            }
            return StationMoments {
                m: g,
                m1: d1,
                m2: d2,
                m3: d3,
                dm: dtheta,
                dm1: dtheta1,
                dm2: dtheta2,
            };
        }

        let (c_hat, scale) = self.inner_mode(beta, sigma_b, a);
        let n_nodes = nodes.len();
        let sqrt2 = std::f64::consts::SQRT_2;

        // per-node H and derivative building blocks, node positions frozen
        let mut log_terms = vec![0.0; n_nodes];
        let mut nd1 = vec![0.0; n_nodes];
        let mut nd2 = vec![0.0; n_nodes];
        let mut nd3 = vec![0.0; n_nodes];
        let mut ne = vec![vec![0.0; n_theta]; n_nodes]; // dH/dtheta
        let mut nde1 = vec![vec![0.0; n_theta]; n_nodes]; // d(d1)/dtheta
        let mut nde2 = vec![vec![0.0; n_theta]; n_nodes]; // d(d2)/dtheta
        for k in 0..n_nodes {
            let c = c_hat + sqrt2 * scale * nodes[k];
            let mut g = -0.5 * c * c;
            for (row, (&x, &s)) in self
                .design
                .iter()
                .zip(self.trials.iter().zip(&self.successes))
            {
                let eta: f64 =
                    row.iter().zip(beta).map(|(w, b)| w * b).sum::<f64>() + a + sigma_b * c;
                g += s * eta - x * ln_1p_exp(eta);
                let pr = inv_logit(eta);
                let r = s - x * pr;
                let f2 = -x * pr * (1.0 - pr);
                let f3 = -x * pr * (1.0 - pr) * (1.0 - 2.0 * pr);
                nd1[k] += r;
                nd2[k] += f2;
                nd3[k] += f3;
                if with_derivs {
                    for (q, w) in row.iter().enumerate() {
                        ne[k][q] += r * w;
                        nde1[k][q] += f2 * w;
                        nde2[k][q] += f3 * w;
                    }
                    ne[k][p] += r * c;
                    nde1[k][p] += f2 * c;
                    nde2[k][p] += f3 * c;
                }
            }
            log_terms[k] = weights[k].ln() + nodes[k] * nodes[k] + g;
        }
        let lse = logsumexp(&log_terms);
        let m = (sqrt2 * scale).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + lse;
        let q_w: Vec<f64> = log_terms.iter().map(|lt| (lt - lse).exp()).collect();

        let avg = |f: &dyn Fn(usize) -> f64| -> f64 {
            q_w.iter().enumerate().map(|(k, &q)| q * f(k)).sum()
        };

        let u1 = avg(&|k| nd1[k]);
        let u2 = avg(&|k| nd1[k] * nd1[k] + nd2[k]);
        let u3 = avg(&|k| nd1[k].powi(3) + 3.0 * nd1[k] * nd2[k] + nd3[k]);
        let m1 = u1;
        let m2 = u2 - u1 * u1;
        let m3 = u3 - 3.0 * u2 * u1 + 2.0 * u1.powi(3);

        let mut dm = vec![0.0; n_theta];
        let mut dm1 = vec![0.0; n_theta];
        let mut dm2 = vec![0.0; n_theta];
        if with_derivs {
            for t in 0..n_theta {
                let ebar = avg(&|k| ne[k][t]);
                let du1 = avg(&|k| ne[k][t] * nd1[k] + nde1[k][t]) - ebar * u1;
                let du2 = avg(&|k| {
                    ne[k][t] * (nd1[k] * nd1[k] + nd2[k]) + 2.0 * nd1[k] * nde1[k][t] + nde2[k][t]
                }) - ebar * u2;
                dm[t] = ebar;
                dm1[t] = du1;
                dm2[t] = du2 - 2.0 * u1 * du1;
            }
        }
        StationMoments {
            m,
            m1,
            m2,
            m3,
            dm,
            dm1,
            dm2,
        }
    }
}

impl MLData {
    /// number of parameters in the packed vector (beta, sigma_b[, sigma_a])
    fn n_params(&self, levels: u8) -> usize {
        self.n_fixed + if levels == 3 { 2 } else { 1 }
    }

    /// Marginal log-likelihood and score in (beta, sigma_station, sigma_seat).
    pub(crate) fn loglik_and_score(
        &self,
        beta: &[f64],
        sigma_b: f64,
        sigma_a: f64,
        levels: u8,
        n_nodes: usize,
        with_score: bool,
    ) -> (f64, Vec<f64>) {
        let (nodes, weights) = gauss_hermite(n_nodes);
        let p = beta.len();
        let n_theta = p + 1;

        let per_seat: Vec<(f64, Vec<f64>)> = self
            .seats
            .par_iter()
            .map(|seat| {
                if levels == 2 || sigma_a < 1e-12 {
                    let mut ll = 0.0;
                    let mut score = vec![0.0; n_theta + 1];
                    for st in &seat.stations {
                        let mo = st.moments(beta, sigma_b, 0.0, &nodes, &weights, with_score);
                        ll += mo.m;
                        if with_score {
                            for t in 0..n_theta {
                                score[t] += mo.dm[t];
                            }
                        }
                    }
                    return (ll, score);
                }

                // find the seat mode in the scaled effect d (a = sigma_a d)
                let mut d = 0.0;
                for _ in 0..60 {
                    let a = sigma_a * d;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for st in &seat.stations {
                        let mo = st.moments(beta, sigma_b, a, &nodes, &weights, false);
                        s1 += mo.m1;
                        s2 += mo.m2;
                    }
                    let g1 = sigma_a * s1 - d;
                    let g2 = sigma_a * sigma_a * s2 - 1.0;
                    let step = g1 / g2;
                    d -= step;
                    if step.abs() < 1e-11 {
                        break;
                    }
                }
                let a_hat = sigma_a * d;

                let mut sum_m = 0.0;
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                let mut s3 = 0.0;
                let mut dsum = vec![0.0; n_theta];
                let mut dsum1 = vec![0.0; n_theta];
                let mut dsum2 = vec![0.0; n_theta];
                for st in &seat.stations {
                    let mo = st.moments(beta, sigma_b, a_hat, &nodes, &weights, with_score);
                    sum_m += mo.m;
                    s1 += mo.m1;
                    s2 += mo.m2;
                    s3 += mo.m3;
                    if with_score {
                        for t in 0..n_theta {
                            dsum[t] += mo.dm[t];
                            dsum1[t] += mo.dm1[t];
                            dsum2[t] += mo.dm2[t];
                        }
                    }
                }
                let g2 = sigma_a * sigma_a * s2 - 1.0; // G'' at the mode, < 0
                let ll = sum_m - 0.5 * d * d - 0.5 * (-g2).ln();

                let mut score = vec![0.0; n_theta + 1];
                if with_score {
                    let dg2_dd = sigma_a.powi(3) * s3;
                    // theta = (beta, sigma_b)
                    for t in 0..n_theta {
                        let denv = dsum[t];
                        let dg1 = sigma_a * dsum1[t];
                        let dg2 = sigma_a * sigma_a * dsum2[t];
                        let dd = dg1 / (-g2);
                        score[t] = denv - 0.5 * (dg2 + dg2_dd * dd) / g2;
                    }
                    // sigma_a
                    let denv = d * s1;
                    let dg1 = s1 + sigma_a * s2 * d;
                    let dg2 = 2.0 * sigma_a * s2 + sigma_a * sigma_a * s3 * d;
                    let dd = dg1 / (-g2);
                    score[n_theta] = denv - 0.5 * (dg2 + dg2_dd * dd) / g2;
                }
                (ll, score)
            })
            .collect();

        let mut ll = 0.0;
        let mut score = vec![0.0; n_theta + 1];
        for (l, s) in per_seat {
            ll += l;
            for (acc, v) in score.iter_mut().zip(&s) {
                *acc += v;
            }
        }
        if levels == 2 {
            score.truncate(n_theta);
        }
        (ll, score)
    }
}

pub(crate) fn build_ml_data(
    obs: &[CellObservation],
    covariates: Option<&[CovariateVector]>,
    design_of: &dyn Fn(&CellObservation, &[f64]) -> Vec<f64>,
    n_fixed: usize,
) -> Result<MLData> {
    let cov_by_id: BTreeMap<&str, &[f64]> = covariates
        .unwrap_or(&[])
        .iter()
        .map(|cv| (cv.unit_id.as_str(), cv.z.as_slice()))
        .collect();

    // group observations by seat, then station, preserving first-seen order
    let mut seat_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut seats: Vec<(Vec<&str>, BTreeMap<&str, StationData>)> = Vec::new();
    for o in obs {
        if o.successes > o.trials {
            return Err(EcoError::InvalidUnit {
                unit: o.unit_id.clone(),
                reason: format!("{} successes out of {} trials", o.successes, o.trials),
            });
        }
        let z: &[f64] = cov_by_id.get(o.unit_id.as_str()).copied().unwrap_or(&[]);
        if covariates.is_some() && z.is_empty() && !cov_by_id.is_empty() {
            return Err(EcoError::InvalidData(format!(
                "unit `{}` has no covariates",
                o.unit_id
            )));
        }
        let si = *seat_index.entry(o.seat_id.as_str()).or_insert_with(|| {
            seats.push((Vec::new(), BTreeMap::new()));
            seats.len() - 1
        });
        let (_, stations) = &mut seats[si];
        let st = stations
            .entry(o.unit_id.as_str())
            .or_insert_with(|| StationData {
                design: vec![],
                trials: vec![],
                successes: vec![],
            });
        let row = design_of(o, z);
        if row.len() != n_fixed {
            return Err(EcoError::DimensionMismatch(
                "design row length mismatch".into(),
            ));
        }
        st.design.push(row);
        st.trials.push(o.trials as f64);
        st.successes.push(o.successes as f64);
    }

    Ok(MLData {
        seats: seats
            .into_iter()
            .map(|(_, stations)| SeatData {
                stations: stations.into_values().collect(),
            })
            .collect(),
        n_fixed,
    })
}

fn optimize(
    data: &MLData,
    opts: MLOptions,
    init_beta: Vec<f64>,
) -> (Vec<f64>, f64, f64, f64, bool, usize) {
    let p = data.n_fixed;
    let levels = opts.levels;
    let mut x0 = init_beta;
    x0.push((0.2f64).ln());
    if levels == 3 {
        x0.push((0.2f64).ln());
    }

    let objective = |x: &[f64]| {
        let beta = &x[..p];
        let sigma_b = x[p].exp();
        let sigma_a = if levels == 3 { x[p + 1].exp() } else { 0.0 };
        let (ll, score) =
            data.loglik_and_score(beta, sigma_b, sigma_a, levels, opts.quadrature_nodes, true);
        let mut grad: Vec<f64> = score.iter().map(|s| -s).collect();
        grad[p] *= sigma_b; // chain rule for log-sigma
        if levels == 3 {
            grad[p + 1] *= sigma_a;
        }
        (-ll, grad)
    };
    let res = bfgs(
        objective,
        &x0,
        BfgsOptions {
            max_iterations: 400,
            rel_obj_tol: 1e-11,
            grad_tol: 1e-6,
        },
    );
    let beta = res.x[..p].to_vec();
    let sigma_b = res.x[p].exp();
    let sigma_a = if levels == 3 { res.x[p + 1].exp() } else { 0.0 };
    (
        beta,
        sigma_b,
        sigma_a,
        -res.value,
        res.converged,
        res.iterations,
    )
}

fn wald_se(data: &MLData, beta: &[f64], sigma_b: f64, sigma_a: f64, opts: MLOptions) -> Vec<f64> {
    // observed information by finite differences of the analytic score
    let p = data.n_fixed;
    let n = data.n_params(opts.levels);
    let pack: Vec<f64> = {
        let mut v = beta.to_vec();
        v.push(sigma_b);
        if opts.levels == 3 {
            v.push(sigma_a);
        }
        v
    };
    let score_at = |x: &[f64]| -> Vec<f64> {
        let sb = x[p].max(0.0);
        let sa = if opts.levels == 3 {
            x[p + 1].max(0.0)
        } else {
            0.0
        };
        data.loglik_and_score(&x[..p], sb, sa, opts.levels, opts.quadrature_nodes, true)
            .1
    };
    let mut info = DMatrix::<f64>::zeros(n, n);
    let mut xp = pack.clone();
    for k in 0..n {
        let h = 1e-5 * (1.0 + pack[k].abs());
        xp[k] = pack[k] + h;
        let sp = score_at(&xp);
        xp[k] = pack[k] - h;
        let sm = score_at(&xp);
        xp[k] = pack[k];
        for l in 0..n {
            info[(l, k)] = -(sp[l] - sm[l]) / (2.0 * h);
        }
    }
    // symmetrize and invert
    let info = (&info + info.transpose()) * 0.5;
    match info.try_inverse() {
        Some(cov) => (0..n).map(|k| cov[(k, k)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; n],
    }
}

/// Standardize covariates to mean 0, SD 1 for optimization; returns the
/// transformed vectors plus the (mean, sd) pairs to map estimates back.
fn standardize(
    covariates: Option<&[CovariateVector]>,
) -> (Option<Vec<CovariateVector>>, Vec<(f64, f64)>) {
    let Some(cvs) = covariates else {
        return (None, vec![]);
    };
    if cvs.is_empty() {
        return (None, vec![]);
    }
    let q = cvs[0].z.len();
    let n = cvs.len() as f64;
    let mut stats = Vec::with_capacity(q);
    for m in 0..q {
        let mean = cvs.iter().map(|c| c.z[m]).sum::<f64>() / n;
        let var = cvs.iter().map(|c| (c.z[m] - mean).powi(2)).sum::<f64>() / n;
        stats.push((mean, var.sqrt().max(1e-12)));
    }
    let out = cvs
        .iter()
        .map(|c| CovariateVector {
            unit_id: c.unit_id.clone(),
            z: c.z
                .iter()
                .zip(&stats)
                .map(|(z, (m, s))| (z - m) / s)
                .collect(),
        })
        .collect();
    (Some(out), stats)
}

/// Fit the pooled mixed model: one intercept per group plus shared
/// covariate slopes, station and seat random intercepts.
pub fn fit_multilevel(
    obs: &[CellObservation],
    covariates: Option<&[CovariateVector]>,
    opts: MLOptions,
) -> Result<MLFit> {
    if obs.is_empty() {
        return Err(EcoError::InvalidData("no observations".into()));
    }
    let n_groups = obs.iter().map(|o| o.group).max().unwrap() + 1;
    let (std_cov, stats) = standardize(covariates);
    let q = stats.len();
    let n_fixed = n_groups + q;

    let design = move |o: &CellObservation, z: &[f64]| {
        let mut row = vec![0.0; n_groups + q];
        row[o.group] = 1.0;
        row[n_groups..].copy_from_slice(&z[..q.min(z.len())]);
        row
    };
    let data = build_ml_data(obs, std_cov.as_deref(), &design, n_fixed)?;

    // initialize from the ordinary logistic fit
    let init = init_from_logistic(obs, std_cov.as_deref(), &design, n_fixed)?;
    let (beta_std, sigma_b, sigma_a, loglik, converged, iterations) = optimize(&data, opts, init);
    let se_std = wald_se(&data, &beta_std, sigma_b, sigma_a, opts);

    // map slopes and intercepts back to the original covariate scale
    let mut beta = beta_std.clone();
    let mut se = se_std.clone();
    for m in 0..q {
        let (mean, sd) = stats[m];
        beta[n_groups + m] = beta_std[n_groups + m] / sd;
        se[n_groups + m] = se_std[n_groups + m] / sd;
        for g in 0..n_groups {
            beta[g] -= beta_std[n_groups + m] * mean / sd;
        }
    }

    let mut beta_names: Vec<String> = (0..n_groups).map(|g| format!("group_{g}")).collect();
    beta_names.extend((0..q).map(|m| format!("z_{m}")));

    Ok(MLFit {
        beta,
        beta_names,
        se,
        sigma_station: sigma_b,
        sigma_seat: sigma_a,
        loglik,
        converged,
        iterations,
    })
}

fn init_from_logistic(
    obs: &[CellObservation],
    covariates: Option<&[CovariateVector]>,
    design: &dyn Fn(&CellObservation, &[f64]) -> Vec<f64>,
    n_fixed: usize,
) -> Result<Vec<f64>> {
    let cov_by_id: BTreeMap<&str, &[f64]> = covariates
        .unwrap_or(&[])
        .iter()
        .map(|cv| (cv.unit_id.as_str(), cv.z.as_slice()))
        .collect();
    let n = obs.len();
    let mut rows = Vec::with_capacity(n);
    let mut trials = Vec::with_capacity(n);
    let mut succ = Vec::with_capacity(n);
    for o in obs {
        let z = cov_by_id.get(o.unit_id.as_str()).copied().unwrap_or(&[]);
        rows.push(design(o, z));
        trials.push(o.trials as f64);
        succ.push(o.successes as f64);
    }
    let dm = DMatrix::from_fn(n, n_fixed, |r, c| rows[r][c]);
    let fit = fit_binomial_logistic(&dm, &trials, &succ)?;
    Ok(fit.beta)
}

/// Fit one model for a subset of cell groups, as when each age group gets
/// its own model: an intercept for the first listed group, contrasts for
/// the others, plus covariates.
pub fn fit_per_group(
    obs: &[CellObservation],
    covariates: Option<&[CovariateVector]>,
    groups: &[usize],
    opts: MLOptions,
) -> Result<MLFit> {
    if groups.is_empty() {
        return Err(EcoError::InvalidData("no groups selected".into()));
    }
    let subset: Vec<CellObservation> = obs
        .iter()
        .filter(|o| groups.contains(&o.group))
        .cloned()
        .collect();
    if subset.is_empty() {
        return Err(EcoError::InvalidData(format!(
            "no observations for groups {groups:?}"
        )));
    }
    let (std_cov, stats) = standardize(covariates);
    let q = stats.len();
    let g_index: BTreeMap<usize, usize> = groups.iter().enumerate().map(|(k, &g)| (g, k)).collect();
    let n_contrast = groups.len() - 1;
    let n_fixed = 1 + n_contrast + q;

    let design = move |o: &CellObservation, z: &[f64]| {
        let mut row = vec![0.0; n_fixed];
        row[0] = 1.0;
        let k = g_index[&o.group];
        if k > 0 {
            row[k] = 1.0;
        }
        row[1 + n_contrast..].copy_from_slice(&z[..q.min(z.len())]);
        row
    };
    let data = build_ml_data(&subset, std_cov.as_deref(), &design, n_fixed)?;
    let init = init_from_logistic(&subset, std_cov.as_deref(), &design, n_fixed)?;
    let (beta_std, sigma_b, sigma_a, loglik, converged, iterations) = optimize(&data, opts, init);
    let se_std = wald_se(&data, &beta_std, sigma_b, sigma_a, opts);

    let mut beta = beta_std.clone();
    let mut se = se_std.clone();
    for m in 0..q {
        let (mean, sd) = stats[m];
        beta[1 + n_contrast + m] = beta_std[1 + n_contrast + m] / sd;
        se[1 + n_contrast + m] = se_std[1 + n_contrast + m] / sd;
        beta[0] -= beta_std[1 + n_contrast + m] * mean / sd;
    }

    let mut beta_names = vec![format!("group_{}", groups[0])];
    beta_names.extend(
        groups[1..]
            .iter()
            .map(|g| format!("group_{g}-group_{}", groups[0])),
    );
    beta_names.extend((0..q).map(|m| format!("z_{m}")));

    Ok(MLFit {
        beta,
        beta_names,
        se,
        sigma_station: sigma_b,
        sigma_seat: sigma_a,
        loglik,
        converged,
        iterations,
    })
}

/// Marginal log-likelihood and analytic score of the pooled model at a
/// given parameter point; the score is checked against finite differences.
pub fn multilevel_loglik_and_score(
    obs: &[CellObservation],
    covariates: Option<&[CovariateVector]>,
    beta: &[f64],
    sigma_station: f64,
    sigma_seat: f64,
    opts: MLOptions,
) -> Result<(f64, Vec<f64>)> {
    let n_groups = obs.iter().map(|o| o.group).max().unwrap_or(0) + 1;
    let q = covariates.and_then(|c| c.first()).map_or(0, |c| c.z.len());
    let n_fixed = n_groups + q;
    if beta.len() != n_fixed {
        return Err(EcoError::DimensionMismatch(format!(
            "beta has {} entries, design needs {n_fixed}",
            beta.len()
        )));
    }
    let design = move |o: &CellObservation, z: &[f64]| {
        let mut row = vec![0.0; n_groups + q];
        row[o.group] = 1.0;
        row[n_groups..].copy_from_slice(&z[..q.min(z.len())]);
        row
    };
    let data = build_ml_data(obs, covariates, &design, n_fixed)?;
    Ok(data.loglik_and_score(
        beta,
        sigma_station,
        sigma_seat,
        opts.levels,
        opts.quadrature_nodes,
        true,
    ))
}

/// Per-station probabilities at zero random effects, averaged over
/// stations, one value per group.
pub fn averaged_probabilities(
    fit: &MLFit,
    obs: &[CellObservation],
    covariates: Option<&[CovariateVector]>,
) -> Result<Vec<f64>> {
    let n_groups = obs.iter().map(|o| o.group).max().unwrap_or(0) + 1;
    let q = covariates.and_then(|c| c.first()).map_or(0, |c| c.z.len());
    if fit.beta.len() != n_groups + q {
        return Err(EcoError::DimensionMismatch(
            "fit does not match the pooled design".into(),
        ));
    }
    let cov_by_id: BTreeMap<&str, &[f64]> = covariates
        .unwrap_or(&[])
        .iter()
        .map(|cv| (cv.unit_id.as_str(), cv.z.as_slice()))
        .collect();
    let mut sums = vec![0.0; n_groups];
    let mut counts = vec![0usize; n_groups];
    for o in obs {
        let mut eta = fit.beta[o.group];
        if q > 0 {
            let z = cov_by_id.get(o.unit_id.as_str()).copied().unwrap_or(&[]);
            for m in 0..q {
                eta += fit.beta[n_groups + m] * z[m];
            }
        }
        sums[o.group] += inv_logit(eta);
        counts[o.group] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect())
}

/// Turn per-group success probabilities into an R x 2 transition matrix
/// with the success column at `success_col`.
pub fn probabilities_to_matrix(probs: &[f64], success_col: usize) -> Result<TransitionMatrix> {
    let rows = probs
        .iter()
        .map(|&p| {
            if success_col == 0 {
                vec![p, 1.0 - p]
            } else {
                vec![1.0 - p, p]
            }
        })
        .collect();
    TransitionMatrix::new(rows)
}
