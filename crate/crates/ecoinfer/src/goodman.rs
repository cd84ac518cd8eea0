//! Goodman ecological regression: per-column OLS of the observed column
//! proportions on the row proportions, with the last column completed from
//! the row-sum constraint and optional truncation to [0,1] for reporting.

use nalgebra::{DMatrix, DVector};

use crate::error::{EcoError, Result};
use crate::model::{DatasetMeta, TransitionMatrix, UnitAggregate};

#[derive(Debug, Clone)]
pub struct GoodmanFit {
    /// raw OLS estimates, possibly outside [0,1]
    pub raw: Vec<Vec<f64>>,
    /// clipped-and-renormalized estimates when truncation is requested
    pub truncated: Option<TransitionMatrix>,
    /// classical per-column OLS standard errors (last column in quadrature)
    pub se: Vec<Vec<f64>>,
    /// residuals v_uj - fitted, one column per non-reference outcome
    pub residuals: DMatrix<f64>,
    /// ids of the units that entered the regression, in order
    pub included_units: Vec<String>,
    pub weighted: bool,
}

impl GoodmanFit {
    /// The matrix to report: truncated when available, raw otherwise.
    pub fn estimate(&self) -> Vec<Vec<f64>> {
        match &self.truncated {
            Some(t) => t.rows().to_vec(),
            None => self.raw.clone(),
        }
    }

    /// Max |correlation| between each residual column and each row-proportion
    /// regressor; zero (to rounding) by the OLS normal equations.
    pub fn max_residual_design_correlation(&self, units: &[UnitAggregate]) -> Result<f64> {
        let included: Vec<&UnitAggregate> = units.iter().filter(|u| u.n > 0).collect();
        if included.len() != self.residuals.nrows() {
            return Err(EcoError::DimensionMismatch(
                "fit was produced on a different unit set".into(),
            ));
        }
        let n = included.len();
        let r = self.raw.len();
        let mut worst: f64 = 0.0;
        for i in 0..r.saturating_sub(1) {
            let t_col: Vec<f64> = included
                .iter()
                .map(|u| u.x[i] as f64 / u.n as f64)
                .collect();
            for j in 0..self.residuals.ncols() {
                let resid: Vec<f64> = self.residuals.column(j).iter().copied().collect();
                // exactly identified fits leave only rounding noise behind;
                // there is no residual direction to correlate
                let norm: f64 = resid.iter().map(|e| e * e).sum::<f64>().sqrt();
                if norm < 1e-12 * (resid.len() as f64).sqrt() {
                    continue;
                }
                let c = correlation(&t_col, &resid);
                if c.is_finite() {
                    worst = worst.max(c.abs());
                }
            }
            let _ = n;
        }
        Ok(worst)
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// Clip to [0,1] and renormalize each row; raw rows always sum to 1 so the
/// clipped row sum is strictly positive.
pub fn truncate_rows(raw: &[Vec<f64>]) -> TransitionMatrix {
    let rows: Vec<Vec<f64>> = raw
        .iter()
        .map(|row| {
            let clipped: Vec<f64> = row.iter().map(|p| p.clamp(0.0, 1.0)).collect();
            let s: f64 = clipped.iter().sum();
            clipped.iter().map(|p| p / s).collect()
        })
        .collect();
    TransitionMatrix::new(rows).expect("renormalized rows are stochastic")
}

/// OLS on the accounting identity, one regression per non-reference column.
///
/// The regression of `v_uj` on an intercept and the row proportions
/// `t_u1 .. t_u,R-1` identifies the reference-row probability as the
/// intercept and each other row's probability as intercept + slope.
/// Units with `n = 0` are excluded.
pub fn fit_goodman(
    units: &[UnitAggregate],
    meta: &DatasetMeta,
    weighted: bool,
    truncate: bool,
) -> Result<GoodmanFit> {
    let r = meta.n_rows;
    let c = meta.n_cols;
    let included: Vec<&UnitAggregate> = units.iter().filter(|u| u.n > 0).collect();
    let n = included.len();
    if n < r {
        return Err(EcoError::Underdetermined { n, p: r });
    }

    // design: intercept plus t_1 .. t_{R-1}
    let mut design = DMatrix::<f64>::zeros(n, r);
    let mut sqrt_w = vec![1.0; n];
    for (u_idx, u) in included.iter().enumerate() {
        design[(u_idx, 0)] = 1.0;
        for i in 0..r - 1 {
            design[(u_idx, i + 1)] = u.x[i] as f64 / u.n as f64;
        }
        if weighted {
            sqrt_w[u_idx] = (u.n as f64).sqrt();
        }
    }
    let mut xw = design.clone();
    for u_idx in 0..n {
        for k in 0..r {
            xw[(u_idx, k)] *= sqrt_w[u_idx];
        }
    }
    let svd = xw.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.iter().any(|&s| s < smax * 1e-10) {
        let collinear: Vec<String> = (0..r - 1).map(|i| meta.row_labels[i].clone()).collect();
        return Err(EcoError::RankDeficient(format!(
            "row-proportion columns {collinear:?} are collinear with the intercept"
        )));
    }

    // (X'WX)^{-1} from the SVD, shared across outcome columns
    let v_t = svd.v_t.as_ref().unwrap();
    let mut xtx_inv = DMatrix::<f64>::zeros(r, r);
    for k in 0..r {
        let s2 = svd.singular_values[k].powi(2);
        for a in 0..r {
            for b in 0..r {
                xtx_inv[(a, b)] += v_t[(k, a)] * v_t[(k, b)] / s2;
            }
        }
    }

    let mut raw = vec![vec![0.0; c]; r];
    let mut se = vec![vec![0.0; c]; r];
    let mut residuals = DMatrix::<f64>::zeros(n, c - 1);

    for j in 0..c - 1 {
        let mut vj = DVector::<f64>::zeros(n);
        for (u_idx, u) in included.iter().enumerate() {
            vj[u_idx] = (u.y[j] as f64 / u.n as f64) * sqrt_w[u_idx];
        }
        let beta = svd
            .solve(&vj, 1e-12)
            .map_err(|e| EcoError::RankDeficient(format!("least-squares solve failed: {e}")))?;

        raw[r - 1][j] = beta[0];
        for i in 0..r - 1 {
            raw[i][j] = beta[0] + beta[i + 1];
        }

        let fitted = &design * &beta;
        let mut rss = 0.0;
        for (u_idx, u) in included.iter().enumerate() {
            let obs = u.y[j] as f64 / u.n as f64;
            let eps = obs - fitted[u_idx];
            residuals[(u_idx, j)] = eps;
            rss += sqrt_w[u_idx].powi(2) * eps * eps;
        }
        let dof = n.saturating_sub(r);
        let sigma2 = if dof > 0 { rss / dof as f64 } else { 0.0 };
        // var of intercept + slope_i is a linear-combination variance
        se[r - 1][j] = (sigma2 * xtx_inv[(0, 0)]).max(0.0).sqrt();
        for i in 0..r - 1 {
            let var = xtx_inv[(0, 0)] + 2.0 * xtx_inv[(0, i + 1)] + xtx_inv[(i + 1, i + 1)];
            se[i][j] = (sigma2 * var).max(0.0).sqrt();
        }
    }

    // last column from the row-sum constraint
    for i in 0..r {
        raw[i][c - 1] = 1.0 - raw[i][..c - 1].iter().sum::<f64>();
        se[i][c - 1] = raw[i][..c - 1]
            .iter()
            .enumerate()
            .map(|(j, _)| se[i][j].powi(2))
            .sum::<f64>()
            .sqrt();
    }

    let truncated = truncate.then(|| truncate_rows(&raw));

    Ok(GoodmanFit {
        raw,
        truncated,
        se,
        residuals,
        included_units: included.iter().map(|u| u.unit_id.clone()).collect(),
        weighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::paradox_fixture;

    fn paradox_units() -> (Vec<UnitAggregate>, DatasetMeta) {
        let pop = paradox_fixture(20).unwrap();
        (pop.units, pop.meta)
    }

    #[test]
    fn paradox_exact_solution() {
        // two units, R = C = 2: the OLS system is exactly identified and
        // must give pi(F, yes) = 0.85, pi(M, yes) = 0.10
        let (units, meta) = paradox_units();
        let fit = fit_goodman(&units, &meta, false, false).unwrap();
        // rows (F, M), columns (No, Yes)
        assert!((fit.raw[0][1] - 0.85).abs() < 1e-10);
        assert!((fit.raw[1][1] - 0.10).abs() < 1e-10);
        assert!((fit.raw[0][0] - 0.15).abs() < 1e-10);
        assert!((fit.raw[1][0] - 0.90).abs() < 1e-10);
        // exactly identified: residuals vanish
        assert!(fit.residuals.amax() < 1e-12);
    }

    #[test]
    fn constant_p_dataset_is_fit_exactly() {
        // units whose y counts follow a fixed pi exactly: zero residuals
        // and recovery of pi (integer-friendly construction)
        let pi = [[0.8, 0.2], [0.4, 0.6]];
        let mut units = Vec::new();
        for (k, (x0, x1)) in [(100u64, 200u64), (300, 100), (150, 250), (50, 200)]
            .into_iter()
            .enumerate()
        {
            let y0 = (x0 as f64 * pi[0][0] + x1 as f64 * pi[1][0]).round() as u64;
            let y1 = x0 + x1 - y0;
            // construction keeps the accounting identity exact
            assert_eq!(
                y0 as f64,
                x0 as f64 * pi[0][0] + x1 as f64 * pi[1][0],
                "fixture must be integral"
            );
            units.push(UnitAggregate::new(format!("u{k}"), vec![x0, x1], vec![y0, y1]).unwrap());
        }
        let ids: Vec<String> = units.iter().map(|u| u.unit_id.clone()).collect();
        let meta = DatasetMeta::unlabeled(2, 2, &ids).unwrap();
        let fit = fit_goodman(&units, &meta, false, false).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((fit.raw[i][j] - pi[i][j]).abs() < 1e-10);
            }
        }
        assert!(fit.residuals.amax() < 1e-12);
    }

    #[test]
    fn single_row_reduces_to_mean() {
        let units = vec![
            UnitAggregate::new("a", vec![10], vec![4, 6]).unwrap(),
            UnitAggregate::new("b", vec![10], vec![8, 2]).unwrap(),
            UnitAggregate::new("c", vec![10], vec![6, 4]).unwrap(),
        ];
        let ids: Vec<String> = units.iter().map(|u| u.unit_id.clone()).collect();
        let meta = DatasetMeta::unlabeled(1, 2, &ids).unwrap();
        let fit = fit_goodman(&units, &meta, false, false).unwrap();
        assert!((fit.raw[0][0] - 0.6).abs() < 1e-12);
        assert!((fit.raw[0][1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn underdetermined_rejected() {
        let units = vec![UnitAggregate::new("a", vec![5, 5], vec![4, 6]).unwrap()];
        let meta = DatasetMeta::unlabeled(2, 2, &["a".to_string()]).unwrap();
        assert!(matches!(
            fit_goodman(&units, &meta, false, false),
            Err(EcoError::Underdetermined { .. })
        ));
    }

    #[test]
    fn collinear_design_rejected() {
        // identical marginals in every unit: t column is constant
        let units: Vec<UnitAggregate> = (0..5)
            .map(|k| {
                UnitAggregate::new(format!("u{k}"), vec![10, 10], vec![5 + k, 15 - k]).unwrap()
            })
            .collect();
        let ids: Vec<String> = units.iter().map(|u| u.unit_id.clone()).collect();
        let meta = DatasetMeta::unlabeled(2, 2, &ids).unwrap();
        assert!(matches!(
            fit_goodman(&units, &meta, false, false),
            Err(EcoError::RankDeficient(_))
        ));
    }

    #[test]
    fn truncated_rows_sum_to_one() {
        let (units, meta) = paradox_units();
        let fit = fit_goodman(&units, &meta, false, true).unwrap();
        let t = fit.truncated.unwrap();
        for row in t.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}
