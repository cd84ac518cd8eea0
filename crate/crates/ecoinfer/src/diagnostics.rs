//! Bias diagnostics and comparative summaries: a logistic test of whether
//! within-unit proportions depend on the unit's marginal composition,
//! quartile regressions, prediction-error SDs, and side-by-side estimate
//! comparisons against ground truth.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{EcoError, Result};
use crate::logistic::fit_binomial_logistic;
use crate::model::{CovariateVector, IndividualTable, TransitionMatrix};

/// Table-style significance legend: `∘` none, `⋆` 5%, `∗` 1%, `•` 0.1%.
pub fn significance_code(p: f64) -> &'static str {
    if !(0.0..=1.0).contains(&p) {
        "∘"
    } else if p < 0.001 {
        "•"
    } else if p < 0.01 {
        "∗"
    } else if p < 0.05 {
        "⋆"
    } else {
        "∘"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellBiasTest {
    pub row: usize,
    pub col: usize,
    /// intercept first, then the R-1 marginal-proportion slopes, then extras
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// p-values for the non-intercept coefficients
    pub p_values: Vec<f64>,
    pub separation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasTestReport {
    pub cells: Vec<CellBiasTest>,
    /// true when some marginal-proportion coefficient is significant at 1%
    pub violated: bool,
}

impl BiasTestReport {
    /// Fraction of marginal-proportion coefficients significant at `alpha`.
    pub fn significant_fraction(&self, alpha: f64, n_slopes: usize) -> f64 {
        let mut total = 0usize;
        let mut hits = 0usize;
        for cell in &self.cells {
            for p in cell.p_values.iter().take(n_slopes) {
                total += 1;
                if *p < alpha {
                    hits += 1;
                }
            }
        }
        if total == 0 {
            f64::NAN
        } else {
            hits as f64 / total as f64
        }
    }
}

/// Test the unbiasedness condition from individual data: for each cell
/// (i, j) with j short of the reference column, regress successes n_uij
/// out of x_ui on the unit's marginal proportions t_u1..t_u,R-1 (plus any
/// extra covariates) with a logit link. Dependence on the marginals is
/// exactly what makes ecological regression biased.
pub fn bias_condition_test(
    tables: &[IndividualTable],
    extra_covariates: Option<&[CovariateVector]>,
) -> Result<BiasTestReport> {
    let first = tables
        .first()
        .ok_or_else(|| EcoError::InvalidData("no tables".into()))?;
    let r = first.n_rows();
    let c = first.n_cols();
    let cov_by_id: BTreeMap<&str, &[f64]> = extra_covariates
        .unwrap_or(&[])
        .iter()
        .map(|cv| (cv.unit_id.as_str(), cv.z.as_slice()))
        .collect();
    let q = extra_covariates
        .and_then(|c| c.first())
        .map_or(0, |c| c.z.len());

    let mut cells = Vec::new();
    let mut violated = false;
    for i in 0..r {
        for j in 0..c.saturating_sub(1) {
            let mut rows = Vec::new();
            let mut trials = Vec::new();
            let mut successes = Vec::new();
            for t in tables {
                if t.n_rows() != r || t.n_cols() != c {
                    return Err(EcoError::DimensionMismatch(format!(
                        "table `{}` has different shape",
                        t.unit_id
                    )));
                }
                let x: Vec<u64> = t.counts.iter().map(|row| row.iter().sum()).collect();
                let n: u64 = x.iter().sum();
                if n == 0 || x[i] == 0 {
                    continue;
                }
                let mut row = vec![1.0];
                for k in 0..r - 1 {
                    row.push(x[k] as f64 / n as f64);
                }
                if q > 0 {
                    let z = cov_by_id.get(t.unit_id.as_str()).copied().ok_or_else(|| {
                        EcoError::InvalidData(format!("unit `{}` has no covariates", t.unit_id))
                    })?;
                    row.extend_from_slice(&z[..q]);
                }
                rows.push(row);
                trials.push(x[i] as f64);
                successes.push(t.counts[i][j] as f64);
            }
            if rows.is_empty() {
                return Err(EcoError::InvalidData(format!(
                    "no usable units for cell ({i}, {j})"
                )));
            }
            let p_cols = rows[0].len();
            let dm = DMatrix::from_fn(rows.len(), p_cols, |a, b| rows[a][b]);
            let fit = fit_binomial_logistic(&dm, &trials, &successes)?;
            let se = fit.standard_errors();
            let pv = fit.p_values();
            let p_values: Vec<f64> = pv[1..].to_vec();
            // only composition coefficients enter the verdict
            if p_values.iter().take(r - 1).any(|p| *p < 0.01) {
                violated = true;
            }
            cells.push(CellBiasTest {
                row: i,
                col: j,
                coefficients: fit.beta.clone(),
                standard_errors: se,
                p_values,
                separation: fit.separation,
            });
        }
    }
    Ok(BiasTestReport { cells, violated })
}

/// What to sort units by when forming quartiles.
pub enum Grouping<'a> {
    /// a row's marginal proportion t_ui
    Row(usize),
    /// covariate m from the supplied vectors
    Covariate(&'a [CovariateVector], usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuartileSummary {
    /// mean grouping value per quartile
    pub grouping_means: Vec<f64>,
    /// per group row: mean voting proportion per quartile
    pub proportion_means: Vec<Vec<f64>>,
    /// units per quartile
    pub counts: Vec<usize>,
}

/// Split units into four equal-count quartiles of the grouping value and
/// average each group's voting proportion within quartiles. Set
/// `weighted` to weight the proportion means by eligible counts instead
/// of giving every unit the same weight.
pub fn quartile_summary(
    tables: &[IndividualTable],
    grouping: Grouping,
    success_col: usize,
    weighted: bool,
) -> Result<QuartileSummary> {
    if tables.len() < 4 {
        return Err(EcoError::InvalidData(format!(
            "need at least 4 units, got {}",
            tables.len()
        )));
    }
    let r = tables[0].n_rows();
    let cov_by_id: BTreeMap<&str, &[f64]> = match grouping {
        Grouping::Covariate(cvs, _) => cvs
            .iter()
            .map(|cv| (cv.unit_id.as_str(), cv.z.as_slice()))
            .collect(),
        Grouping::Row(_) => BTreeMap::new(),
    };

    let mut keyed: Vec<(f64, &IndividualTable)> = Vec::with_capacity(tables.len());
    for t in tables {
        let x: Vec<u64> = t.counts.iter().map(|row| row.iter().sum()).collect();
        let n: u64 = x.iter().sum();
        let key = match grouping {
            Grouping::Row(i) => {
                if i >= r {
                    return Err(EcoError::InvalidData(format!("row {i} out of range")));
                }
                if n == 0 {
                    0.0
                } else {
                    x[i] as f64 / n as f64
                }
            }
            Grouping::Covariate(_, m) => *cov_by_id
                .get(t.unit_id.as_str())
                .and_then(|z| z.get(m))
                .ok_or_else(|| {
                    EcoError::InvalidData(format!("unit `{}` missing covariate {m}", t.unit_id))
                })?,
        };
        keyed.push((key, t));
    }
    keyed.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then_with(|| a.1.unit_id.cmp(&b.1.unit_id))
    });

    let n_units = keyed.len();
    let mut grouping_means = vec![0.0; 4];
    let mut proportion_means = vec![vec![0.0; 4]; r];
    let mut counts = vec![0usize; 4];
    let mut weight_sums = [0.0; 4];
    let mut cell_weights = vec![vec![0.0; 4]; r];
    for (idx, (key, t)) in keyed.iter().enumerate() {
        let quart = (idx * 4 / n_units).min(3);
        counts[quart] += 1;
        let x: Vec<u64> = t.counts.iter().map(|row| row.iter().sum()).collect();
        let n: u64 = x.iter().sum();
        let unit_w = if weighted { n as f64 } else { 1.0 };
        grouping_means[quart] += key * unit_w;
        weight_sums[quart] += unit_w;
        for i in 0..r {
            if x[i] == 0 {
                continue;
            }
            let w = if weighted { x[i] as f64 } else { 1.0 };
            proportion_means[i][quart] += w * t.counts[i][success_col] as f64 / x[i] as f64;
            cell_weights[i][quart] += w;
        }
    }
    for qt in 0..4 {
        grouping_means[qt] /= weight_sums[qt].max(1e-300);
        for i in 0..r {
            proportion_means[i][qt] /= cell_weights[i][qt].max(1e-300);
        }
    }
    Ok(QuartileSummary {
        grouping_means,
        proportion_means,
        counts,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodErrorSD {
    pub method: String,
    /// SD of the per-unit total prediction error
    pub overall_sd: f64,
    /// SD of the per-unit error, one entry per group row
    pub cell_sd: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorSDReport {
    pub per_method: Vec<MethodErrorSD>,
}

/// Per-unit predicted cell matrices keyed by unit id, as produced by
/// `brown_payne::bp_predict_cells`.
pub type UnitPredictions = Vec<(String, Vec<Vec<f64>>)>;

fn centered_sd(errors: &[f64]) -> f64 {
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// SD of per-unit prediction errors, overall and per group row. Predicted
/// cells are expected counts for `success_col`; observed come from the
/// individual tables. The SD is centered, so a constant offset scores 0.
pub fn prediction_error_sd(
    methods: &[(String, UnitPredictions)],
    observed: &[IndividualTable],
    success_col: usize,
) -> Result<ErrorSDReport> {
    let obs_by_id: BTreeMap<&str, &IndividualTable> =
        observed.iter().map(|t| (t.unit_id.as_str(), t)).collect();
    let r = observed
        .first()
        .map(|t| t.n_rows())
        .ok_or_else(|| EcoError::InvalidData("no observed tables".into()))?;

    let mut per_method = Vec::new();
    for (name, predictions) in methods {
        if predictions.len() != observed.len() {
            return Err(EcoError::DimensionMismatch(format!(
                "method `{name}` predicts {} units, observed {}",
                predictions.len(),
                observed.len()
            )));
        }
        let mut totals = Vec::with_capacity(predictions.len());
        let mut cells: Vec<Vec<f64>> = vec![Vec::with_capacity(predictions.len()); r];
        for (unit_id, pred) in predictions {
            let obs = obs_by_id.get(unit_id.as_str()).ok_or_else(|| {
                EcoError::InvalidData(format!("method `{name}` predicts unknown unit `{unit_id}`"))
            })?;
            if pred.len() != r {
                return Err(EcoError::DimensionMismatch(format!(
                    "prediction for `{unit_id}` has {} rows, expected {r}",
                    pred.len()
                )));
            }
            let mut total_err = 0.0;
            for i in 0..r {
                let err = pred[i][success_col] - obs.counts[i][success_col] as f64;
                total_err += err;
                cells[i].push(err);
            }
            totals.push(total_err);
        }
        per_method.push(MethodErrorSD {
            method: name.clone(),
            overall_sd: centered_sd(&totals),
            cell_sd: cells.iter().map(|e| centered_sd(e)).collect(),
        });
    }
    Ok(ErrorSDReport { per_method })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method: String,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    /// row pairs (i1, i2) and column j where the estimate orders the two
    /// groups opposite to the truth
    pub sign_reversals: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub per_method: Vec<MethodComparison>,
}

/// Compare estimated transition matrices against a reference matrix:
/// worst and average cell errors plus any between-group orderings the
/// estimate gets backwards.
pub fn compare_estimates(
    estimates: &[(String, TransitionMatrix)],
    truth: &TransitionMatrix,
) -> Result<ComparisonTable> {
    let r = truth.n_rows();
    let c = truth.n_cols();
    let mut per_method = Vec::new();
    for (name, est) in estimates {
        if est.n_rows() != r || est.n_cols() != c {
            return Err(EcoError::DimensionMismatch(format!(
                "method `{name}` is {}x{}, truth is {r}x{c}",
                est.n_rows(),
                est.n_cols()
            )));
        }
        let mut max_err = 0.0f64;
        let mut sum_err = 0.0;
        for i in 0..r {
            for j in 0..c {
                let e = (est.get(i, j) - truth.get(i, j)).abs();
                max_err = max_err.max(e);
                sum_err += e;
            }
        }
        let mut sign_reversals = Vec::new();
        for i1 in 0..r {
            for i2 in i1 + 1..r {
                for j in 0..c {
                    let d_est = est.get(i1, j) - est.get(i2, j);
                    let d_true = truth.get(i1, j) - truth.get(i2, j);
                    if d_est * d_true < 0.0 {
                        sign_reversals.push((i1, i2, j));
                    }
                }
            }
        }
        per_method.push(MethodComparison {
            method: name.clone(),
            max_abs_error: max_err,
            mean_abs_error: sum_err / (r * c) as f64,
            sign_reversals,
        });
    }
    Ok(ComparisonTable { per_method })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goodman::fit_goodman;
    use crate::synth::{generate, paradox_fixture, GeneratorConfig};

    #[test]
    fn significance_legend() {
        assert_eq!(significance_code(0.5), "∘");
        assert_eq!(significance_code(0.03), "⋆");
        assert_eq!(significance_code(0.005), "∗");
        assert_eq!(significance_code(0.0001), "•");
    }

    #[test]
    fn bias_test_holds_on_constant_p() {
        let cfg =
            GeneratorConfig::no_bias(80, 8, vec![vec![0.3, 0.7], vec![0.15, 0.85]], 600.0, 77);
        let pop = generate(&cfg).unwrap();
        let report = bias_condition_test(&pop.tables, None).unwrap();
        assert!(!report.violated, "false positive: {:?}", report.cells);
    }

    #[test]
    fn bias_test_rejects_under_strong_slope() {
        let mut cfg =
            GeneratorConfig::no_bias(150, 10, vec![vec![0.3, 0.7], vec![0.15, 0.85]], 800.0, 78);
        cfg.bias_slopes = vec![vec![vec![3.0, -3.0]], vec![vec![-3.0, 3.0]]]
            .into_iter()
            .map(|m| m.into_iter().map(|r| vec![r[0], r[1]]).collect())
            .collect();
        let pop = generate(&cfg).unwrap();
        let report = bias_condition_test(&pop.tables, None).unwrap();
        assert!(report.violated);
    }

    #[test]
    fn bias_test_paradox_shapes() {
        let pop = paradox_fixture(100).unwrap();
        let report = bias_condition_test(&pop.tables, None).unwrap();
        // 2 rows x 1 non-reference column
        assert_eq!(report.cells.len(), 2);
        for cell in &report.cells {
            // intercept + one slope
            assert_eq!(cell.coefficients.len(), 2);
            assert_eq!(cell.p_values.len(), 1);
            for p in &cell.p_values {
                assert!((0.0..=1.0).contains(p) || p.is_nan());
            }
        }
    }

    #[test]
    fn quartiles_four_units_are_singletons() {
        let tables = vec![
            IndividualTable::new("a", vec![vec![1, 9], vec![5, 5]]).unwrap(),
            IndividualTable::new("b", vec![vec![2, 8], vec![10, 30]]).unwrap(),
            IndividualTable::new("c", vec![vec![3, 7], vec![5, 15]]).unwrap(),
            IndividualTable::new("d", vec![vec![4, 6], vec![2, 8]]).unwrap(),
        ];
        let qs = quartile_summary(&tables, Grouping::Row(0), 0, false).unwrap();
        assert_eq!(qs.counts, vec![1, 1, 1, 1]);
        // all four units have t_0 = 10 / n; sorted by that key
        for quart in 0..4 {
            assert!(qs.proportion_means[0][quart] > 0.0);
        }
    }

    #[test]
    fn quartiles_invariant_to_input_order() {
        let cfg = GeneratorConfig::no_bias(40, 4, vec![vec![0.3, 0.7], vec![0.2, 0.8]], 300.0, 5);
        let pop = generate(&cfg).unwrap();
        let a = quartile_summary(&pop.tables, Grouping::Row(0), 0, false).unwrap();
        let mut reversed = pop.tables.clone();
        reversed.reverse();
        let b = quartile_summary(&reversed, Grouping::Row(0), 0, false).unwrap();
        assert_eq!(a.grouping_means, b.grouping_means);
        assert_eq!(a.proportion_means, b.proportion_means);
    }

    #[test]
    fn quartiles_monotone_under_positive_slope() {
        let mut cfg =
            GeneratorConfig::no_bias(200, 10, vec![vec![0.3, 0.7], vec![0.3, 0.7]], 2000.0, 11);
        cfg.bias_slopes = vec![vec![vec![4.0, 0.0]], vec![vec![4.0, 0.0]]];
        let pop = generate(&cfg).unwrap();
        let qs = quartile_summary(&pop.tables, Grouping::Row(0), 0, false).unwrap();
        for i in 0..2 {
            for quart in 1..4 {
                assert!(
                    qs.proportion_means[i][quart] > qs.proportion_means[i][quart - 1] - 0.01,
                    "group {i} quartile means {:?}",
                    qs.proportion_means[i]
                );
            }
        }
    }

    #[test]
    fn quartiles_need_four_units() {
        let tables = vec![
            IndividualTable::new("a", vec![vec![1, 9]]).unwrap(),
            IndividualTable::new("b", vec![vec![2, 8]]).unwrap(),
        ];
        assert!(quartile_summary(&tables, Grouping::Row(0), 0, false).is_err());
    }

    #[test]
    fn error_sd_zero_for_perfect_predictions() {
        let obs = vec![
            IndividualTable::new("a", vec![vec![3, 7], vec![4, 6]]).unwrap(),
            IndividualTable::new("b", vec![vec![5, 5], vec![1, 9]]).unwrap(),
        ];
        let preds: Vec<(String, Vec<Vec<f64>>)> = obs
            .iter()
            .map(|t| {
                (
                    t.unit_id.clone(),
                    t.counts
                        .iter()
                        .map(|row| row.iter().map(|&v| v as f64).collect())
                        .collect(),
                )
            })
            .collect();
        let report = prediction_error_sd(&[("exact".into(), preds)], &obs, 0).unwrap();
        assert!(report.per_method[0].overall_sd < 1e-12);
        assert!(report.per_method[0].cell_sd.iter().all(|s| *s < 1e-12));
    }

    #[test]
    fn error_sd_ignores_constant_offset() {
        let obs = vec![
            IndividualTable::new("a", vec![vec![3, 7]]).unwrap(),
            IndividualTable::new("b", vec![vec![5, 5]]).unwrap(),
        ];
        let preds: Vec<(String, Vec<Vec<f64>>)> = obs
            .iter()
            .map(|t| {
                (
                    t.unit_id.clone(),
                    vec![vec![t.counts[0][0] as f64 + 2.5, t.counts[0][1] as f64]],
                )
            })
            .collect();
        let report = prediction_error_sd(&[("offset".into(), preds)], &obs, 0).unwrap();
        assert!(report.per_method[0].overall_sd < 1e-12);
    }

    #[test]
    fn error_sd_rejects_mismatched_units() {
        let obs = vec![IndividualTable::new("a", vec![vec![3, 7]]).unwrap()];
        let preds = vec![("zzz".to_string(), vec![vec![1.0, 2.0]])];
        assert!(prediction_error_sd(&[("m".into(), preds)], &obs, 0).is_err());
    }

    #[test]
    fn compare_identical_is_zero() {
        let m = TransitionMatrix::new(vec![vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        let table = compare_estimates(&[("self".into(), m.clone())], &m).unwrap();
        assert_eq!(table.per_method[0].max_abs_error, 0.0);
        assert!(table.per_method[0].sign_reversals.is_empty());
    }

    #[test]
    fn compare_detects_paradox_sign_reversal() {
        let pop = paradox_fixture(20).unwrap();
        let fit = fit_goodman(&pop.units, &pop.meta, false, false).unwrap();
        let est = TransitionMatrix::new(fit.raw.clone()).unwrap();
        let truth = pop.truth.mean_pi();
        let table = compare_estimates(&[("goodman".into(), est)], &truth).unwrap();
        // ecological estimate says women vote far more than men; the true
        // within-unit proportions order the sexes the other way
        assert!(!table.per_method[0].sign_reversals.is_empty(), "{table:?}");
    }

    #[test]
    fn compare_permuted_rows_scores_displacement() {
        let truth = TransitionMatrix::new(vec![vec![0.1, 0.9], vec![0.6, 0.4]]).unwrap();
        let permuted = TransitionMatrix::new(vec![vec![0.6, 0.4], vec![0.1, 0.9]]).unwrap();
        let table = compare_estimates(&[("perm".into(), permuted)], &truth).unwrap();
        assert!((table.per_method[0].max_abs_error - 0.5).abs() < 1e-12);
        assert!((table.per_method[0].mean_abs_error - 0.5).abs() < 1e-12);
    }
}
