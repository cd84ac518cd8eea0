//! Shared data model: per-unit marginal counts, individual joint counts,
//! proportions and transition matrices, plus validation plumbing.
//!
//! Counts are integers; proportions are always derived on demand so the
//! accounting identity `v_uj = sum_i t_ui p_uij` holds exactly on the
//! underlying counts.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{EcoError, Result};

/// Dataset-level dimensions and labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub n_units: usize,
    /// unit id -> seat id
    pub seat_of_unit: BTreeMap<String, String>,
}

impl DatasetMeta {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        seat_of_unit: BTreeMap<String, String>,
    ) -> Result<Self> {
        if n_rows < 1 || n_cols < 2 {
            return Err(EcoError::InvalidData(format!(
                "need at least 1 row and 2 column categories, got {n_rows}x{n_cols}"
            )));
        }
        if row_labels.len() != n_rows || col_labels.len() != n_cols {
            return Err(EcoError::InvalidData(
                "label count does not match dimensions".into(),
            ));
        }
        let n_units = seat_of_unit.len();
        if n_units == 0 {
            return Err(EcoError::InvalidData("dataset has no units".into()));
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_labels,
            col_labels,
            n_units,
            seat_of_unit,
        })
    }

    /// Convenience constructor with generated labels and one seat per unit.
    pub fn unlabeled(n_rows: usize, n_cols: usize, unit_ids: &[String]) -> Result<Self> {
        let seat_of_unit = unit_ids
            .iter()
            .map(|u| (u.clone(), "seat_0".to_string()))
            .collect();
        Self::new(
            n_rows,
            n_cols,
            (0..n_rows).map(|i| format!("row_{i}")).collect(),
            (0..n_cols).map(|j| format!("col_{j}")).collect(),
            seat_of_unit,
        )
    }
}

/// Per-unit marginal counts: the only data ecological methods see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitAggregate {
    pub unit_id: String,
    /// counts of the X (row) categories, length R
    pub x: Vec<u64>,
    /// counts of the Y (column) categories, length C
    pub y: Vec<u64>,
    /// total voters in this unit
    pub n: u64,
}

impl UnitAggregate {
    pub fn new(unit_id: impl Into<String>, x: Vec<u64>, y: Vec<u64>) -> Result<Self> {
        let unit_id = unit_id.into();
        let nx: u64 = x.iter().sum();
        let ny: u64 = y.iter().sum();
        if nx != ny {
            return Err(EcoError::InvalidUnit {
                unit: unit_id,
                reason: format!("row total {nx} != column total {ny}"),
            });
        }
        Ok(Self {
            unit_id,
            x,
            y,
            n: nx,
        })
    }

    /// Marginal proportions t = x/n, v = y/n.
    pub fn proportions(&self) -> Result<Proportions> {
        if self.n == 0 {
            return Err(EcoError::InvalidUnit {
                unit: self.unit_id.clone(),
                reason: "unit has zero total; proportions undefined".into(),
            });
        }
        let n = self.n as f64;
        Ok(Proportions {
            t: self.x.iter().map(|&c| c as f64 / n).collect(),
            v: self.y.iter().map(|&c| c as f64 / n).collect(),
        })
    }
}

/// Per-unit R x C joint counts; ground truth that ecological data lack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndividualTable {
    pub unit_id: String,
    /// row-major R x C counts
    pub counts: Vec<Vec<u64>>,
}

impl IndividualTable {
    pub fn new(unit_id: impl Into<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let unit_id = unit_id.into();
        if counts.is_empty() || counts[0].is_empty() {
            return Err(EcoError::InvalidUnit {
                unit: unit_id,
                reason: "empty count table".into(),
            });
        }
        let c = counts[0].len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(EcoError::InvalidUnit {
                unit: unit_id,
                reason: "ragged count table".into(),
            });
        }
        Ok(Self { unit_id, counts })
    }

    pub fn n_rows(&self) -> usize {
        self.counts.len()
    }

    pub fn n_cols(&self) -> usize {
        self.counts[0].len()
    }

    /// Marginalize the joint counts into a `UnitAggregate`.
    pub fn aggregate(&self) -> UnitAggregate {
        let r = self.n_rows();
        let c = self.n_cols();
        let mut x = vec![0u64; r];
        let mut y = vec![0u64; c];
        for i in 0..r {
            for j in 0..c {
                x[i] += self.counts[i][j];
                y[j] += self.counts[i][j];
            }
        }
        let n = x.iter().sum();
        UnitAggregate {
            unit_id: self.unit_id.clone(),
            x,
            y,
            n,
        }
    }

    /// Within-row proportions p_uij = n_uij / x_ui; rows with zero total are NaN.
    pub fn row_proportions(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let tot: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| {
                        if tot == 0 {
                            f64::NAN
                        } else {
                            c as f64 / tot as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Marginal proportions of a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
}

/// Row-stochastic R x C matrix of transition probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pi: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    const ROW_SUM_TOL: f64 = 1e-10;

    pub fn new(pi: Vec<Vec<f64>>) -> Result<Self> {
        if pi.is_empty() || pi[0].is_empty() {
            return Err(EcoError::InvalidData("empty transition matrix".into()));
        }
        let c = pi[0].len();
        for (i, row) in pi.iter().enumerate() {
            if row.len() != c {
                return Err(EcoError::InvalidData("ragged transition matrix".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(EcoError::InvalidData(format!(
                    "row {i} sums to {sum}, not 1"
                )));
            }
            if row.iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
                return Err(EcoError::InvalidData(format!(
                    "row {i} has entries outside [0,1]"
                )));
            }
        }
        Ok(Self { pi })
    }

    pub fn n_rows(&self) -> usize {
        self.pi.len()
    }

    pub fn n_cols(&self) -> usize {
        self.pi[0].len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pi[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.pi
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_rows(), self.n_cols(), |i, j| self.pi[i][j])
    }

    /// Largest absolute cellwise difference to another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &TransitionMatrix) -> Result<f64> {
        if self.n_rows() != other.n_rows() || self.n_cols() != other.n_cols() {
            return Err(EcoError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.n_rows(),
                self.n_cols(),
                other.n_rows(),
                other.n_cols()
            )));
        }
        let mut m: f64 = 0.0;
        for i in 0..self.n_rows() {
            for j in 0..self.n_cols() {
                m = m.max((self.get(i, j) - other.get(i, j)).abs());
            }
        }
        Ok(m)
    }
}

/// Unit-level covariates; length must be constant across units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateVector {
    pub unit_id: String,
    pub z: Vec<f64>,
}

/// A single validation problem; violations are data, not faults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    MarginalMismatch {
        unit: String,
        axis: String,
        index: usize,
        expected: u64,
        found: u64,
    },
    DimensionMismatch {
        unit: String,
        detail: String,
    },
    UnknownSeat {
        unit: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// units flagged (zero totals / empty categories) but retained
    pub flagged_units: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check marginal consistency, dimensions and seat assignment.
///
/// Units with `n = 0` or an empty row category are flagged rather than
/// rejected; each estimator decides how to treat them.
pub fn validate_dataset(
    units: &[UnitAggregate],
    tables: Option<&[IndividualTable]>,
    meta: &DatasetMeta,
) -> ValidationReport {
    let mut violations = Vec::new();
    let mut flagged = Vec::new();

    for u in units {
        if u.x.len() != meta.n_rows || u.y.len() != meta.n_cols {
            violations.push(Violation::DimensionMismatch {
                unit: u.unit_id.clone(),
                detail: format!(
                    "unit has {}x{} marginals in a {}x{} dataset",
                    u.x.len(),
                    u.y.len(),
                    meta.n_rows,
                    meta.n_cols
                ),
            });
            continue;
        }
        if !meta.seat_of_unit.contains_key(&u.unit_id) {
            violations.push(Violation::UnknownSeat {
                unit: u.unit_id.clone(),
            });
        }
        if u.n == 0 {
            flagged.push(u.unit_id.clone());
            continue;
        }
        for (i, &xi) in u.x.iter().enumerate() {
            if xi == 0 {
                flagged.push(u.unit_id.clone());
                let _ = i;
                break;
            }
        }
    }

    if let Some(tables) = tables {
        let by_id: BTreeMap<&str, &UnitAggregate> =
            units.iter().map(|u| (u.unit_id.as_str(), u)).collect();
        for t in tables {
            if t.n_rows() != meta.n_rows || t.n_cols() != meta.n_cols {
                violations.push(Violation::DimensionMismatch {
                    unit: t.unit_id.clone(),
                    detail: format!(
                        "table is {}x{} in a {}x{} dataset",
                        t.n_rows(),
                        t.n_cols(),
                        meta.n_rows,
                        meta.n_cols
                    ),
                });
                continue;
            }
            let Some(u) = by_id.get(t.unit_id.as_str()) else {
                violations.push(Violation::UnknownSeat {
                    unit: t.unit_id.clone(),
                });
                continue;
            };
            let agg = t.aggregate();
            for (i, (&a, &b)) in agg.x.iter().zip(&u.x).enumerate() {
                if a != b {
                    violations.push(Violation::MarginalMismatch {
                        unit: t.unit_id.clone(),
                        axis: "row".into(),
                        index: i,
                        expected: b,
                        found: a,
                    });
                }
            }
            for (j, (&a, &b)) in agg.y.iter().zip(&u.y).enumerate() {
                if a != b {
                    violations.push(Violation::MarginalMismatch {
                        unit: t.unit_id.clone(),
                        axis: "column".into(),
                        index: j,
                        expected: b,
                        found: a,
                    });
                }
            }
        }
    }

    flagged.dedup();
    ValidationReport {
        violations,
        flagged_units: flagged,
    }
}
