//! CSV and JSON readers/writers for the three dataset formats and the
//! estimate report.
//!
//! Aggregated CSV: `unit,seat,x_1..x_R,y_1..y_C`, one row per unit.
//! Individual CSV: `unit,row,col,count` in long form.
//! Covariate CSV: `unit,z_1..z_q`.
//! Reports: `{method, pi, se, diagnostics}` JSON.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{EcoError, Result};
use crate::model::{CovariateVector, DatasetMeta, IndividualTable, UnitAggregate};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimateReport {
    pub method: String,
    pub pi: Vec<Vec<f64>>,
    pub se: Option<Vec<Vec<f64>>>,
    pub diagnostics: Value,
}

fn parse_err(line: usize, reason: impl Into<String>) -> EcoError {
    EcoError::CsvParse {
        line,
        reason: reason.into(),
    }
}

pub fn write_aggregates(
    path: impl AsRef<Path>,
    units: &[UnitAggregate],
    meta: &DatasetMeta,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["unit".to_string(), "seat".to_string()];
    header.extend((1..=meta.n_rows).map(|i| format!("x_{i}")));
    header.extend((1..=meta.n_cols).map(|j| format!("y_{j}")));
    w.write_record(&header)?;
    for u in units {
        let seat = meta
            .seat_of_unit
            .get(&u.unit_id)
            .cloned()
            .unwrap_or_else(|| "seat_0".into());
        let mut rec = vec![u.unit_id.clone(), seat];
        rec.extend(u.x.iter().map(|v| v.to_string()));
        rec.extend(u.y.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregates(path: impl AsRef<Path>) -> Result<(Vec<UnitAggregate>, DatasetMeta)> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[0] != "unit" || cols[1] != "seat" {
        return Err(parse_err(1, "expected header unit,seat,x_1..,y_1.."));
    }
    let r = cols.iter().filter(|c| c.starts_with("x_")).count();
    let c = cols.iter().filter(|c| c.starts_with("y_")).count();
    if r == 0 || c < 2 || cols.len() != 2 + r + c {
        return Err(parse_err(1, "malformed x_/y_ columns"));
    }
    let mut units = Vec::new();
    let mut seat_of_unit = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != 2 + r + c {
            return Err(parse_err(line, format!("expected {} fields", 2 + r + c)));
        }
        let unit_id = rec[0].to_string();
        seat_of_unit.insert(unit_id.clone(), rec[1].to_string());
        let parse = |s: &str| -> Result<u64> {
            s.trim()
                .parse::<u64>()
                .map_err(|_| parse_err(line, format!("bad count `{s}`")))
        };
        let x: Vec<u64> = (0..r).map(|i| parse(&rec[2 + i])).collect::<Result<_>>()?;
        let y: Vec<u64> = (0..c)
            .map(|j| parse(&rec[2 + r + j]))
            .collect::<Result<_>>()?;
        units.push(UnitAggregate::new(unit_id, x, y).map_err(|e| parse_err(line, e.to_string()))?);
    }
    let unit_ids: Vec<String> = units.iter().map(|u| u.unit_id.clone()).collect();
    let mut meta = DatasetMeta::unlabeled(r, c, &unit_ids)?;
    meta.seat_of_unit = seat_of_unit;
    Ok((units, meta))
}

pub fn write_individual(path: impl AsRef<Path>, tables: &[IndividualTable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["unit", "row", "col", "count"])?;
    for t in tables {
        for (i, row) in t.counts.iter().enumerate() {
            for (j, &count) in row.iter().enumerate() {
                w.write_record([
                    t.unit_id.as_str(),
                    &(i + 1).to_string(),
                    &(j + 1).to_string(),
                    &count.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_individual(path: impl AsRef<Path>) -> Result<Vec<IndividualTable>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["unit", "row", "col", "count"] {
        return Err(parse_err(1, "expected header unit,row,col,count"));
    }
    // preserve first-seen order
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<String, Vec<(usize, usize, u64)>> = BTreeMap::new();
    let mut max_row = 0usize;
    let mut max_col = 0usize;
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != 4 {
            return Err(parse_err(line, "expected 4 fields"));
        }
        let unit = rec[0].to_string();
        let row: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad row `{}`", &rec[1])))?;
        let col: usize = rec[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad col `{}`", &rec[2])))?;
        let count: u64 = rec[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad count `{}`", &rec[3])))?;
        if row == 0 || col == 0 {
            return Err(parse_err(line, "row and col indices start at 1"));
        }
        max_row = max_row.max(row);
        max_col = max_col.max(col);
        if !cells.contains_key(&unit) {
            order.push(unit.clone());
        }
        cells
            .entry(unit)
            .or_default()
            .push((row - 1, col - 1, count));
    }
    let mut tables = Vec::with_capacity(order.len());
    for unit in order {
        let mut counts = vec![vec![0u64; max_col]; max_row];
        for (i, j, v) in cells.remove(&unit).unwrap() {
            counts[i][j] = v;
        }
        tables.push(IndividualTable::new(unit, counts)?);
    }
    Ok(tables)
}

pub fn write_covariates(path: impl AsRef<Path>, covariates: &[CovariateVector]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let q = covariates.first().map_or(0, |c| c.z.len());
    let mut header = vec!["unit".to_string()];
    header.extend((1..=q).map(|m| format!("z_{m}")));
    w.write_record(&header)?;
    for cv in covariates {
        let mut rec = vec![cv.unit_id.clone()];
        rec.extend(cv.z.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_covariates(path: impl AsRef<Path>) -> Result<Vec<CovariateVector>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.is_empty() || cols[0] != "unit" {
        return Err(parse_err(1, "expected header unit,z_1.."));
    }
    let q = cols.len() - 1;
    let mut out = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != q + 1 {
            return Err(parse_err(line, format!("expected {} fields", q + 1)));
        }
        let z: Vec<f64> = (0..q)
            .map(|m| {
                rec[1 + m]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(line, format!("bad value `{}`", &rec[1 + m])))
            })
            .collect::<Result<_>>()?;
        out.push(CovariateVector {
            unit_id: rec[0].to_string(),
            z,
        });
    }
    Ok(out)
}

/// Long-form per-unit predicted cell values: `unit,row,col,value` with
/// real-valued entries (expected counts).
pub fn write_predictions(
    path: impl AsRef<Path>,
    predictions: &[(String, Vec<Vec<f64>>)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["unit", "row", "col", "value"])?;
    for (unit, cells) in predictions {
        for (i, row) in cells.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                w.write_record([
                    unit.as_str(),
                    &(i + 1).to_string(),
                    &(j + 1).to_string(),
                    &format!("{v}"),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["unit", "row", "col", "value"] {
        return Err(parse_err(1, "expected header unit,row,col,value"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<String, Vec<(usize, usize, f64)>> = BTreeMap::new();
    let mut max_row = 0usize;
    let mut max_col = 0usize;
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != 4 {
            return Err(parse_err(line, "expected 4 fields"));
        }
        let unit = rec[0].to_string();
        let row: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad row `{}`", &rec[1])))?;
        let col: usize = rec[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad col `{}`", &rec[2])))?;
        let value: f64 = rec[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad value `{}`", &rec[3])))?;
        if row == 0 || col == 0 {
            return Err(parse_err(line, "row and col indices start at 1"));
        }
        max_row = max_row.max(row);
        max_col = max_col.max(col);
        if !cells.contains_key(&unit) {
            order.push(unit.clone());
        }
        cells
            .entry(unit)
            .or_default()
            .push((row - 1, col - 1, value));
    }
    let mut out = Vec::with_capacity(order.len());
    for unit in order {
        let mut grid = vec![vec![0.0; max_col]; max_row];
        for (i, j, v) in cells.remove(&unit).unwrap() {
            grid[i][j] = v;
        }
        out.push((unit, grid));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let f = File::create(path.as_ref())?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let f = File::open(path.as_ref())?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn write_report(path: impl AsRef<Path>, report: &EstimateReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EstimateReport> {
    read_json(path)
}
