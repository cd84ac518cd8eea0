//! Ecological inference for R x C voter transition tables.
//!
//! Aggregate-data estimators (Goodman regression, a least-squares
//! multinomial-link model, and a quasi-likelihood model with structured
//! overdispersion) sit next to individual-data baselines (pooled raw
//! estimates and logistic mixed models) and a synthetic population
//! generator, so that estimator bias can be measured against known
//! ground truth.

// index loops over multiple parallel matrices read better than zipped
// iterator chains in the numerical code
#![allow(clippy::needless_range_loop)]

pub mod brown_payne;
pub mod diagnostics;
pub mod error;
pub mod goodman;
pub mod io;
pub mod king;
pub mod logistic;
pub mod model;
pub mod multilevel;
pub mod optim;
pub mod synth;

pub use error::{EcoError, Result};
pub use model::{
    CovariateVector, DatasetMeta, IndividualTable, Proportions, TransitionMatrix, UnitAggregate,
};
