//! Panel-data treatment-effect estimation for a single treated unit:
//! difference-in-differences with county-clustered inference and synthetic
//! control with covariate weights from a negative-binomial GLM.
//!
//! The pipeline runs ingest → knot detection → donor screening → DID, and
//! ingest → GLM covariate selection → synthetic control → effect regression.

// NaN-rejecting comparisons are written as negations on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod changepoint;
pub mod did;
pub mod error;
pub mod ingest;
pub mod nbglm;
pub mod ols;
pub mod oracle;
pub mod panel;
pub mod selection;
pub mod selftest;
pub mod sim;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use panel::{PanelDataset, PeriodLabel, RateSeries, TreatmentSpec, Unit};
