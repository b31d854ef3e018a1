//! Training-free deferral to human experts driven by conformal prediction.
//!
//! A conformal predictor wrapped around any probability-vector classifier
//! produces a prediction set per input. Singleton sets are answered by the
//! model; larger (or empty) sets are routed to the expert whose recorded
//! answers best separate the labels in the set, measured by
//! *segregativity*: the expert's accuracy on the sub-matrix of its confusion
//! matrix indexed by the set.
//!
//! The crate also ships the replay harness used to benchmark the method
//! against recorded annotations: stratified calibration/test splits, the
//! miscoverage grid search, workload metrics, the paired significance
//! protocol, and the expert-degradation and limited-knowledge ablations.
//!
//! Modules:
//!
//! * [`conformal`]: LAC/APS/RAPS scores, calibration, prediction sets.
//! * [`experts`]: confusion matrices, segregativity, expert selection.
//! * [`policy`]: per-input decisions and the baseline strategies.
//! * [`evaluation`]: splits, grid search, metrics, ablations.
//! * [`stats`]: Shapiro-Wilk, paired t and Wilcoxon signed-rank tests.
//! * [`dataio`]: CSV/JSON ingestion and result emission.
//! * [`synth`]: synthetic models and expert pools.
//! * [`report`]: summary tables and SVG plots from `results.csv`.

pub mod conformal;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod experts;
pub mod ids;
pub mod policy;
pub mod report;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use ids::{ExpertId, SampleId};
