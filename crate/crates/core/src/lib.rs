//! Explainable clinical-risk prediction over relational EHR-style data.
//!
//! The pipeline: [`store`] loads and indexes the tables, [`features`] turns
//! them into a lineage-tracked feature matrix, [`predictor`] fits one logistic
//! model per complication target, and the explainers sit on top: [`shapley`]
//! for feature contributions, [`influence`] for the records behind a dynamic
//! feature, [`cohort`] for reference ranges and [`whatif`] for clamping an
//! abnormal feature back into range. [`synth`] generates datasets with
//! planted, known structure.

pub mod cohort;
pub mod error;
pub mod features;
pub mod influence;
pub mod label;
pub mod predictor;
pub mod shapley;
pub mod store;
pub mod synth;
pub mod whatif;

pub use error::{Error, Result};
pub use label::Label;
