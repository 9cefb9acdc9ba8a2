//! Move one abnormal feature to the nearest bound of its reference range and
//! recompute the prediction and all contributions.

use serde::{Deserialize, Serialize};

use crate::cohort::{flag, Flag, Reference, ReferenceRange};
use crate::error::{Error, Result};
use crate::predictor::Model;
use crate::shapley::{explain, ContributionSet, ExplainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResult {
    pub feature_id: String,
    pub direction: Flag,
    pub reference: ReferenceRange,
    pub original_value: f64,
    pub clamped_value: f64,
    pub original_prediction: f64,
    pub new_prediction: f64,
    pub prediction_delta: f64,
    pub original_phi: f64,
    pub new_phi: f64,
    pub phi_delta: f64,
    pub original: ContributionSet,
    pub modified: ContributionSet,
}

/// Nearest point of the closed range.
pub fn clamp_to_range(value: f64, range: &ReferenceRange) -> f64 {
    value.clamp(range.low, range.high)
}

/// Runs the what-if for `feature_id` of `x`. Both contribution sets use the
/// same background and explainer settings.
pub fn whatif(
    model: &Model,
    row_key: &str,
    x: &[Option<f64>],
    feature_id: &str,
    reference: &Reference,
    background: &[Vec<Option<f64>>],
    config: &ExplainConfig,
) -> Result<WhatIfResult> {
    let col = model
        .feature_ids
        .iter()
        .position(|f| f == feature_id)
        .ok_or_else(|| Error::UnknownFeature(feature_id.to_string()))?;
    let range = *reference
        .range()
        .ok_or_else(|| Error::UndefinedReference(feature_id.to_string()))?;
    let value = x
        .get(col)
        .copied()
        .flatten()
        .ok_or_else(|| Error::InvalidInput(format!("{feature_id} has no value")))?;
    let direction = flag(value, reference);
    if direction == Flag::Within {
        return Err(Error::NotAbnormal(feature_id.to_string()));
    }
    let clamped = clamp_to_range(value, &range);
    let mut modified_x = x.to_vec();
    modified_x[col] = Some(clamped);

    let original = explain(model, row_key, x, background, config)?;
    let modified = explain(model, row_key, &modified_x, background, config)?;
    let original_prediction = model.predict(x)?;
    let new_prediction = model.predict(&modified_x)?;
    let original_phi = original.contributions[col].phi;
    let new_phi = modified.contributions[col].phi;
    Ok(WhatIfResult {
        feature_id: feature_id.to_string(),
        direction,
        reference: range,
        original_value: value,
        clamped_value: clamped,
        original_prediction,
        new_prediction,
        prediction_delta: new_prediction - original_prediction,
        original_phi,
        new_phi,
        phi_delta: new_phi - original_phi,
        original,
        modified,
    })
}
