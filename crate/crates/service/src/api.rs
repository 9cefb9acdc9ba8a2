//! Route table and handlers. Handlers are synchronous functions over
//! `&AppState`; the async wrappers move them onto the blocking pool so a
//! long explanation never stalls other requests.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use clinexplain::cohort::{
    categorical_distribution, flag, numeric_distribution, timeline_summary, CohortSelector, Distribution, Flag,
    Reference, Timeline, TimelineInterval, DEFAULT_BINS,
};
use clinexplain::features::{FeatureDescriptor, FeatureKind, ValueType, WindowKind};
use clinexplain::influence::{default_window, influential_segments, merge_overlays, MergedOverlay, SegmentSet};
use clinexplain::predictor::DEFAULT_THRESHOLD;
use clinexplain::shapley::{build_hierarchy, group_rollup, sort_filter, HierarchyNode, ShapMethod, SortKey};
use clinexplain::store::{Timestamp, Window, ADMISSIONS, PATIENTS, SURGERIES};
use clinexplain::whatif::{whatif, WhatIfResult};
use clinexplain::Label;

use crate::error::ServiceError;
use crate::state::{AppState, Result};

pub fn router(state: Arc<AppState>) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/api/patients", get(patients))
        .route("/api/descriptors", get(descriptors))
        .route("/api/cohort", post(cohort))
        .route("/api/patient/{id}/profile", get(profile))
        .route("/api/patient/{id}/items", get(items))
        .route("/api/patient/{id}/features", get(features))
        .route("/api/patient/{id}/distribution/{feature}", get(distribution))
        .route("/api/patient/{id}/series/{item}", get(series))
        .route("/api/patient/{id}/timeline", get(timeline))
        .route("/api/patient/{id}/whatif", post(what_if))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn blocking<T, F>(state: Arc<AppState>, f: F) -> Result<Json<T>>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map(Json)
}

fn parse_label(s: &str) -> Result<Label> {
    Ok(s.parse::<Label>()?)
}

// ---- patients ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub surgery_id: String,
    pub probabilities: BTreeMap<Label, f64>,
    /// Prediction at or above the 0.5 threshold.
    pub flags: BTreeMap<Label, bool>,
}

pub fn list_patients(state: &AppState) -> Result<Vec<PatientSummary>> {
    let mut out = Vec::new();
    for pid in state.dataset.patient_ids() {
        let Ok(row) = state.patient_row(pid) else { continue };
        let mut probabilities = BTreeMap::new();
        let mut flags = BTreeMap::new();
        for (label, model) in &state.models {
            let p = model.predict(&state.model_input(model, row))?;
            probabilities.insert(*label, p);
            flags.insert(*label, p >= DEFAULT_THRESHOLD);
        }
        out.push(PatientSummary {
            patient_id: pid.to_string(),
            surgery_id: state.matrix.row_keys[row].clone(),
            probabilities,
            flags,
        });
    }
    Ok(out)
}

async fn patients(State(s): State<Arc<AppState>>) -> Result<Json<Vec<PatientSummary>>> {
    blocking(s, list_patients).await
}

async fn descriptors(State(s): State<Arc<AppState>>) -> Json<Vec<FeatureDescriptor>> {
    Json(s.descriptors.clone())
}

// ---- cohort ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cohort_id: String,
    pub size: usize,
    pub low_risk_size: usize,
    pub high_risk_size: usize,
}

pub fn create_cohort(state: &AppState, selector: &CohortSelector) -> Result<CohortSummary> {
    let entry = state.cohort(selector)?;
    Ok(CohortSummary {
        cohort_id: entry.cohort.cohort_id.clone(),
        size: entry.cohort.size(),
        low_risk_size: entry.low.len(),
        high_risk_size: entry.high.len(),
    })
}

async fn cohort(State(s): State<Arc<AppState>>, Json(selector): Json<CohortSelector>) -> Result<Json<CohortSummary>> {
    blocking(s, move |s| create_cohort(s, &selector)).await
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CohortQuery {
    pub cohort: Option<String>,
}

// ---- profile ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileAttribute {
    pub feature_id: String,
    pub name: String,
    /// Number, category label or null.
    pub value: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<Flag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub patient_id: String,
    pub surgery_id: String,
    pub cohort_id: String,
    pub demographics: Vec<ProfileAttribute>,
    pub admission: Vec<ProfileAttribute>,
    pub surgery: Vec<ProfileAttribute>,
    /// Admission and surgery times.
    pub admission_window: Option<Window>,
    pub surgery_window: Window,
}

fn leaf_value(d: &FeatureDescriptor, raw: Option<f64>) -> serde_json::Value {
    match (d.value_type, raw) {
        (_, None) => serde_json::Value::Null,
        (ValueType::Categorical, Some(v)) => d
            .categories
            .get(v as usize)
            .map(|c| serde_json::Value::String(c.clone()))
            .unwrap_or(serde_json::Value::Null),
        (ValueType::Numeric, Some(v)) => serde_json::json!(v),
    }
}

pub fn patient_profile(state: &AppState, patient: &str, cohort: Option<&str>) -> Result<Profile> {
    let row = state.patient_row(patient)?;
    let entry = state.cohort_by_id(cohort)?;
    let mut groups: BTreeMap<&str, Vec<ProfileAttribute>> = BTreeMap::new();
    for (col, d) in state.descriptors.iter().enumerate() {
        if d.kind != FeatureKind::Static {
            continue;
        }
        let raw = state.matrix.get(row, col);
        let (reference, fl) = if d.is_categorical() {
            (None, None)
        } else {
            let r = entry.feature_reference(&d.feature_id);
            let fl = raw.map(|v| flag(v, &r));
            (Some(r), fl)
        };
        groups
            .entry(d.source_entity.as_str())
            .or_default()
            .push(ProfileAttribute {
                feature_id: d.feature_id.clone(),
                name: d.display_name.clone(),
                value: leaf_value(d, raw),
                reference,
                flag: fl,
            });
    }
    let admission_window = state
        .dataset
        .rows_of_patient(ADMISSIONS, patient)
        .first()
        .and_then(|&r| state.dataset.span_of(ADMISSIONS, r));
    Ok(Profile {
        patient_id: patient.to_string(),
        surgery_id: state.matrix.row_keys[row].clone(),
        cohort_id: entry.cohort.cohort_id.clone(),
        demographics: groups.remove(PATIENTS).unwrap_or_default(),
        admission: groups.remove(ADMISSIONS).unwrap_or_default(),
        surgery: groups.remove(SURGERIES).unwrap_or_default(),
        admission_window,
        surgery_window: state.windows(row)?.during,
    })
}

async fn profile(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<CohortQuery>,
) -> Result<Json<Profile>> {
    blocking(s, move |s| patient_profile(s, &id, q.cohort.as_deref())).await
}

/// Items with events for the patient, grouped by source table.
pub fn patient_items(state: &AppState, patient: &str) -> Result<BTreeMap<String, Vec<String>>> {
    state.patient_row(patient)?;
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for item in state.dataset.patient_items(patient) {
        let entity = state.dataset.item_entity(item).unwrap_or_default();
        out.entry(entity.to_string()).or_default().push(item.to_string());
    }
    Ok(out)
}

async fn items(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<BTreeMap<String, Vec<String>>>> {
    blocking(s, move |s| patient_items(s, &id)).await
}

// ---- features ----

#[derive(Debug, Clone, Default, Deserialize)]
pub struct FeaturesQuery {
    pub target: Option<String>,
    pub cohort: Option<String>,
    pub sort: Option<String>,
    pub topk: Option<usize>,
    pub min_abs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLeaf {
    pub feature_id: String,
    pub display_name: String,
    pub kind: FeatureKind,
    pub value_type: ValueType,
    pub source_entity: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub window: WindowKind,
    pub value: serde_json::Value,
    pub phi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<Flag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNode {
    pub label: String,
    /// Sum of all leaf contributions below, including leaves filtered out of
    /// this view.
    pub group_contribution: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature: Option<FeatureLeaf>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<FeatureNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesResponse {
    pub patient_id: String,
    pub surgery_id: String,
    pub target: Label,
    pub cohort_id: String,
    pub base_value: f64,
    pub prediction: f64,
    pub method: ShapMethod,
    pub background_rows: usize,
    /// Leaves in the full hierarchy and in this view.
    pub total_features: usize,
    pub shown_features: usize,
    pub root: FeatureNode,
}

pub fn patient_features(state: &AppState, patient: &str, q: &FeaturesQuery) -> Result<FeaturesResponse> {
    let target = parse_label(q.target.as_deref().unwrap_or("C"))?;
    let sort: SortKey = match &q.sort {
        Some(s) => s.parse()?,
        None => SortKey::Magnitude,
    };
    if q.min_abs.is_some_and(|m| m.is_nan() || m < 0.0) {
        return Err(ServiceError::BadRequest("min_abs must be non-negative".into()));
    }
    let row = state.patient_row(patient)?;
    let entry = state.cohort_by_id(q.cohort.as_deref())?;
    let set = state.explanation(patient, target, &entry)?;

    let model = state.model(target)?;
    let descs: Vec<FeatureDescriptor> = model
        .feature_ids
        .iter()
        .map(|f| state.descriptor(f).cloned())
        .collect::<Result<_>>()?;
    let mut tree = group_rollup(&build_hierarchy(&descs), &set.contributions)?;
    let leaves: Vec<HierarchyNode> = tree.leaves().into_iter().cloned().collect();
    let total = leaves.len();
    let kept: HashSet<String> = sort_filter(&leaves, sort, q.min_abs, q.topk)
        .into_iter()
        .filter_map(|n| n.feature_id)
        .collect();
    tree.retain_leaves(&|f| kept.contains(f));
    tree.sort(sort);

    let leaf = |fid: &str, phi: f64| -> Result<FeatureLeaf> {
        let d = state.descriptor(fid)?;
        let col = state
            .matrix
            .column_index(fid)
            .ok_or_else(|| clinexplain::Error::UnknownFeature(fid.to_string()))?;
        let raw = state.matrix.get(row, col);
        let (reference, fl) = if d.is_categorical() {
            (None, None)
        } else {
            let r = entry.feature_reference(fid);
            let fl = raw.map(|v| flag(v, &r));
            (Some(r), fl)
        };
        Ok(FeatureLeaf {
            feature_id: fid.to_string(),
            display_name: d.display_name.clone(),
            kind: d.kind,
            value_type: d.value_type,
            source_entity: d.source_entity.clone(),
            item_id: d.item_id.clone(),
            window: d.window,
            value: leaf_value(d, raw),
            phi,
            reference,
            flag: fl,
        })
    };
    fn convert(n: &HierarchyNode, leaf: &dyn Fn(&str, f64) -> Result<FeatureLeaf>) -> Result<FeatureNode> {
        Ok(FeatureNode {
            label: n.label.clone(),
            group_contribution: n.group_contribution,
            feature: match &n.feature_id {
                Some(f) => Some(leaf(f, n.group_contribution)?),
                None => None,
            },
            children: n.children.iter().map(|c| convert(c, leaf)).collect::<Result<_>>()?,
        })
    }
    Ok(FeaturesResponse {
        patient_id: patient.to_string(),
        surgery_id: set.row_key.clone(),
        target,
        cohort_id: entry.cohort.cohort_id.clone(),
        base_value: set.base_value,
        prediction: set.prediction,
        method: set.method,
        background_rows: set.background_rows,
        total_features: total,
        shown_features: kept.len(),
        root: convert(&tree, &leaf)?,
    })
}

async fn features(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<FeaturesQuery>,
) -> Result<Json<FeaturesResponse>> {
    blocking(s, move |s| patient_features(s, &id, &q)).await
}

pub fn feature_distribution(
    state: &AppState,
    patient: &str,
    feature_id: &str,
    cohort: Option<&str>,
) -> Result<Distribution> {
    let row = state.patient_row(patient)?;
    let entry = state.cohort_by_id(cohort)?;
    let d = state.descriptor(feature_id)?;
    let col = state
        .matrix
        .column_index(feature_id)
        .ok_or_else(|| clinexplain::Error::UnknownFeature(feature_id.to_string()))?;
    let values = |rows: &[usize]| -> Vec<f64> { rows.iter().filter_map(|&r| state.matrix.get(r, col)).collect() };
    let (low, high) = (values(&entry.low_rows), values(&entry.high_rows));
    let value = state.matrix.get(row, col);
    Ok(if d.is_categorical() {
        categorical_distribution(&d.categories, &low, &high, value)
    } else {
        numeric_distribution(&low, &high, value, DEFAULT_BINS)?
    })
}

async fn distribution(
    State(s): State<Arc<AppState>>,
    Path((id, feature)): Path<(String, String)>,
    Query(q): Query<CohortQuery>,
) -> Result<Json<Distribution>> {
    blocking(s, move |s| feature_distribution(s, &id, &feature, q.cohort.as_deref())).await
}

// ---- series ----

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SeriesQuery {
    pub cohort: Option<String>,
    /// One or more comma-separated dynamic feature ids over this item.
    pub explain_feature: Option<String>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPointView {
    pub timestamp: Timestamp,
    pub value: f64,
    pub record_id: String,
    pub flag: Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesResponse {
    pub patient_id: String,
    pub item_id: String,
    pub entity: String,
    pub unit: Option<String>,
    pub cohort_id: String,
    pub window: Window,
    pub reference: Reference,
    pub points: Vec<SeriesPointView>,
    /// Indices of points outside the reference band.
    pub out_of_range: Vec<usize>,
    pub segments: Vec<SegmentSet>,
    pub overlay: Option<MergedOverlay>,
}

pub fn patient_series(state: &AppState, patient: &str, item: &str, q: &SeriesQuery) -> Result<SeriesResponse> {
    let row = state.patient_row(patient)?;
    let entry = state.cohort_by_id(q.cohort.as_deref())?;
    let entity = state
        .dataset
        .item_entity(item)
        .ok_or_else(|| ServiceError::NotFound(format!("item {item}")))?
        .to_string();
    if q.k == Some(0) {
        return Err(ServiceError::BadRequest("k must be positive".into()));
    }
    let explain: Vec<&FeatureDescriptor> = match q.explain_feature.as_deref() {
        None | Some("") => vec![],
        Some(list) => list
            .split(',')
            .map(|f| state.descriptor(f.trim()))
            .collect::<Result<_>>()?,
    };
    for d in &explain {
        if !d.is_dynamic() || d.item_id.as_deref() != Some(item) {
            return Err(ServiceError::BadRequest(format!(
                "{} is not a temporal feature of {item}",
                d.feature_id
            )));
        }
    }
    let windows = state.windows(row)?;
    let window = match explain.first() {
        Some(d) => {
            if explain.iter().any(|e| e.window != d.window) {
                return Err(ServiceError::BadRequest(
                    "explained features must share one window".into(),
                ));
            }
            windows.get(d.window)
        }
        None => state
            .dataset
            .rows_of_patient(ADMISSIONS, patient)
            .first()
            .and_then(|&r| state.dataset.span_of(ADMISSIONS, r))
            .unwrap_or(Window::new(windows.pre.start, windows.during.end)),
    };
    let series = state.dataset.get_series(patient, item, window)?;
    let reference = entry.record_reference(item);
    let points: Vec<SeriesPointView> = series
        .points
        .iter()
        .map(|p| SeriesPointView {
            timestamp: p.timestamp,
            value: p.value,
            record_id: p.record_id.to_string(),
            flag: flag(p.value, &reference),
        })
        .collect();
    let out_of_range = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.flag != Flag::Within)
        .map(|(i, _)| i)
        .collect();

    let mut segments = Vec::new();
    if !explain.is_empty() {
        let times: Vec<Timestamp> = series.points.iter().map(|p| p.timestamp).collect();
        let k =
            q.k.or(state.config.k)
                .unwrap_or_else(|| default_window(&times))
                .min(series.len().max(1));
        for d in &explain {
            let r = entry.feature_reference(&d.feature_id);
            segments.push(influential_segments(&series, d, &r, k, &state.config.z_grid)?);
        }
    }
    let overlay = if segments.is_empty() {
        None
    } else {
        Some(merge_overlays(&series, &segments)?)
    };
    let unit = state
        .dataset
        .events()
        .iter()
        .find(|e| *e.item_id == *item && !e.unit.is_empty())
        .map(|e| e.unit.to_string());
    Ok(SeriesResponse {
        patient_id: patient.to_string(),
        item_id: item.to_string(),
        entity,
        unit,
        cohort_id: entry.cohort.cohort_id.clone(),
        window,
        reference,
        points,
        out_of_range,
        segments,
        overlay,
    })
}

async fn series(
    State(s): State<Arc<AppState>>,
    Path((id, item)): Path<(String, String)>,
    Query(q): Query<SeriesQuery>,
) -> Result<Json<SeriesResponse>> {
    blocking(s, move |s| patient_series(s, &id, &item, &q)).await
}

// ---- timeline ----

#[derive(Debug, Clone, Default, Deserialize)]
pub struct TimelineQuery {
    pub interval: Option<String>,
    pub cohort: Option<String>,
}

pub fn patient_timeline(state: &AppState, patient: &str, q: &TimelineQuery) -> Result<Timeline> {
    let interval: TimelineInterval = q.interval.as_deref().unwrap_or("4h").parse()?;
    let cohort = q
        .cohort
        .as_deref()
        .ok_or_else(|| ServiceError::BadRequest("timeline needs a cohort for its reference ranges".into()))?;
    let entry = state.cohort_by_id(Some(cohort))?;
    Ok(timeline_summary(&state.dataset, patient, interval, &entry.record_refs)?)
}

async fn timeline(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TimelineQuery>,
) -> Result<Json<Timeline>> {
    blocking(s, move |s| patient_timeline(s, &id, &q)).await
}

// ---- what-if ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub target: Label,
    pub feature_id: String,
    #[serde(default)]
    pub cohort_id: Option<String>,
}

pub fn patient_whatif(state: &AppState, patient: &str, req: &WhatIfRequest) -> Result<WhatIfResult> {
    let row = state.patient_row(patient)?;
    let entry = state.cohort_by_id(req.cohort_id.as_deref())?;
    let d = state.descriptor(&req.feature_id)?;
    let reference = if d.is_categorical() {
        Reference::Undefined { n: 0 }
    } else {
        entry.feature_reference(&req.feature_id)
    };
    let model = state.model(req.target)?;
    let background = state.background(&entry, model)?;
    let x = state.model_input(model, row);
    Ok(whatif(
        model,
        &state.matrix.row_keys[row],
        &x,
        &req.feature_id,
        &reference,
        &background,
        &state.config.explain(),
    )?)
}

async fn what_if(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<WhatIfRequest>,
) -> Result<Json<WhatIfResult>> {
    blocking(s, move |s| patient_whatif(s, &id, &req)).await
}
