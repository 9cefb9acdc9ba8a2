//! Relational feature synthesis with record-level lineage.
//!
//! Features hang off a target entity (surgeries by default). Static features
//! copy a numeric or categorical cell from the target row or one of its
//! ancestors; dynamic features aggregate one item's events inside a window
//! anchored on the target row. Every value can be traced back to the exact
//! records it was computed from.

mod aggregate;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::Aggregation;
pub(crate) use aggregate::{line_fit, mean, sample_sd};

use crate::error::{Error, Result};
use crate::store::{Cell, ColumnKind, Dataset, RecordSeries, Timestamp, Window, PATIENTS, SURGERIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WindowKind {
    /// From admission start up to (not including) surgery start.
    #[serde(rename = "pre-surgery")]
    PreSurgery,
    /// Surgery start to surgery end.
    #[serde(rename = "in-surgery")]
    InSurgery,
}

impl WindowKind {
    pub const ALL: [WindowKind; 2] = [WindowKind::PreSurgery, WindowKind::InSurgery];

    pub fn as_str(self) -> &'static str {
        match self {
            WindowKind::PreSurgery => "pre-surgery",
            WindowKind::InSurgery => "in-surgery",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Numeric,
    Categorical,
}

/// Where a feature's value comes from. Static features point at one cell,
/// dynamic ones at an (entity, item, window) record set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageQuery {
    pub entity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<String>,
    pub window: WindowKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub feature_id: String,
    pub display_name: String,
    pub kind: FeatureKind,
    pub value_type: ValueType,
    pub source_entity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
    pub window: WindowKind,
    /// `[phase, group, leaf]`.
    pub hierarchy_path: Vec<String>,
    /// Category codes for categorical features; the matrix stores the index.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    pub lineage: LineageQuery,
}

impl FeatureDescriptor {
    pub fn is_dynamic(&self) -> bool {
        self.kind == FeatureKind::Dynamic
    }

    pub fn is_categorical(&self) -> bool {
        self.value_type == ValueType::Categorical
    }

    /// Evaluates a dynamic feature on an arbitrary (hours, values) series.
    pub fn evaluate(&self, hours: &[f64], values: &[f64]) -> Option<f64> {
        self.aggregation.and_then(|a| a.apply(hours, values))
    }
}

/// Reference from a feature to one raw record or table cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub entity: String,
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FeatureOptions {
    pub target_entity: String,
    pub aggregations: Vec<Aggregation>,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            target_entity: SURGERIES.to_string(),
            aggregations: Aggregation::ALL.to_vec(),
        }
    }
}

fn group_label(entity: &str) -> String {
    match entity {
        PATIENTS => "demographics".to_string(),
        "admissions" => "admission".to_string(),
        SURGERIES => "surgery info".to_string(),
        other => other.to_string(),
    }
}

/// Target entity followed by its ancestors reachable through foreign keys,
/// nearest first.
fn ancestry(dataset: &Dataset, target: &str) -> Vec<String> {
    let schema = dataset.schema();
    let mut out = vec![target.to_string()];
    let mut i = 0;
    while i < out.len() {
        if let Some(t) = schema.table(&out[i]) {
            for fk in &t.foreign_keys {
                if !out.contains(&fk.entity) {
                    out.push(fk.entity.clone());
                }
            }
        }
        i += 1;
    }
    out
}

/// Enumerates static and dynamic feature descriptors for `target_entity`.
pub fn synthesize_descriptors(dataset: &Dataset, options: &FeatureOptions) -> Result<Vec<FeatureDescriptor>> {
    let schema = dataset.schema();
    let target = schema
        .table(&options.target_entity)
        .ok_or_else(|| Error::Schema(format!("target entity {} is not declared", options.target_entity)))?;
    if target.span.is_none() {
        return Err(Error::Schema(format!(
            "target entity {} declares no time span",
            options.target_entity
        )));
    }

    let mut out = Vec::new();
    // patients first, then admissions, then the target itself
    let mut path = ancestry(dataset, &options.target_entity);
    path.reverse();
    for entity in &path {
        let ts = schema.table(entity).expect("ancestry only yields declared entities");
        if ts.events.is_some() {
            continue;
        }
        let window = if *entity == options.target_entity {
            WindowKind::InSurgery
        } else {
            WindowKind::PreSurgery
        };
        let table = dataset.table(entity).expect("declared");
        for col in &ts.columns {
            if col.name == ts.primary_key
                || ts.foreign_keys.iter().any(|fk| fk.column == col.name)
                || ts.label_columns.contains(&col.name)
            {
                continue;
            }
            let (value_type, categories) = match col.kind {
                ColumnKind::Numeric => (ValueType::Numeric, vec![]),
                ColumnKind::Categorical => {
                    let ci = ts.column_index(&col.name).expect("declared");
                    let cats: BTreeSet<&str> = table.rows().iter().filter_map(|r| r[ci].as_str()).collect();
                    (ValueType::Categorical, cats.into_iter().map(String::from).collect())
                }
                _ => continue,
            };
            out.push(FeatureDescriptor {
                feature_id: format!("{entity}.{}", col.name),
                display_name: col.name.clone(),
                kind: FeatureKind::Static,
                value_type,
                source_entity: entity.clone(),
                item_id: None,
                aggregation: None,
                window,
                hierarchy_path: vec![window.as_str().into(), group_label(entity), col.name.clone()],
                categories,
                lineage: LineageQuery {
                    entity: entity.clone(),
                    column: Some(col.name.clone()),
                    item: None,
                    window,
                },
            });
        }
    }

    let targets = dataset.table(&options.target_entity).expect("declared");
    let windows: Vec<_> = (0..targets.len())
        .map(|r| target_windows(dataset, &options.target_entity, r))
        .collect::<Result<_>>()?;
    for ts in &schema.entities {
        if ts.events.is_none() {
            continue;
        }
        for item in dataset.items_of(&ts.entity_name) {
            for kind in WindowKind::ALL {
                let present = windows
                    .iter()
                    .any(|(patient, w)| !dataset.series_slice(patient, item, w.get(kind)).is_empty());
                if !present {
                    continue;
                }
                for &agg in &options.aggregations {
                    out.push(FeatureDescriptor {
                        feature_id: format!("{}.{item}.{agg}.{}", ts.entity_name, kind.as_str()),
                        display_name: format!("{item} ({})", agg.title()),
                        kind: FeatureKind::Dynamic,
                        value_type: ValueType::Numeric,
                        source_entity: ts.entity_name.clone(),
                        item_id: Some(item.to_string()),
                        aggregation: Some(agg),
                        window: kind,
                        hierarchy_path: vec![kind.as_str().into(), item.to_string(), agg.title().into()],
                        categories: vec![],
                        lineage: LineageQuery {
                            entity: ts.entity_name.clone(),
                            column: None,
                            item: Some(item.to_string()),
                            window: kind,
                        },
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct TargetWindows {
    pub pre: Window,
    pub during: Window,
}

impl TargetWindows {
    pub fn get(&self, kind: WindowKind) -> Window {
        match kind {
            WindowKind::PreSurgery => self.pre,
            WindowKind::InSurgery => self.during,
        }
    }
}

/// Owning patient and the concrete windows of one target row.
pub fn target_windows(dataset: &Dataset, target_entity: &str, row: usize) -> Result<(String, TargetWindows)> {
    let table = dataset
        .table(target_entity)
        .ok_or_else(|| Error::Schema(format!("no entity {target_entity}")))?;
    let ts = table.schema();
    let key = table.key(row).to_string();
    let during = dataset
        .span_of(target_entity, row)
        .ok_or_else(|| Error::InvalidInput(format!("{target_entity} {key} has no start/end time")))?;
    let patient = if target_entity == PATIENTS {
        key.clone()
    } else {
        let fk = ts
            .foreign_key_to(PATIENTS)
            .ok_or_else(|| Error::Schema(format!("{target_entity} has no foreign key to patients")))?;
        table
            .cell(row, &fk.column)
            .and_then(Cell::as_str)
            .map(String::from)
            .ok_or_else(|| Error::InvalidInput(format!("{target_entity} {key} has no patient")))?
    };
    // pre-surgery starts at the enclosing span (admission) when there is one
    let mut pre_start = Timestamp(i64::MIN);
    for fk in &ts.foreign_keys {
        let Some(parent) = dataset.table(&fk.entity) else {
            continue;
        };
        if parent.schema().span.is_none() {
            continue;
        }
        if let Some(pk) = table.cell(row, &fk.column).and_then(Cell::as_str) {
            if let Some(prow) = parent.row_by_key(pk) {
                if let Some(span) = dataset.span_of(&fk.entity, prow) {
                    pre_start = span.start;
                    break;
                }
            }
        }
    }
    let pre = Window::new(pre_start, Timestamp(during.start.0 - 1));
    Ok((patient, TargetWindows { pre, during }))
}

/// Precomputed per-row context so repeated feature evaluation avoids lookups.
#[derive(Debug, Clone)]
pub struct FeatureContext<'a> {
    dataset: &'a Dataset,
    target_entity: String,
    rows: Vec<(String, TargetWindows)>,
}

impl<'a> FeatureContext<'a> {
    pub fn new(dataset: &'a Dataset, target_entity: &str) -> Result<Self> {
        let table = dataset
            .table(target_entity)
            .ok_or_else(|| Error::Schema(format!("no entity {target_entity}")))?;
        let rows = (0..table.len())
            .map(|r| target_windows(dataset, target_entity, r))
            .collect::<Result<_>>()?;
        Ok(FeatureContext {
            dataset,
            target_entity: target_entity.to_string(),
            rows,
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn target_entity(&self) -> &str {
        &self.target_entity
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row_of(&self, target_key: &str) -> Result<usize> {
        self.dataset
            .table(&self.target_entity)
            .and_then(|t| t.row_by_key(target_key))
            .ok_or_else(|| Error::UnknownTarget(target_key.to_string()))
    }

    /// First target row (by start time) belonging to `patient`.
    pub fn row_of_patient(&self, patient: &str) -> Result<usize> {
        if !self.dataset.has_patient(patient) {
            return Err(Error::UnknownPatient(patient.to_string()));
        }
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, (p, _))| p == patient)
            .min_by_key(|(i, (_, w))| (w.during.start, *i))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::UnknownTarget(format!("no {} row for patient {patient}", self.target_entity)))
    }

    pub fn patient(&self, row: usize) -> &str {
        &self.rows[row].0
    }

    pub fn windows(&self, row: usize) -> TargetWindows {
        self.rows[row].1
    }

    pub fn target_key(&self, row: usize) -> &str {
        self.dataset.table(&self.target_entity).expect("checked").key(row)
    }

    /// Lineage series of a dynamic feature for one target row.
    pub fn series(&self, descriptor: &FeatureDescriptor, row: usize) -> Result<RecordSeries> {
        let item = descriptor
            .item_id
            .as_deref()
            .ok_or_else(|| Error::InvalidInput(format!("{} is not a dynamic feature", descriptor.feature_id)))?;
        let (patient, windows) = &self.rows[row];
        self.dataset.get_series(patient, item, windows.get(descriptor.window))
    }

    /// Table row holding a static feature's cell for this target row.
    fn static_row(&self, descriptor: &FeatureDescriptor, row: usize) -> Option<usize> {
        let entity = &descriptor.source_entity;
        if *entity == self.target_entity {
            return Some(row);
        }
        let mut entity_now = self.target_entity.clone();
        let mut row_now = row;
        // walk up foreign keys until the source entity is reached
        for _ in 0..8 {
            let t = self.dataset.table(&entity_now)?;
            if let Some(fk) = t.schema().foreign_key_to(entity) {
                let key = t.cell(row_now, &fk.column)?.as_str()?;
                return self.dataset.table(entity)?.row_by_key(key);
            }
            let fk = t.schema().foreign_keys.first()?;
            let key = t.cell(row_now, &fk.column)?.as_str()?;
            row_now = self.dataset.table(&fk.entity)?.row_by_key(key)?;
            entity_now = fk.entity.clone();
        }
        None
    }

    /// Value of one feature for one target row; `None` is missing.
    pub fn compute(&self, descriptor: &FeatureDescriptor, row: usize) -> Result<Option<f64>> {
        match descriptor.kind {
            FeatureKind::Dynamic => {
                let series = self.series(descriptor, row)?;
                Ok(descriptor.evaluate(&series.hours(), &series.values()))
            }
            FeatureKind::Static => {
                let column = descriptor.lineage.column.as_deref().unwrap_or(&descriptor.display_name);
                let Some(srow) = self.static_row(descriptor, row) else {
                    return Ok(None);
                };
                let table = self.dataset.table(&descriptor.source_entity).expect("resolved");
                let cell = table
                    .cell(srow, column)
                    .ok_or_else(|| Error::UnknownFeature(descriptor.feature_id.clone()))?;
                Ok(match (descriptor.value_type, cell) {
                    (ValueType::Numeric, Cell::Num(v)) => Some(*v),
                    (ValueType::Categorical, Cell::Text(s)) => {
                        descriptor.categories.iter().position(|c| **c == **s).map(|i| i as f64)
                    }
                    _ => None,
                })
            }
        }
    }

    /// Exactly the records `compute` aggregates, in time order.
    pub fn resolve_lineage(&self, descriptor: &FeatureDescriptor, row: usize) -> Result<Vec<RecordRef>> {
        match descriptor.kind {
            FeatureKind::Dynamic => Ok(self
                .series(descriptor, row)?
                .points
                .iter()
                .map(|p| RecordRef {
                    entity: descriptor.source_entity.clone(),
                    record_id: p.record_id.to_string(),
                    column: None,
                })
                .collect()),
            FeatureKind::Static => {
                let Some(srow) = self.static_row(descriptor, row) else {
                    return Ok(vec![]);
                };
                let table = self.dataset.table(&descriptor.source_entity).expect("resolved");
                Ok(vec![RecordRef {
                    entity: descriptor.source_entity.clone(),
                    record_id: table.key(srow).to_string(),
                    column: descriptor.lineage.column.clone(),
                }])
            }
        }
    }
}

/// Convenience wrapper: value of `descriptor` for the row keyed `target_key`.
pub fn compute_feature(dataset: &Dataset, descriptor: &FeatureDescriptor, target_key: &str) -> Result<Option<f64>> {
    let ctx = FeatureContext::new(dataset, SURGERIES)?;
    let row = ctx.row_of(target_key)?;
    ctx.compute(descriptor, row)
}

/// One row per target-entity instance, columns in descriptor order, with an
/// explicit missingness mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub feature_ids: Vec<String>,
    pub row_keys: Vec<String>,
    pub patient_ids: Vec<String>,
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl FeatureMatrix {
    pub fn from_rows(
        feature_ids: Vec<String>,
        row_keys: Vec<String>,
        patient_ids: Vec<String>,
        rows: &[Vec<Option<f64>>],
    ) -> Result<Self> {
        let m = feature_ids.len();
        if rows.len() != row_keys.len() || rows.len() != patient_ids.len() {
            return Err(Error::InvalidInput("row keys do not match rows".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * m);
        let mut missing = Vec::with_capacity(rows.len() * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::InvalidInput(format!("row has {} values, expected {m}", r.len())));
            }
            for v in r {
                values.push(v.unwrap_or(0.0));
                missing.push(v.is_none());
            }
        }
        Ok(FeatureMatrix {
            feature_ids,
            row_keys,
            patient_ids,
            values,
            missing,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_keys.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.n_features() + col;
        (!self.missing[i]).then_some(self.values[i])
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[row * self.n_features() + col]
    }

    pub fn row(&self, row: usize) -> Vec<Option<f64>> {
        (0..self.n_features()).map(|c| self.get(row, c)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<Option<f64>>> {
        (0..self.n_rows()).map(|r| self.row(r)).collect()
    }

    pub fn column(&self, col: usize) -> Vec<Option<f64>> {
        (0..self.n_rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn column_index(&self, feature_id: &str) -> Option<usize> {
        self.feature_ids.iter().position(|f| f == feature_id)
    }

    pub fn row_index(&self, row_key: &str) -> Option<usize> {
        self.row_keys.iter().position(|k| k == row_key)
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select(&self, feature_ids: &[String]) -> Result<FeatureMatrix> {
        let cols: Vec<usize> = feature_ids
            .iter()
            .map(|f| self.column_index(f).ok_or_else(|| Error::UnknownFeature(f.clone())))
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<Option<f64>>> = (0..self.n_rows())
            .map(|r| cols.iter().map(|&c| self.get(r, c)).collect())
            .collect();
        FeatureMatrix::from_rows(
            feature_ids.to_vec(),
            self.row_keys.clone(),
            self.patient_ids.clone(),
            &rows,
        )
    }

    /// Writes the matrix as CSV (key column then feature ids; missing is empty)
    /// and a JSON sidecar with the descriptors.
    pub fn export(&self, descriptors: &[FeatureDescriptor], csv_path: &Path, sidecar: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(csv_path)?;
        let mut header = vec!["row_key".to_string()];
        header.extend(self.feature_ids.iter().cloned());
        w.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut rec = vec![self.row_keys[r].clone()];
            rec.extend((0..self.n_features()).map(|c| self.get(r, c).map(|v| format!("{v}")).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        let text = serde_json::to_string_pretty(descriptors)?;
        fs::write(sidecar, text + "\n").map_err(|e| Error::io(sidecar, e))?;
        Ok(())
    }
}

/// Computes every descriptor for every target row. Rows are evaluated in
/// parallel; output order is fixed.
pub fn build_matrix(ctx: &FeatureContext<'_>, descriptors: &[FeatureDescriptor]) -> Result<FeatureMatrix> {
    if descriptors.is_empty() {
        return Err(Error::InvalidInput("no feature descriptors".into()));
    }
    let rows: Vec<Vec<Option<f64>>> = (0..ctx.row_count())
        .into_par_iter()
        .map(|r| {
            descriptors
                .iter()
                .map(|d| ctx.compute(d, r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let row_keys = (0..ctx.row_count()).map(|r| ctx.target_key(r).to_string()).collect();
    let patient_ids = (0..ctx.row_count()).map(|r| ctx.patient(r).to_string()).collect();
    FeatureMatrix::from_rows(
        descriptors.iter().map(|d| d.feature_id.clone()).collect(),
        row_keys,
        patient_ids,
        &rows,
    )
}

/// Descriptor lookup by id.
pub fn descriptor_index(descriptors: &[FeatureDescriptor]) -> HashMap<&str, &FeatureDescriptor> {
    descriptors.iter().map(|d| (d.feature_id.as_str(), d)).collect()
}
