//! Cohorts, low/high-risk splits, reference ranges and the summaries built
//! on them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{mean, sample_sd, FeatureMatrix};
use crate::label::{labels, Label};
use crate::store::{Cell, ColumnKind, Dataset, Timestamp, Window, ADMISSIONS, CHARTEVENTS, LABTESTS, VITALSIGNS};

/// Multiplier on the SD for the reference interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// Closed numeric interval on a column.
    NumericRange {
        entity: String,
        column: String,
        low: f64,
        high: f64,
    },
    /// Membership in a set of categorical values.
    Categorical {
        entity: String,
        column: String,
        values: Vec<String>,
    },
}

impl Predicate {
    fn target(&self) -> (&str, &str) {
        match self {
            Predicate::NumericRange { entity, column, .. } | Predicate::Categorical { entity, column, .. } => {
                (entity, column)
            }
        }
    }

    fn matches(&self, cell: &Cell) -> bool {
        match (self, cell) {
            (Predicate::NumericRange { low, high, .. }, Cell::Num(v)) => low <= v && v <= high,
            (Predicate::Categorical { values, .. }, Cell::Text(s)) => values.iter().any(|v| **v == **s),
            _ => false,
        }
    }
}

/// Conjunction of predicates over static attributes. A patient satisfies a
/// predicate on a child entity when any of their rows does.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortSelector {
    #[serde(default)]
    pub predicates: Vec<Predicate>,
}

impl CohortSelector {
    pub fn everyone() -> Self {
        CohortSelector::default()
    }

    /// Order-insensitive form used for hashing.
    pub fn canonical(&self) -> CohortSelector {
        let mut predicates: Vec<Predicate> = self
            .predicates
            .iter()
            .cloned()
            .map(|p| match p {
                Predicate::Categorical {
                    entity,
                    column,
                    mut values,
                } => {
                    values.sort();
                    values.dedup();
                    Predicate::Categorical { entity, column, values }
                }
                other => other,
            })
            .collect();
        predicates.sort_by_cached_key(|p| serde_json::to_string(p).unwrap_or_default());
        predicates.dedup();
        CohortSelector { predicates }
    }

    /// Stable identifier derived from the canonical selector.
    pub fn id(&self) -> String {
        let json = serde_json::to_string(&self.canonical()).expect("selector serializes");
        let digest = Sha256::digest(json.as_bytes());
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        format!("c-{hex}")
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        for p in &self.predicates {
            let (entity, column) = p.target();
            let table = dataset
                .table(entity)
                .ok_or_else(|| Error::UnknownAttribute(format!("{entity}.{column}")))?;
            let col = table
                .schema()
                .column(column)
                .ok_or_else(|| Error::UnknownAttribute(format!("{entity}.{column}")))?;
            match p {
                Predicate::NumericRange { low, high, .. } => {
                    if col.kind != ColumnKind::Numeric {
                        return Err(Error::InvalidInput(format!("{entity}.{column} is not numeric")));
                    }
                    if low.is_nan() || high.is_nan() {
                        return Err(Error::InvalidInput(format!("{entity}.{column}: NaN bound")));
                    }
                    if low > high {
                        return Err(Error::InvalidInput(format!(
                            "{entity}.{column}: low {low} exceeds high {high}"
                        )));
                    }
                }
                Predicate::Categorical { .. } => {
                    if matches!(col.kind, ColumnKind::Numeric | ColumnKind::Timestamp) {
                        return Err(Error::InvalidInput(format!("{entity}.{column} is not categorical")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub cohort_id: String,
    pub selector: CohortSelector,
    /// Patient ids in patients-table order.
    pub patients: Vec<String>,
}

impl Cohort {
    pub fn size(&self) -> usize {
        self.patients.len()
    }
}

pub fn select_cohort(dataset: &Dataset, selector: &CohortSelector) -> Result<Cohort> {
    selector.validate(dataset)?;
    let mut patients = Vec::new();
    'patients: for pid in dataset.patient_ids() {
        for p in &selector.predicates {
            let (entity, column) = p.target();
            let table = dataset.table(entity).expect("validated");
            let ok = dataset
                .rows_of_patient(entity, pid)
                .into_iter()
                .any(|r| table.cell(r, column).is_some_and(|c| p.matches(c)));
            if !ok {
                continue 'patients;
            }
        }
        patients.push(pid.to_string());
    }
    Ok(Cohort {
        cohort_id: selector.id(),
        selector: selector.canonical(),
        patients,
    })
}

/// Whether each patient has at least one positive complication label on any
/// of their target rows. Missing labels count as negative.
pub fn complication_status(dataset: &Dataset, target_entity: &str) -> Result<HashMap<String, bool>> {
    let table = dataset
        .table(target_entity)
        .ok_or_else(|| Error::Schema(format!("no entity {target_entity}")))?;
    let fk = table
        .schema()
        .foreign_key_to(crate::store::PATIENTS)
        .ok_or_else(|| Error::Schema(format!("{target_entity} has no foreign key to patients")))?
        .column
        .clone();
    let mut out: HashMap<String, bool> = dataset
        .patient_ids()
        .into_iter()
        .map(|p| (p.to_string(), false))
        .collect();
    for label in Label::ALL {
        let ys = labels(dataset, target_entity, label)?;
        for (r, y) in ys.into_iter().enumerate() {
            if y == Some(true) {
                if let Some(pid) = table.cell(r, &fk).and_then(Cell::as_str) {
                    out.insert(pid.to_string(), true);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSplit {
    /// No complication.
    pub low: Vec<String>,
    /// One or more complications.
    pub high: Vec<String>,
}

pub fn split_risk(cohort: &Cohort, complicated: &HashMap<String, bool>) -> RiskSplit {
    let (high, low) = cohort
        .patients
        .iter()
        .cloned()
        .partition(|p| complicated.get(p).copied().unwrap_or(false));
    RiskSplit { low, high }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRange {
    pub mean: f64,
    pub sd: f64,
    pub low: f64,
    pub high: f64,
    pub n: usize,
}

/// A reference range, or the reason there is none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Reference {
    Defined(ReferenceRange),
    Undefined { n: usize },
}

impl Reference {
    /// Mean plus or minus 1.96 sample SDs; undefined below two values.
    pub fn from_values(values: &[f64]) -> Reference {
        match sample_sd(values) {
            Some(sd) => {
                let m = mean(values);
                Reference::Defined(ReferenceRange {
                    mean: m,
                    sd,
                    low: m - Z95 * sd,
                    high: m + Z95 * sd,
                    n: values.len(),
                })
            }
            None => Reference::Undefined { n: values.len() },
        }
    }

    pub fn range(&self) -> Option<&ReferenceRange> {
        match self {
            Reference::Defined(r) => Some(r),
            Reference::Undefined { .. } => None,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Reference::Defined(r) => r.n,
            Reference::Undefined { n } => *n,
        }
    }
}

/// Reference over the non-missing values of one feature column for the given
/// matrix rows.
pub fn feature_reference(matrix: &FeatureMatrix, rows: &[usize], feature_id: &str) -> Result<Reference> {
    let col = matrix
        .column_index(feature_id)
        .ok_or_else(|| Error::UnknownFeature(feature_id.to_string()))?;
    let values: Vec<f64> = rows.iter().filter_map(|&r| matrix.get(r, col)).collect();
    Ok(Reference::from_values(&values))
}

/// Reference pooled over every event of `item_id` of the given patients.
pub fn record_reference(dataset: &Dataset, patients: &[String], item_id: &str) -> Reference {
    let events = dataset.events();
    let values: Vec<f64> = patients
        .iter()
        .flat_map(|p| dataset.series_slice(p, item_id, Window::everything()))
        .map(|&i| events[i as usize].value)
        .collect();
    Reference::from_values(&values)
}

/// Record references for every item of the event entities.
pub fn record_references(dataset: &Dataset, patients: &[String]) -> BTreeMap<String, Reference> {
    let mut out = BTreeMap::new();
    for t in dataset.tables() {
        if t.schema().events.is_none() {
            continue;
        }
        for item in dataset.items_of(t.name()) {
            out.insert(item.to_string(), record_reference(dataset, patients, item));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Below,
    Within,
    Above,
}

/// Position against a closed range; an undefined range counts as within.
pub fn flag(value: f64, reference: &Reference) -> Flag {
    match reference {
        Reference::Defined(r) if value > r.high => Flag::Above,
        Reference::Defined(r) if value < r.low => Flag::Below,
        _ => Flag::Within,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    Numeric {
        /// `bins + 1` shared edges.
        edges: Vec<f64>,
        low: Vec<usize>,
        high: Vec<usize>,
        value: Option<f64>,
        value_bin: Option<usize>,
    },
    Categorical {
        categories: Vec<String>,
        low: Vec<usize>,
        high: Vec<usize>,
        value: Option<String>,
    },
}

pub const DEFAULT_BINS: usize = 20;

/// Equal-width histograms of both groups over identical edges that also
/// cover the target value.
pub fn numeric_distribution(low: &[f64], high: &[f64], value: Option<f64>, bins: usize) -> Result<Distribution> {
    if bins == 0 {
        return Err(Error::InvalidInput("bins must be positive".into()));
    }
    let all = low.iter().chain(high).chain(value.iter()).copied();
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let bin_of = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
    let count = |xs: &[f64]| {
        let mut c = vec![0; bins];
        for &x in xs {
            c[bin_of(x)] += 1;
        }
        c
    };
    Ok(Distribution::Numeric {
        edges,
        low: count(low),
        high: count(high),
        value,
        value_bin: value.map(bin_of),
    })
}

/// Per-category counts; values are category indices as stored in the
/// feature matrix.
pub fn categorical_distribution(categories: &[String], low: &[f64], high: &[f64], value: Option<f64>) -> Distribution {
    let count = |xs: &[f64]| {
        let mut c = vec![0; categories.len()];
        for &x in xs {
            if let Some(slot) = c.get_mut(x as usize) {
                *slot += 1;
            }
        }
        c
    };
    Distribution::Categorical {
        categories: categories.to_vec(),
        low: count(low),
        high: count(high),
        value: value.and_then(|v| categories.get(v as usize).cloned()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimelineInterval {
    #[serde(rename = "1h")]
    H1,
    #[serde(rename = "4h")]
    H4,
    #[serde(rename = "8h")]
    H8,
}

impl TimelineInterval {
    pub fn seconds(self) -> i64 {
        match self {
            TimelineInterval::H1 => 3600,
            TimelineInterval::H4 => 4 * 3600,
            TimelineInterval::H8 => 8 * 3600,
        }
    }
}

impl fmt::Display for TimelineInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimelineInterval::H1 => "1h",
            TimelineInterval::H4 => "4h",
            TimelineInterval::H8 => "8h",
        })
    }
}

impl FromStr for TimelineInterval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1h" => Ok(TimelineInterval::H1),
            "4h" => Ok(TimelineInterval::H4),
            "8h" => Ok(TimelineInterval::H8),
            other => Err(Error::InvalidInput(format!(
                "interval must be 1h, 4h or 8h, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineCell {
    pub start: Timestamp,
    pub end: Timestamp,
    pub count: usize,
    pub abnormal_count: usize,
    pub abnormal_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub source: String,
    pub cells: Vec<TimelineCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub patient_id: String,
    pub interval: TimelineInterval,
    pub start: Timestamp,
    pub end: Timestamp,
    pub rows: Vec<TimelineRow>,
}

pub const TIMELINE_SOURCES: [&str; 3] = [LABTESTS, VITALSIGNS, CHARTEVENTS];

/// Event counts and out-of-range fractions per source over equal intervals
/// tiling the patient's first admission. Items without a defined reference
/// count as normal.
pub fn timeline_summary(
    dataset: &Dataset,
    patient_id: &str,
    interval: TimelineInterval,
    references: &BTreeMap<String, Reference>,
) -> Result<Timeline> {
    if !dataset.has_patient(patient_id) {
        return Err(Error::UnknownPatient(patient_id.to_string()));
    }
    let adm = dataset
        .rows_of_patient(ADMISSIONS, patient_id)
        .into_iter()
        .filter_map(|r| dataset.span_of(ADMISSIONS, r))
        .min_by_key(|w| w.start)
        .ok_or_else(|| Error::InvalidInput(format!("patient {patient_id} has no admission")))?;
    let len = interval.seconds();
    let n_cells = ((adm.end.0 - adm.start.0) / len + 1).max(1) as usize;
    let events = dataset.events();
    let items = dataset.patient_items(patient_id);
    let mut rows = Vec::new();
    for source in TIMELINE_SOURCES {
        if dataset.table(source).is_none() {
            continue;
        }
        let mut counts = vec![0usize; n_cells];
        let mut abnormal = vec![0usize; n_cells];
        for item in items.iter().filter(|i| dataset.item_entity(i) == Some(source)) {
            let reference = references.get(*item);
            for &e in dataset.series_slice(patient_id, item, adm) {
                let ev = &events[e as usize];
                let cell = ((ev.timestamp.0 - adm.start.0) / len) as usize;
                counts[cell] += 1;
                if reference.is_some_and(|r| flag(ev.value, r) != Flag::Within) {
                    abnormal[cell] += 1;
                }
            }
        }
        let cells = (0..n_cells)
            .map(|c| {
                let start = adm.start.0 + c as i64 * len;
                TimelineCell {
                    start: Timestamp(start),
                    end: Timestamp(start + len - 1),
                    count: counts[c],
                    abnormal_count: abnormal[c],
                    abnormal_fraction: if counts[c] == 0 {
                        0.0
                    } else {
                        abnormal[c] as f64 / counts[c] as f64
                    },
                }
            })
            .collect();
        rows.push(TimelineRow {
            source: source.to_string(),
            cells,
        });
    }
    Ok(Timeline {
        patient_id: patient_id.to_string(),
        interval,
        start: adm.start,
        end: adm.end,
        rows,
    })
}

/// Concurrent-read, exclusive-write map from cohort id to derived state.
#[derive(Debug)]
pub struct CohortCache<T> {
    entries: RwLock<HashMap<String, Arc<T>>>,
}

impl<T> Default for CohortCache<T> {
    fn default() -> Self {
        CohortCache {
            entries: RwLock::new(HashMap::new()),
        }
    }
}

impl<T> CohortCache<T> {
    pub fn get(&self, id: &str) -> Option<Arc<T>> {
        self.entries.read().expect("cache lock").get(id).cloned()
    }

    /// Returns the cached entry, building it outside the lock if missing.
    /// Concurrent builders race; the first insert wins.
    pub fn get_or_try_insert(&self, id: &str, build: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        if let Some(v) = self.get(id) {
            return Ok(v);
        }
        let value = Arc::new(build()?);
        let mut map = self.entries.write().expect("cache lock");
        Ok(map.entry(id.to_string()).or_insert(value).clone())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
