//! Read-only relational store for EHR-style tables.
//!
//! A dataset directory holds `schema.json` plus one `<entity>.csv` per declared
//! entity. Everything is validated at load (types, primary keys, foreign keys)
//! and event tables are indexed by `(patient, item)` so a time-window query
//! costs a binary search plus the size of the answer.

mod schema;
mod time;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

pub use schema::{
    Column, ColumnKind, EventColumns, ForeignKey, Schema, Span, TableSchema, ADMISSIONS, CHARTEVENTS, LABTESTS,
    PATIENTS, SURGERIES, VITALSIGNS,
};
pub use time::{Timestamp, Window};

use crate::error::{Error, Result};

pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    Text(Arc<str>),
    Num(f64),
    Time(Timestamp),
}

impl Cell {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_time(&self) -> Option<Timestamp> {
        match self {
            Cell::Time(t) => Some(*t),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Cell::Null)
    }

    /// Text form used when writing CSV.
    pub fn render(&self) -> String {
        match self {
            Cell::Null => String::new(),
            Cell::Text(s) => s.to_string(),
            Cell::Num(v) => format!("{v}"),
            Cell::Time(t) => t.to_string(),
        }
    }

    /// Parses raw text into a cell of the given kind. Empty text is `Null`.
    pub fn parse(raw: &str, kind: ColumnKind) -> std::result::Result<Cell, String> {
        if raw.is_empty() {
            return Ok(Cell::Null);
        }
        match kind {
            ColumnKind::Identifier | ColumnKind::Categorical | ColumnKind::Text => Ok(Cell::Text(Arc::from(raw))),
            ColumnKind::Numeric => match raw.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Cell::Num(v)),
                _ => Err(format!("non-numeric value {raw:?}")),
            },
            ColumnKind::Timestamp => Timestamp::parse(raw)
                .map(Cell::Time)
                .ok_or_else(|| format!("unparseable timestamp {raw:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    schema: TableSchema,
    rows: Vec<Vec<Cell>>,
    key_index: HashMap<Arc<str>, usize>,
}

impl Table {
    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn name(&self) -> &str {
        &self.schema.entity_name
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        &self.rows[i]
    }

    pub fn row_by_key(&self, key: &str) -> Option<usize> {
        self.key_index.get(key).copied()
    }

    pub fn key(&self, i: usize) -> &str {
        let pk = self.schema.column_index(&self.schema.primary_key).expect("validated");
        self.rows[i][pk].as_str().expect("validated")
    }

    pub fn cell(&self, i: usize, column: &str) -> Option<&Cell> {
        self.schema.column_index(column).map(|c| &self.rows[i][c])
    }
}

/// One time-stamped measurement from an event table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordEvent {
    pub entity: Arc<str>,
    pub record_id: Arc<str>,
    pub patient_id: Arc<str>,
    pub item_id: Arc<str>,
    pub timestamp: Timestamp,
    pub value: f64,
    pub unit: Arc<str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub timestamp: Timestamp,
    pub value: f64,
    pub record_id: Arc<str>,
}

/// Time-ascending values of one item for one patient inside a window.
/// Equal timestamps keep their input order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordSeries {
    pub patient_id: String,
    pub item_id: String,
    pub entity: String,
    pub window: Window,
    pub points: Vec<SeriesPoint>,
}

impl RecordSeries {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    /// Hours since the window start for every point.
    pub fn hours(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| p.timestamp.hours_since(self.window.start))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Schema,
    tables: Vec<Table>,
    events: Vec<RecordEvent>,
    series_index: HashMap<(Arc<str>, Arc<str>), Vec<u32>>,
    item_entity: HashMap<Arc<str>, Arc<str>>,
    children: HashMap<(String, String), HashMap<Arc<str>, Vec<usize>>>,
}

impl Dataset {
    /// Loads `schema.json` and every declared table from `dir`.
    ///
    /// When the manifest is absent the built-in six-entity layout is assumed,
    /// so an empty directory reports its first missing table.
    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let manifest = dir.join(SCHEMA_FILE);
        let schema = if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            serde_json::from_str::<Schema>(&text)?
        } else {
            Schema::pic_default()
        };
        schema.validate()?;

        let mut interner = Interner::default();
        let mut raw_tables = Vec::with_capacity(schema.entities.len());
        for ts in &schema.entities {
            let path = dir.join(format!("{}.csv", ts.entity_name));
            if !path.exists() {
                return Err(Error::MissingTable(ts.entity_name.clone()));
            }
            raw_tables.push(read_table(&path, ts, &mut interner)?);
        }
        Dataset::assemble(schema, raw_tables)
    }

    /// Builds a dataset from in-memory rows, applying the same validation as
    /// [`Dataset::load`]. Rows must be in schema column order.
    pub fn from_rows(schema: Schema, tables: Vec<Vec<Vec<Cell>>>) -> Result<Dataset> {
        schema.validate()?;
        if tables.len() != schema.entities.len() {
            return Err(Error::Schema(format!(
                "{} tables supplied for {} entities",
                tables.len(),
                schema.entities.len()
            )));
        }
        let mut raw = Vec::new();
        for (ts, rows) in schema.entities.iter().zip(tables) {
            let file = format!("{}.csv", ts.entity_name);
            for (i, row) in rows.iter().enumerate() {
                if row.len() != ts.columns.len() {
                    return Err(Error::Parse {
                        file,
                        line: i + 2,
                        message: format!("expected {} cells, got {}", ts.columns.len(), row.len()),
                    });
                }
            }
            let lines = (2..rows.len() + 2).collect();
            raw.push(RawTable { rows, lines });
        }
        Dataset::assemble(schema, raw)
    }

    fn assemble(schema: Schema, raw: Vec<RawTable>) -> Result<Dataset> {
        let mut tables = Vec::with_capacity(raw.len());
        let mut lines_of = Vec::with_capacity(raw.len());
        for (ts, rt) in schema.entities.iter().zip(raw) {
            let file = format!("{}.csv", ts.entity_name);
            let pk = ts.column_index(&ts.primary_key).expect("validated");
            let mut key_index = HashMap::with_capacity(rt.rows.len());
            for (i, row) in rt.rows.iter().enumerate() {
                let key = match &row[pk] {
                    Cell::Text(s) => s.clone(),
                    _ => {
                        return Err(Error::Parse {
                            file,
                            line: rt.lines[i],
                            message: format!("empty primary key {}", ts.primary_key),
                        })
                    }
                };
                if key_index.insert(key.clone(), i).is_some() {
                    return Err(Error::DuplicateKey {
                        file,
                        line: rt.lines[i],
                        key: key.to_string(),
                    });
                }
            }
            tables.push(Table {
                schema: ts.clone(),
                rows: rt.rows,
                key_index,
            });
            lines_of.push(rt.lines);
        }

        let mut children: HashMap<(String, String), HashMap<Arc<str>, Vec<usize>>> = HashMap::new();
        for (ti, t) in tables.iter().enumerate() {
            for fk in &t.schema.foreign_keys {
                let col = t.schema.column_index(&fk.column).expect("validated");
                let target = tables
                    .iter()
                    .find(|x| x.schema.entity_name == fk.entity)
                    .expect("validated");
                let index = children
                    .entry((t.schema.entity_name.clone(), fk.column.clone()))
                    .or_default();
                for (i, row) in t.rows.iter().enumerate() {
                    let dangling = match &row[col] {
                        Cell::Text(v) if target.key_index.contains_key(v) => {
                            index.entry(v.clone()).or_default().push(i);
                            None
                        }
                        Cell::Text(v) => Some(v.to_string()),
                        _ => Some(String::new()),
                    };
                    if let Some(value) = dangling {
                        return Err(Error::DanglingForeignKey {
                            file: format!("{}.csv", t.schema.entity_name),
                            line: lines_of[ti][i],
                            column: fk.column.clone(),
                            value,
                            entity: fk.entity.clone(),
                        });
                    }
                }
            }
        }

        let mut events = Vec::new();
        let mut item_entity: HashMap<Arc<str>, Arc<str>> = HashMap::new();
        let patients = tables
            .iter()
            .find(|t| t.schema.entity_name == PATIENTS)
            .expect("validated");
        for (ti, t) in tables.iter().enumerate() {
            let Some(ev) = &t.schema.events else { continue };
            let entity: Arc<str> = Arc::from(t.schema.entity_name.as_str());
            let c_pat = t.schema.column_index(&ev.patient).expect("validated");
            let c_item = t.schema.column_index(&ev.item).expect("validated");
            let c_time = t.schema.column_index(&ev.time).expect("validated");
            let c_val = t.schema.column_index(&ev.value).expect("validated");
            let c_unit = ev.unit.as_ref().and_then(|u| t.schema.column_index(u));
            let pk = t.schema.column_index(&t.schema.primary_key).expect("validated");
            let empty: Arc<str> = Arc::from("");
            for (i, row) in t.rows.iter().enumerate() {
                let line = lines_of[ti][i];
                let missing = |what: &str| Error::Parse {
                    file: format!("{}.csv", t.schema.entity_name),
                    line,
                    message: format!("event without {what}"),
                };
                let patient = row[c_pat].as_str().ok_or_else(|| missing("patient"))?;
                if !patients.key_index.contains_key(patient) {
                    return Err(Error::DanglingForeignKey {
                        file: format!("{}.csv", t.schema.entity_name),
                        line,
                        column: ev.patient.clone(),
                        value: patient.to_string(),
                        entity: PATIENTS.into(),
                    });
                }
                let item = match &row[c_item] {
                    Cell::Text(s) => s.clone(),
                    _ => return Err(missing("item")),
                };
                let timestamp = row[c_time].as_time().ok_or_else(|| missing("timestamp"))?;
                let value = row[c_val].as_num().ok_or_else(|| missing("value"))?;
                match item_entity.get(&item) {
                    Some(e) if **e != *entity => {
                        return Err(Error::Schema(format!("item {item} appears in both {e} and {entity}")))
                    }
                    Some(_) => {}
                    None => {
                        item_entity.insert(item.clone(), entity.clone());
                    }
                }
                let Cell::Text(patient_id) = &row[c_pat] else {
                    unreachable!()
                };
                events.push(RecordEvent {
                    entity: entity.clone(),
                    record_id: row[pk].as_str().map(Arc::from).unwrap_or_else(|| empty.clone()),
                    patient_id: patient_id.clone(),
                    item_id: item,
                    timestamp,
                    value,
                    unit: c_unit
                        .and_then(|c| match &row[c] {
                            Cell::Text(s) => Some(s.clone()),
                            _ => None,
                        })
                        .unwrap_or_else(|| empty.clone()),
                });
            }
        }

        let mut series_index: HashMap<(Arc<str>, Arc<str>), Vec<u32>> = HashMap::new();
        for (i, e) in events.iter().enumerate() {
            series_index
                .entry((e.patient_id.clone(), e.item_id.clone()))
                .or_default()
                .push(i as u32);
        }
        for idx in series_index.values_mut() {
            // stable: equal timestamps keep input order
            idx.sort_by_key(|&i| events[i as usize].timestamp);
        }

        Ok(Dataset {
            schema,
            tables,
            events,
            series_index,
            item_entity,
            children,
        })
    }

    /// Writes the manifest and every table back to `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join(SCHEMA_FILE);
        let text = serde_json::to_string_pretty(&self.schema)?;
        fs::write(&manifest, text + "\n").map_err(|e| Error::io(&manifest, e))?;
        for t in &self.tables {
            write_table(&dir.join(format!("{}.csv", t.name())), &t.schema, &t.rows)?;
        }
        Ok(())
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn table(&self, entity: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.schema.entity_name == entity)
    }

    pub fn tables(&self) -> &[Table] {
        &self.tables
    }

    pub fn patients(&self) -> &Table {
        self.table(PATIENTS).expect("validated")
    }

    pub fn patient_count(&self) -> usize {
        self.patients().len()
    }

    pub fn patient_ids(&self) -> Vec<&str> {
        let t = self.patients();
        (0..t.len()).map(|i| t.key(i)).collect()
    }

    pub fn has_patient(&self, id: &str) -> bool {
        self.patients().row_by_key(id).is_some()
    }

    pub fn events(&self) -> &[RecordEvent] {
        &self.events
    }

    /// Entity that records `item`, if any event carries it.
    pub fn item_entity(&self, item: &str) -> Option<&str> {
        self.item_entity.get(item).map(|e| &**e)
    }

    /// Rows of `entity` whose foreign key `column` equals `key`.
    pub fn children(&self, entity: &str, column: &str, key: &str) -> &[usize] {
        self.children
            .get(&(entity.to_string(), column.to_string()))
            .and_then(|m| m.get(key))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Row indices of `entity` that belong to `patient` via its foreign key to
    /// the patients table.
    pub fn rows_of_patient(&self, entity: &str, patient: &str) -> Vec<usize> {
        let Some(t) = self.table(entity) else { return vec![] };
        if entity == PATIENTS {
            return t.row_by_key(patient).into_iter().collect();
        }
        match t.schema.foreign_key_to(PATIENTS) {
            Some(fk) => self.children(entity, &fk.column, patient).to_vec(),
            None => vec![],
        }
    }

    /// All of a patient's events for one item inside `window`, ascending.
    pub fn get_series(&self, patient_id: &str, item_id: &str, window: Window) -> Result<RecordSeries> {
        if !self.has_patient(patient_id) {
            return Err(Error::UnknownPatient(patient_id.to_string()));
        }
        let entity = self.item_entity(item_id).unwrap_or("").to_string();
        let points = self
            .series_slice(patient_id, item_id, window)
            .iter()
            .map(|&i| {
                let e = &self.events[i as usize];
                SeriesPoint {
                    timestamp: e.timestamp,
                    value: e.value,
                    record_id: e.record_id.clone(),
                }
            })
            .collect();
        Ok(RecordSeries {
            patient_id: patient_id.to_string(),
            item_id: item_id.to_string(),
            entity,
            window,
            points,
        })
    }

    /// Indices into [`Dataset::events`] for the series query, ascending.
    pub fn series_slice(&self, patient_id: &str, item_id: &str, window: Window) -> &[u32] {
        let key = (Arc::<str>::from(patient_id), Arc::<str>::from(item_id));
        let Some(idx) = self.series_index.get(&key) else {
            return &[];
        };
        let lo = idx.partition_point(|&i| self.events[i as usize].timestamp < window.start);
        let hi = idx.partition_point(|&i| self.events[i as usize].timestamp <= window.end);
        if lo >= hi {
            &[]
        } else {
            &idx[lo..hi]
        }
    }

    /// Distinct items recorded in `entity`, sorted.
    pub fn items_of(&self, entity: &str) -> Vec<&str> {
        let mut items: Vec<&str> = self
            .item_entity
            .iter()
            .filter(|(_, e)| &***e == entity)
            .map(|(i, _)| &**i)
            .collect();
        items.sort_unstable();
        items
    }

    /// Items that the patient has events for, per entity.
    pub fn patient_items(&self, patient_id: &str) -> Vec<&str> {
        let mut items: Vec<&str> = self
            .series_index
            .keys()
            .filter(|(p, _)| &**p == patient_id)
            .map(|(_, i)| &**i)
            .collect();
        items.sort_unstable();
        items
    }

    /// Time span of an entity row that declares one.
    pub fn span_of(&self, entity: &str, row: usize) -> Option<Window> {
        let t = self.table(entity)?;
        let span = t.schema.span.as_ref()?;
        let start = t.cell(row, &span.start)?.as_time()?;
        let end = t.cell(row, &span.end)?.as_time()?;
        Some(Window::new(start, end))
    }
}

struct RawTable {
    rows: Vec<Vec<Cell>>,
    lines: Vec<usize>,
}

#[derive(Default)]
struct Interner {
    strings: HashSet<Arc<str>>,
}

impl Interner {
    fn intern(&mut self, cell: Cell) -> Cell {
        match cell {
            Cell::Text(s) => match self.strings.get(&*s) {
                Some(existing) => Cell::Text(existing.clone()),
                None => {
                    self.strings.insert(s.clone());
                    Cell::Text(s)
                }
            },
            other => other,
        }
    }
}

fn read_table(path: &Path, ts: &TableSchema, interner: &mut Interner) -> Result<RawTable> {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            file: file.clone(),
            line: 1,
            message: e.to_string(),
        })?;
    let headers = reader.headers()?.clone();
    let mut positions = Vec::with_capacity(ts.columns.len());
    for c in &ts.columns {
        let pos = headers.iter().position(|h| h == c.name).ok_or_else(|| Error::Parse {
            file: file.clone(),
            line: 1,
            message: format!("header lacks declared column {}", c.name),
        })?;
        positions.push(pos);
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            file: file.clone(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut row = Vec::with_capacity(ts.columns.len());
        for (c, &pos) in ts.columns.iter().zip(&positions) {
            let raw = record.get(pos).unwrap_or("");
            let cell = Cell::parse(raw, c.kind).map_err(|message| Error::Parse {
                file: file.clone(),
                line,
                message: format!("column {}: {message}", c.name),
            })?;
            row.push(interner.intern(cell));
        }
        rows.push(row);
        lines.push(line);
    }
    Ok(RawTable { rows, lines })
}

pub(crate) fn write_table(path: &Path, ts: &TableSchema, rows: &[Vec<Cell>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
    w.write_record(ts.columns.iter().map(|c| c.name.as_str()))?;
    for row in rows {
        w.write_record(row.iter().map(Cell::render))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
