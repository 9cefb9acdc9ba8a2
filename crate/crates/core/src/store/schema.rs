use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Identifier,
    Categorical,
    Numeric,
    Timestamp,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub entity: String,
}

/// Column roles for a table whose rows are time-stamped measurements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventColumns {
    pub patient: String,
    pub item: String,
    pub time: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

/// Start/end timestamp columns of an entity that covers a time span
/// (admissions, surgeries).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: String,
    pub end: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub entity_name: String,
    pub columns: Vec<Column>,
    pub primary_key: String,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<EventColumns>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
    /// Outcome columns; never turned into features.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_columns: Vec<String>,
}

impl TableSchema {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn foreign_key_to(&self, entity: &str) -> Option<&ForeignKey> {
        self.foreign_keys.iter().find(|fk| fk.entity == entity)
    }

    fn require_column(&self, name: &str, kinds: &[ColumnKind], role: &str) -> Result<()> {
        match self.column(name) {
            None => Err(Error::Schema(format!(
                "{}: {role} column {name} is not declared",
                self.entity_name
            ))),
            Some(c) if !kinds.contains(&c.kind) => Err(Error::Schema(format!(
                "{}: {role} column {name} has kind {:?}",
                self.entity_name, c.kind
            ))),
            Some(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub entities: Vec<TableSchema>,
}

pub const PATIENTS: &str = "patients";
pub const ADMISSIONS: &str = "admissions";
pub const SURGERIES: &str = "surgeries";
pub const LABTESTS: &str = "labtests";
pub const CHARTEVENTS: &str = "chartevents";
pub const VITALSIGNS: &str = "vitalsigns";

impl Schema {
    pub fn table(&self, entity: &str) -> Option<&TableSchema> {
        self.entities.iter().find(|t| t.entity_name == entity)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.entities {
            if !names.insert(t.entity_name.as_str()) {
                return Err(Error::Schema(format!("entity {} declared twice", t.entity_name)));
            }
        }
        for t in &self.entities {
            let mut cols = HashSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.as_str()) {
                    return Err(Error::Schema(format!(
                        "{}: column {} declared twice",
                        t.entity_name, c.name
                    )));
                }
            }
            t.require_column(&t.primary_key, &[ColumnKind::Identifier], "primary key")?;
            for fk in &t.foreign_keys {
                t.require_column(&fk.column, &[ColumnKind::Identifier], "foreign key")?;
                if !names.contains(fk.entity.as_str()) {
                    return Err(Error::Schema(format!(
                        "{}: foreign key {} references undeclared entity {}",
                        t.entity_name, fk.column, fk.entity
                    )));
                }
            }
            if let Some(ev) = &t.events {
                t.require_column(&ev.patient, &[ColumnKind::Identifier], "event patient")?;
                t.require_column(
                    &ev.item,
                    &[ColumnKind::Categorical, ColumnKind::Identifier, ColumnKind::Text],
                    "event item",
                )?;
                t.require_column(&ev.time, &[ColumnKind::Timestamp], "event time")?;
                t.require_column(&ev.value, &[ColumnKind::Numeric], "event value")?;
                if let Some(u) = &ev.unit {
                    t.require_column(u, &[ColumnKind::Categorical, ColumnKind::Text], "event unit")?;
                }
            }
            if let Some(span) = &t.span {
                t.require_column(&span.start, &[ColumnKind::Timestamp], "span start")?;
                t.require_column(&span.end, &[ColumnKind::Timestamp], "span end")?;
            }
            for l in &t.label_columns {
                t.require_column(l, &[ColumnKind::Numeric, ColumnKind::Categorical], "label")?;
            }
        }
        if self.table(PATIENTS).is_none() {
            return Err(Error::Schema("a patients entity is required".into()));
        }
        Ok(())
    }

    /// The six-entity layout produced by the synthetic generator.
    pub fn pic_default() -> Schema {
        use ColumnKind::*;
        fn cols(spec: &[(&str, ColumnKind)]) -> Vec<Column> {
            spec.iter()
                .map(|(n, k)| Column {
                    name: (*n).to_string(),
                    kind: *k,
                })
                .collect()
        }
        fn fk(column: &str, entity: &str) -> ForeignKey {
            ForeignKey {
                column: column.into(),
                entity: entity.into(),
            }
        }
        let event_table = |name: &str, parent: (&str, &str)| TableSchema {
            entity_name: name.into(),
            columns: cols(&[
                ("record_id", Identifier),
                ("patient_id", Identifier),
                (parent.0, Identifier),
                ("item_id", Categorical),
                ("charttime", Timestamp),
                ("value", Numeric),
                ("unit", Text),
            ]),
            primary_key: "record_id".into(),
            foreign_keys: vec![fk("patient_id", PATIENTS), fk(parent.0, parent.1)],
            events: Some(EventColumns {
                patient: "patient_id".into(),
                item: "item_id".into(),
                time: "charttime".into(),
                value: "value".into(),
                unit: Some("unit".into()),
            }),
            span: None,
            label_columns: vec![],
        };
        Schema {
            entities: vec![
                TableSchema {
                    entity_name: PATIENTS.into(),
                    columns: cols(&[
                        ("patient_id", Identifier),
                        ("gender", Categorical),
                        ("age", Numeric),
                        ("weight", Numeric),
                        ("height", Numeric),
                    ]),
                    primary_key: "patient_id".into(),
                    foreign_keys: vec![],
                    events: None,
                    span: None,
                    label_columns: vec![],
                },
                TableSchema {
                    entity_name: ADMISSIONS.into(),
                    columns: cols(&[
                        ("admission_id", Identifier),
                        ("patient_id", Identifier),
                        ("admittime", Timestamp),
                        ("dischtime", Timestamp),
                        ("diagnosis", Categorical),
                    ]),
                    primary_key: "admission_id".into(),
                    foreign_keys: vec![fk("patient_id", PATIENTS)],
                    events: None,
                    span: Some(Span {
                        start: "admittime".into(),
                        end: "dischtime".into(),
                    }),
                    label_columns: vec![],
                },
                TableSchema {
                    entity_name: SURGERIES.into(),
                    columns: cols(&[
                        ("surgery_id", Identifier),
                        ("admission_id", Identifier),
                        ("patient_id", Identifier),
                        ("starttime", Timestamp),
                        ("endtime", Timestamp),
                        ("surgery_time", Numeric),
                        ("cpb_time", Numeric),
                        ("aortic_clamp_time", Numeric),
                        ("complexity", Categorical),
                        ("label_L", Numeric),
                        ("label_C", Numeric),
                        ("label_A", Numeric),
                        ("label_I", Numeric),
                        ("label_O", Numeric),
                    ]),
                    primary_key: "surgery_id".into(),
                    foreign_keys: vec![fk("admission_id", ADMISSIONS), fk("patient_id", PATIENTS)],
                    events: None,
                    span: Some(Span {
                        start: "starttime".into(),
                        end: "endtime".into(),
                    }),
                    label_columns: ["label_L", "label_C", "label_A", "label_I", "label_O"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                },
                event_table(LABTESTS, ("admission_id", ADMISSIONS)),
                event_table(CHARTEVENTS, ("admission_id", ADMISSIONS)),
                event_table(VITALSIGNS, ("surgery_id", SURGERIES)),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_is_valid() {
        Schema::pic_default().validate().unwrap();
    }

    #[test]
    fn rejects_non_identifier_key() {
        let mut s = Schema::pic_default();
        s.entities[0].primary_key = "age".into();
        assert!(matches!(s.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn rejects_undeclared_reference() {
        let mut s = Schema::pic_default();
        s.entities[1].foreign_keys[0].entity = "wards".into();
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("wards"), "{err}");
    }

    #[test]
    fn rejects_duplicate_column() {
        let mut s = Schema::pic_default();
        let dup = s.entities[0].columns[1].clone();
        s.entities[0].columns.push(dup);
        assert!(s.validate().is_err());
    }
}
