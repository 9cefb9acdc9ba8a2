use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::store::{Cell, Dataset};

/// Postoperative complication targets: lung, cardiac, arrhythmia,
/// infectious, other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    L,
    C,
    A,
    I,
    O,
}

impl Label {
    pub const ALL: [Label; 5] = [Label::L, Label::C, Label::A, Label::I, Label::O];

    pub fn column(self) -> String {
        format!("label_{self}")
    }

    pub fn describe(self) -> &'static str {
        match self {
            Label::L => "lung",
            Label::C => "cardiac",
            Label::A => "arrhythmia",
            Label::I => "infectious",
            Label::O => "other",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Label::L => "L",
            Label::C => "C",
            Label::A => "A",
            Label::I => "I",
            Label::O => "O",
        };
        f.write_str(s)
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "L" | "l" => Ok(Label::L),
            "C" | "c" => Ok(Label::C),
            "A" | "a" => Ok(Label::A),
            "I" | "i" => Ok(Label::I),
            "O" | "o" => Ok(Label::O),
            other => Err(Error::InvalidInput(format!("unknown target label {other:?}"))),
        }
    }
}

fn truthy(cell: &Cell) -> Option<bool> {
    match cell {
        Cell::Num(v) => Some(*v != 0.0),
        Cell::Text(s) => match s.to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "y" => Some(true),
            "0" | "false" | "no" | "n" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// Outcome of `label` for every row of `target_entity`, in table order.
pub fn labels(dataset: &Dataset, target_entity: &str, label: Label) -> Result<Vec<Option<bool>>, Error> {
    let t = dataset
        .table(target_entity)
        .ok_or_else(|| Error::Schema(format!("no entity {target_entity}")))?;
    let col = label.column();
    let c = t
        .schema()
        .column_index(&col)
        .ok_or_else(|| Error::UnknownAttribute(format!("{target_entity}.{col}")))?;
    Ok(t.rows().iter().map(|r| truthy(&r[c])).collect())
}
