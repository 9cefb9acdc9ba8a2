use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Aggregation {
    Mean,
    Sd,
    Min,
    Max,
    Count,
    Trend,
}

impl Aggregation {
    pub const ALL: [Aggregation; 6] = [
        Aggregation::Mean,
        Aggregation::Sd,
        Aggregation::Min,
        Aggregation::Max,
        Aggregation::Count,
        Aggregation::Trend,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "MEAN",
            Aggregation::Sd => "SD",
            Aggregation::Min => "MIN",
            Aggregation::Max => "MAX",
            Aggregation::Count => "COUNT",
            Aggregation::Trend => "TREND",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Aggregation::Mean => "Mean",
            Aggregation::Sd => "SD",
            Aggregation::Min => "Min",
            Aggregation::Max => "Max",
            Aggregation::Count => "Count",
            Aggregation::Trend => "Trend",
        }
    }

    /// Applies the aggregation to a series. `hours` is the time axis used by
    /// TREND and must be as long as `values`.
    ///
    /// Empty input is missing for everything but COUNT; SD and TREND need two
    /// points, and TREND also needs a non-degenerate time axis.
    pub fn apply(self, hours: &[f64], values: &[f64]) -> Option<f64> {
        debug_assert_eq!(hours.len(), values.len());
        let n = values.len();
        match self {
            Aggregation::Count => Some(n as f64),
            _ if n == 0 => None,
            Aggregation::Mean => Some(mean(values)),
            Aggregation::Min => values.iter().copied().reduce(f64::min),
            Aggregation::Max => values.iter().copied().reduce(f64::max),
            Aggregation::Sd => sample_sd(values),
            Aggregation::Trend => slope(hours, values),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown aggregation {s:?}")))
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn sample_sd(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (n - 1) as f64).sqrt())
}

/// Ordinary least-squares slope of `y` against `x`.
pub(crate) fn slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let (b, _) = line_fit(x, y)?;
    Some(b)
}

/// Least-squares line `y = intercept + slope * (x - mean(x))`, returned as
/// `(slope, intercept)`. `None` when `x` has no spread.
pub(crate) fn line_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let dx = xi - mx;
        sxx += dx * dx;
        sxy += dx * (yi - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    Some((sxy / sxx, my))
}
