//! Record-level influence of a time series on one of its aggregate features.
//!
//! Windows of `k` consecutive points are replaced by their own least-squares
//! line, the feature is recomputed and the relative change is accumulated over
//! the window's indices. A dynamic threshold then extracts the runs of
//! unusually influential points.

use serde::{Deserialize, Serialize};

use crate::cohort::{flag, Flag, Reference};
use crate::error::{Error, Result};
use crate::features::{line_fit, mean, Aggregation, FeatureDescriptor};
use crate::store::{RecordSeries, Timestamp};

/// Below this magnitude the feature value is treated as zero and absolute
/// change replaces relative change.
pub const EPSILON: f64 = 1e-9;

/// Target window span in seconds for the default `k`.
pub const DEFAULT_WINDOW_SECONDS: f64 = 300.0;

pub fn default_z_grid() -> Vec<f64> {
    (0..=16).map(|i| 2.0 + 0.5 * i as f64).collect()
}

/// `k` spanning about five minutes at the median sampling interval, at
/// least 3 points and at most the series length.
pub fn default_window(timestamps: &[Timestamp]) -> usize {
    let t = timestamps.len();
    let mut gaps: Vec<i64> = timestamps.windows(2).map(|w| w[1].0 - w[0].0).collect();
    let k = if gaps.is_empty() {
        3
    } else {
        gaps.sort_unstable();
        let mid = gaps.len() / 2;
        let median = if gaps.len() % 2 == 1 {
            gaps[mid] as f64
        } else {
            (gaps[mid - 1] + gaps[mid]) as f64 / 2.0
        };
        if median <= 0.0 {
            3
        } else {
            ((DEFAULT_WINDOW_SECONDS / median).round() as usize).max(3)
        }
    };
    k.min(t).max(1)
}

/// How occluded windows are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fill {
    #[default]
    LeastSquares,
    /// Window mean; only meant for sensitivity comparisons.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceArray {
    pub feature_id: String,
    pub k: usize,
    /// Feature value on the unmodified series.
    pub value: f64,
    pub v: Vec<f64>,
}

fn fill_window(hours: &[f64], values: &mut [f64], fill: Fill) {
    match fill {
        Fill::LeastSquares => {
            if let Some((slope, my)) = line_fit(hours, values) {
                let mx = mean(hours);
                for (y, h) in values.iter_mut().zip(hours) {
                    *y = my + slope * (h - mx);
                }
            } else {
                let m = mean(values);
                values.fill(m);
            }
        }
        Fill::Mean => {
            let m = mean(values);
            values.fill(m);
        }
    }
}

/// Occlusion influence of every point on `aggregation` over `(hours, values)`.
/// Returns the unmodified feature value and the accumulated array.
pub fn occlusion_values(
    aggregation: Aggregation,
    hours: &[f64],
    values: &[f64],
    k: usize,
    fill: Fill,
) -> Result<(f64, Vec<f64>)> {
    let t = values.len();
    if hours.len() != t {
        return Err(Error::InvalidInput("time axis and values differ in length".into()));
    }
    if t < 2 {
        return Err(Error::InvalidInput(format!("series has {t} points, need at least 2")));
    }
    if k == 0 || k > t {
        return Err(Error::InvalidInput(format!("window size {k} outside 1..={t}")));
    }
    let x = aggregation
        .apply(hours, values)
        .ok_or_else(|| Error::InvalidInput(format!("{aggregation} is undefined on this series")))?;
    let mut v = vec![0.0; t];
    let mut work = values.to_vec();
    for start in 0..=t - k {
        let end = start + k;
        fill_window(&hours[start..end], &mut work[start..end], fill);
        let x2 = aggregation
            .apply(hours, &work)
            .ok_or_else(|| Error::InvalidInput(format!("{aggregation} undefined after occlusion")))?;
        let delta = if x.abs() < EPSILON { x - x2 } else { (x - x2) / x.abs() };
        for vi in &mut v[start..end] {
            *vi += delta;
        }
        work[start..end].copy_from_slice(&values[start..end]);
    }
    Ok((x, v))
}

/// Hours since the first point, the time axis used for occlusion.
fn series_hours(series: &RecordSeries) -> Vec<f64> {
    let origin = series.points.first().map(|p| p.timestamp).unwrap_or(Timestamp(0));
    series.points.iter().map(|p| p.timestamp.hours_since(origin)).collect()
}

fn dynamic_aggregation(descriptor: &FeatureDescriptor, series: &RecordSeries) -> Result<Aggregation> {
    let agg = descriptor
        .aggregation
        .filter(|_| descriptor.is_dynamic())
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a dynamic feature", descriptor.feature_id)))?;
    if descriptor.item_id.as_deref() != Some(series.item_id.as_str()) {
        return Err(Error::InvalidInput(format!(
            "{} does not aggregate item {}",
            descriptor.feature_id, series.item_id
        )));
    }
    Ok(agg)
}

pub fn occlusion_influence(series: &RecordSeries, descriptor: &FeatureDescriptor, k: usize) -> Result<InfluenceArray> {
    let agg = dynamic_aggregation(descriptor, series)?;
    let (value, v) = occlusion_values(agg, &series_hours(series), &series.values(), k, Fill::LeastSquares)?;
    Ok(InfluenceArray {
        feature_id: descriptor.feature_id.clone(),
        k,
        value,
        v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub theta: f64,
    pub z: f64,
    pub score: f64,
}

/// Maximal runs of indices with `v[i] > theta`, as inclusive intervals.
pub fn runs_above(v: &[f64], theta: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &x) in v.iter().enumerate() {
        match (x > theta, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, v.len() - 1));
    }
    out
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let m = values.clone().sum::<f64>() / n;
    let var = values.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Picks `theta = mean + z * sd` (population moments) maximizing the
/// relative drop in mean and SD per removed point, penalized by the squared
/// number of runs. Ties go to the larger `z`.
pub fn dynamic_threshold(v: &[f64], z_grid: &[f64]) -> Result<Option<Threshold>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("influence array is empty".into()));
    }
    let (mu, sigma) = mean_sd(v.iter().copied());
    if sigma == 0.0 || !sigma.is_finite() {
        return Ok(None);
    }
    let mut grid = z_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<Threshold> = None;
    for z in grid {
        let theta = mu + z * sigma;
        let n_above = v.iter().filter(|&&x| x > theta).count();
        if n_above == 0 || n_above == v.len() {
            continue;
        }
        let (mu_r, sigma_r) = mean_sd(v.iter().copied().filter(|&x| x <= theta));
        let n_runs = runs_above(v, theta).len();
        let dmu = if mu == 0.0 { 0.0 } else { (mu - mu_r) / mu };
        let dsigma = (sigma - sigma_r) / sigma;
        let score = (dmu + dsigma) / (n_above + n_runs * n_runs) as f64;
        if best.is_none_or(|b| score >= b.score) {
            best = Some(Threshold { theta, z, score });
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Inclusive index interval.
    pub start: usize,
    pub end: usize,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    pub mean_influence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSet {
    pub feature_id: String,
    pub patient_id: String,
    pub item_id: String,
    pub k: usize,
    pub feature_value: f64,
    /// Position of the feature value against its reference range.
    pub direction: Flag,
    pub theta: Option<f64>,
    pub z: Option<f64>,
    pub segments: Vec<Segment>,
}

/// Working array for the direction rule: raise-the-value influence for
/// features above their range, lower-the-value influence below it, and
/// magnitude otherwise.
pub fn working_array(v: &[f64], direction: Flag) -> Vec<f64> {
    match direction {
        Flag::Above => v.to_vec(),
        Flag::Below => v.iter().map(|x| -x).collect(),
        Flag::Within => v.iter().map(|x| x.abs()).collect(),
    }
}

/// Inclusive index intervals.
pub type Runs = Vec<(usize, usize)>;

/// Thresholds the direction-adjusted influence array; returns the threshold
/// and its runs, empty when nothing stands out.
pub fn extract_runs(v: &[f64], direction: Flag, z_grid: &[f64]) -> Result<(Option<Threshold>, Runs)> {
    let w = working_array(v, direction);
    if w.iter().all(|x| x.abs() < EPSILON) {
        return Ok((None, vec![]));
    }
    match dynamic_threshold(&w, z_grid)? {
        Some(t) => {
            let runs = runs_above(&w, t.theta);
            Ok((Some(t), runs))
        }
        None => Ok((None, vec![])),
    }
}

pub fn influential_segments(
    series: &RecordSeries,
    descriptor: &FeatureDescriptor,
    reference: &Reference,
    k: usize,
    z_grid: &[f64],
) -> Result<SegmentSet> {
    let inf = occlusion_influence(series, descriptor, k)?;
    let direction = flag(inf.value, reference);
    let (threshold, runs) = extract_runs(&inf.v, direction, z_grid)?;
    let segments = runs
        .into_iter()
        .map(|(s, e)| Segment {
            start: s,
            end: e,
            start_ts: series.points[s].timestamp,
            end_ts: series.points[e].timestamp,
            mean_influence: inf.v[s..=e].iter().sum::<f64>() / (e - s + 1) as f64,
        })
        .collect();
    Ok(SegmentSet {
        feature_id: descriptor.feature_id.clone(),
        patient_id: series.patient_id.clone(),
        item_id: series.item_id.clone(),
        k,
        feature_value: inf.value,
        direction,
        theta: threshold.map(|t| t.theta),
        z: threshold.map(|t| t.z),
        segments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayInterval {
    pub start: usize,
    pub end: usize,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedOverlay {
    pub patient_id: String,
    pub item_id: String,
    pub intervals: Vec<OverlayInterval>,
}

/// Inclusive index intervals partitioning the union of `intervals`, each with
/// the number of inputs covering it. Adjacent pieces with equal coverage are
/// joined.
pub fn merge_intervals(intervals: &[(usize, usize)]) -> Vec<(usize, usize, usize)> {
    let mut deltas: Vec<(usize, i64)> = Vec::with_capacity(intervals.len() * 2);
    for &(s, e) in intervals {
        deltas.push((s, 1));
        deltas.push((e + 1, -1));
    }
    deltas.sort_unstable();
    let mut out = Vec::new();
    let mut depth = 0i64;
    let mut open: Option<usize> = None;
    let mut i = 0;
    while i < deltas.len() {
        let pos = deltas[i].0;
        let mut change = 0;
        while i < deltas.len() && deltas[i].0 == pos {
            change += deltas[i].1;
            i += 1;
        }
        if change == 0 {
            continue;
        }
        if let Some(s) = open {
            out.push((s, pos - 1, depth as usize));
        }
        depth += change;
        open = (depth > 0).then_some(pos);
    }
    out
}

/// Overlap of sibling features' segments over one series.
pub fn merge_overlays(series: &RecordSeries, sets: &[SegmentSet]) -> Result<MergedOverlay> {
    let mut all = Vec::new();
    for set in sets {
        if set.patient_id != series.patient_id || set.item_id != series.item_id {
            return Err(Error::InvalidInput(format!(
                "segment set for {}/{} does not belong to series {}/{}",
                set.patient_id, set.item_id, series.patient_id, series.item_id
            )));
        }
        for s in &set.segments {
            if s.end >= series.len() || s.start > s.end {
                return Err(Error::InvalidInput(format!(
                    "segment [{}, {}] outside series of length {}",
                    s.start,
                    s.end,
                    series.len()
                )));
            }
            all.push((s.start, s.end));
        }
    }
    let intervals = merge_intervals(&all)
        .into_iter()
        .map(|(s, e, m)| OverlayInterval {
            start: s,
            end: e,
            start_ts: series.points[s].timestamp,
            end_ts: series.points[e].timestamp,
            multiplicity: m,
        })
        .collect();
    Ok(MergedOverlay {
        patient_id: series.patient_id.clone(),
        item_id: series.item_id.clone(),
        intervals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn affine_series_has_zero_influence() {
        let h = axis(20);
        let y: Vec<f64> = h.iter().map(|t| 3.0 - 0.5 * t).collect();
        for agg in [
            Aggregation::Mean,
            Aggregation::Trend,
            Aggregation::Min,
            Aggregation::Max,
            Aggregation::Sd,
        ] {
            let (_, v) = occlusion_values(agg, &h, &y, 4, Fill::LeastSquares).unwrap();
            assert!(v.iter().all(|x| x.abs() < 1e-9), "{agg}: {v:?}");
        }
    }

    #[test]
    fn spike_raises_sd_influence_around_it() {
        let h = axis(10);
        let y = [0.0, 0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0];
        let (_, v) = occlusion_values(Aggregation::Sd, &h, &y, 3, Fill::LeastSquares).unwrap();
        for (i, x) in v.iter().enumerate() {
            if (3..=7).contains(&i) {
                assert!(*x > 0.0, "index {i}: {v:?}");
            } else {
                assert!(x.abs() < 1e-12, "index {i}: {v:?}");
            }
        }
    }

    #[test]
    fn line_fill_keeps_the_mean() {
        let h = axis(10);
        let y = [0.0, 0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0];
        let (_, v) = occlusion_values(Aggregation::Mean, &h, &y, 3, Fill::LeastSquares).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-12));
        let (_, m) = occlusion_values(Aggregation::Max, &h, &y, 3, Fill::Mean).unwrap();
        assert!(m[5] > 0.0);
    }

    #[test]
    fn full_window_gives_uniform_increment() {
        let h = axis(6);
        let y = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let (_, v) = occlusion_values(Aggregation::Max, &h, &y, 6, Fill::LeastSquares).unwrap();
        assert!(v.iter().all(|x| *x == v[0]));
        assert!(v[0] != 0.0);
    }

    #[test]
    fn bad_window_sizes() {
        let h = axis(4);
        let y = [1.0, 2.0, 0.0, 1.0];
        assert!(occlusion_values(Aggregation::Mean, &h, &y, 0, Fill::LeastSquares).is_err());
        assert!(occlusion_values(Aggregation::Mean, &h, &y, 5, Fill::LeastSquares).is_err());
        assert!(occlusion_values(Aggregation::Mean, &h[..1], &y[..1], 1, Fill::LeastSquares).is_err());
    }

    #[test]
    fn zero_valued_feature_uses_absolute_change() {
        let h = axis(5);
        let y = [1.0, -1.0, 1.0, -1.0, 0.0];
        let (x, v) = occlusion_values(Aggregation::Mean, &h, &y, 2, Fill::Mean).unwrap();
        assert_eq!(x, 0.0);
        assert!(v.iter().all(|a| a.is_finite()));
    }

    #[test]
    fn threshold_on_single_spike() {
        let mut v = vec![0.0; 16];
        v[8] = 100.0;
        let t = dynamic_threshold(&v, &default_z_grid()).unwrap().unwrap();
        assert_eq!(runs_above(&v, t.theta), vec![(8, 8)]);
        assert!(dynamic_threshold(&[2.0; 5], &default_z_grid()).unwrap().is_none());
        assert!(dynamic_threshold(&[], &default_z_grid()).is_err());
    }

    #[test]
    fn direction_rule_is_antisymmetric() {
        let v = [0.0, 0.1, -3.0, -3.2, 0.05, 0.0, 2.0, 0.0, 0.1, 0.0, 0.0, -0.1];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let grid = default_z_grid();
        let below = extract_runs(&v, Flag::Below, &grid).unwrap();
        let above = extract_runs(&neg, Flag::Above, &grid).unwrap();
        assert_eq!(below, above);
        assert!(below.1.iter().all(|&(s, e)| s >= 2 && e <= 3) && !below.1.is_empty());
    }

    #[test]
    fn flat_influence_has_no_segments() {
        let (t, runs) = extract_runs(&[0.0; 10], Flag::Within, &default_z_grid()).unwrap();
        assert!(t.is_none() && runs.is_empty());
    }

    #[test]
    fn merge_examples() {
        assert_eq!(
            merge_intervals(&[(1, 5), (3, 8)]),
            vec![(1, 2, 1), (3, 5, 2), (6, 8, 1)]
        );
        assert_eq!(merge_intervals(&[(2, 4)]), vec![(2, 4, 1)]);
        assert_eq!(merge_intervals(&[(0, 1), (5, 6)]), vec![(0, 1, 1), (5, 6, 1)]);
        assert_eq!(merge_intervals(&[(0, 2), (0, 2)]), vec![(0, 2, 2)]);
        assert!(merge_intervals(&[]).is_empty());
    }

    #[test]
    fn default_window_from_spacing() {
        let ts: Vec<Timestamp> = (0..100).map(|i| Timestamp(i * 60)).collect();
        assert_eq!(default_window(&ts), 5);
        let sparse: Vec<Timestamp> = (0..10).map(|i| Timestamp(i * 3600)).collect();
        assert_eq!(default_window(&sparse), 3);
        assert_eq!(default_window(&sparse[..2]), 2);
    }
}
