mod oracles;

use std::sync::Arc;

use clinexplain::cohort::{Flag, Reference};
use clinexplain::features::{Aggregation, FeatureDescriptor, FeatureKind, LineageQuery, ValueType, WindowKind};
use clinexplain::influence::*;
use clinexplain::store::{RecordSeries, SeriesPoint, Timestamp, Window};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn times(gaps: &[f64]) -> Vec<f64> {
    let mut t = 0.0;
    let mut out = vec![0.0];
    for g in gaps {
        t += g;
        out.push(t);
    }
    out
}

/// Tolerance 1e-9, scaled for influence values above one in magnitude.
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn affine_series_have_zero_influence(
        n in 10usize..=500,
        a in -100.0..100.0f64,
        slope in prop_oneof![-10.0..-0.1f64, 0.1..10.0f64],
        irregular in any::<bool>(),
        k_frac in 0.0..1.0f64,
        agg in prop::sample::select(vec![Aggregation::Mean, Aggregation::Trend, Aggregation::Min, Aggregation::Max]),
    ) {
        let gaps: Vec<f64> = (1..n).map(|i| if irregular { 0.01 + 0.02 * ((i * 7919) % 13) as f64 } else { 0.025 }).collect();
        let t = times(&gaps);
        let y: Vec<f64> = t.iter().map(|h| a + slope * h).collect();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let (_, v) = occlusion_values(agg, &t, &y, k, Fill::LeastSquares).unwrap();
        let worst = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(worst < 1e-9, "{agg} n={n} k={k}: {worst}");
    }

    #[test]
    fn accumulated_increments_match_naive_recomputation(
        seed in any::<u64>(),
        n in 2usize..=80,
        agg in prop::sample::select(Aggregation::ALL.to_vec()),
        k_frac in 0.0..1.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = times(&(1..n).map(|_| rng.random_range(0.005..0.1)).collect::<Vec<_>>());
        let mut y = Vec::with_capacity(n);
        let mut level = rng.random_range(-50.0..150.0);
        for _ in 0..n {
            level += rng.random_range(-3.0..3.0);
            y.push(level);
        }
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let (x, v) = occlusion_values(agg, &t, &y, k, Fill::LeastSquares).unwrap();
        let (xo, vo) = oracles::naive_occlusion(agg, &t, &y, k);
        prop_assert!(close(x, xo));
        for (a, b) in v.iter().zip(&vo) {
            prop_assert!(close(*a, *b), "{agg} k={k}: {a} vs {b}");
        }
    }

    #[test]
    fn threshold_matches_exhaustive_scoring(seed in any::<u64>(), n in 1usize..=120, shape in 0u8..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n)
            .map(|_| match shape {
                0 => rng.random_range(-1.0..1.0),
                1 => rng.random_range(0..4) as f64,
                2 => if rng.random_bool(0.05) { rng.random_range(5.0..20.0) } else { rng.random_range(0.0..0.5) },
                _ => rng.random_range(-1.0..0.0f64).powi(3),
            })
            .collect();
        let grid = default_z_grid();
        let got = dynamic_threshold(&v, &grid).unwrap().map(|t| (t.theta, t.z));
        prop_assert_eq!(got, oracles::brute_force_threshold(&v, &grid));
    }

    #[test]
    fn segments_are_sound_and_maximal(seed in any::<u64>(), n in 5usize..=150) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0f64).powi(5)).collect();
        let dir = [Flag::Above, Flag::Below, Flag::Within][rng.random_range(0..3)];
        let (t, runs) = extract_runs(&v, dir, &default_z_grid()).unwrap();
        let w = working_array(&v, dir);
        if let Some(t) = t {
            for w2 in runs.windows(2) {
                prop_assert!(w2[0].1 + 1 < w2[1].0);
            }
            for &(s, e) in &runs {
                prop_assert!(w[s..=e].iter().all(|x| *x > t.theta));
                prop_assert!(s == 0 || w[s - 1] <= t.theta);
                prop_assert!(e + 1 == n || w[e + 1] <= t.theta);
            }
        } else {
            prop_assert!(runs.is_empty());
        }
    }

    #[test]
    fn merged_overlay_partitions_the_union(
        sets in prop::collection::vec(prop::collection::vec((0usize..60, 0usize..10), 0..4), 1..4)
    ) {
        let intervals: Vec<(usize, usize)> = sets.iter().flatten().map(|&(s, l)| (s, s + l)).collect();
        let merged = merge_intervals(&intervals);
        for m in merged.windows(2) {
            prop_assert!(m[0].1 < m[1].0);
        }
        for i in 0..75 {
            let cover = intervals.iter().filter(|&&(s, e)| s <= i && i <= e).count();
            let found = merged.iter().find(|&&(s, e, _)| s <= i && i <= e).map(|m| m.2).unwrap_or(0);
            prop_assert_eq!(cover, found);
        }
    }
}

#[test]
fn threshold_oracle_on_single_spike() {
    let mut v = vec![0.0; 16];
    v[8] = 100.0;
    let grid = default_z_grid();
    let t = dynamic_threshold(&v, &grid).unwrap().unwrap();
    assert_eq!(Some((t.theta, t.z)), oracles::brute_force_threshold(&v, &grid));
    assert_eq!(runs_above(&v, t.theta), vec![(8, 8)]);
}

#[test]
fn planted_run_is_recovered_exactly() {
    let grid = default_z_grid();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..0.01)).collect();
        let start = rng.random_range(0..195);
        for x in &mut v[start..start + 5] {
            *x = rng.random_range(1.0..2.0);
        }
        let t = dynamic_threshold(&v, &grid).unwrap().unwrap();
        assert_eq!(runs_above(&v, t.theta), vec![(start, start + 4)], "seed {seed}");
        assert_eq!(Some((t.theta, t.z)), oracles::brute_force_threshold(&v, &grid));
    }
}

fn series(values: &[f64], spacing: i64) -> RecordSeries {
    RecordSeries {
        patient_id: "p".into(),
        item_id: "Pulse".into(),
        entity: "vitalsigns".into(),
        window: Window::new(Timestamp(0), Timestamp(spacing * values.len() as i64)),
        points: values
            .iter()
            .enumerate()
            .map(|(i, v)| SeriesPoint {
                timestamp: Timestamp(i as i64 * spacing),
                value: *v,
                record_id: Arc::from(format!("r{i}")),
            })
            .collect(),
    }
}

fn pulse(agg: Aggregation) -> FeatureDescriptor {
    FeatureDescriptor {
        feature_id: format!("vitalsigns.Pulse.{agg}.in-surgery"),
        display_name: "Pulse".into(),
        kind: FeatureKind::Dynamic,
        value_type: ValueType::Numeric,
        source_entity: "vitalsigns".into(),
        item_id: Some("Pulse".into()),
        aggregation: Some(agg),
        window: WindowKind::InSurgery,
        hierarchy_path: vec!["in-surgery".into(), "Pulse".into(), agg.title().into()],
        categories: vec![],
        lineage: LineageQuery {
            entity: "vitalsigns".into(),
            column: None,
            item: Some("Pulse".into()),
            window: WindowKind::InSurgery,
        },
    }
}

#[test]
fn affine_series_with_mean_in_range_has_no_segments() {
    let values: Vec<f64> = (0..40).map(|i| 100.0 + 0.5 * i as f64).collect();
    let reference = Reference::from_values(&[90.0, 110.0, 100.0, 120.0]);
    let set = influential_segments(
        &series(&values, 30),
        &pulse(Aggregation::Mean),
        &reference,
        5,
        &default_z_grid(),
    )
    .unwrap();
    assert!(set.segments.is_empty());
    assert_eq!(set.direction, Flag::Within);
}

#[test]
fn full_window_spreads_one_increment() {
    let values = [3.0, 9.0, 1.0, 4.0, 7.0];
    let inf = occlusion_influence(&series(&values, 60), &pulse(Aggregation::Sd), 5).unwrap();
    assert!(inf.v.iter().all(|x| *x == inf.v[0]) && inf.v[0] > 0.0);
}

#[test]
fn spike_segment_lands_on_the_spike() {
    let mut values = vec![100.0; 60];
    for (j, v) in values[30..36].iter_mut().enumerate() {
        *v += if j % 2 == 0 { 25.0 } else { -25.0 };
    }
    let s = series(&values, 20);
    let reference = Reference::from_values(&[0.5, 1.5, 1.0]);
    let set = influential_segments(&s, &pulse(Aggregation::Sd), &reference, 3, &default_z_grid()).unwrap();
    assert_eq!(set.direction, Flag::Above);
    let got: Vec<_> = set.segments.iter().map(|g| (g.start, g.end)).collect();
    assert!(oracles::jaccard(&got, &[(30, 35)]) >= 0.5, "{got:?}");
    assert_eq!(set.segments[0].start_ts, s.points[set.segments[0].start].timestamp);
}

#[test]
fn non_dynamic_or_mismatched_features_are_rejected() {
    let s = series(&[1.0, 2.0, 3.0], 60);
    let mut d = pulse(Aggregation::Mean);
    d.kind = FeatureKind::Static;
    assert!(occlusion_influence(&s, &d, 2).is_err());
    let mut d = pulse(Aggregation::Mean);
    d.item_id = Some("SpO2".into());
    assert!(occlusion_influence(&s, &d, 2).is_err());
    assert!(occlusion_influence(&s, &pulse(Aggregation::Mean), 4).is_err());
}

#[test]
fn overlay_rejects_foreign_sets() {
    let s = series(&[1.0, 2.0, 3.0, 4.0], 60);
    let reference = Reference::Undefined { n: 0 };
    let mut set = influential_segments(&s, &pulse(Aggregation::Max), &reference, 2, &default_z_grid()).unwrap();
    set.item_id = "SpO2".into();
    assert!(merge_overlays(&s, &[set]).is_err());
}
