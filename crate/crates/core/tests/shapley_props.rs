mod oracles;

use clinexplain::features::{FeatureDescriptor, FeatureKind, LineageQuery, ValueType, WindowKind};
use clinexplain::predictor::{sigmoid, Model, ModelColumn};
use clinexplain::shapley::*;
use clinexplain::Label;
use proptest::prelude::*;

fn model(weights: &[f64], means: &[f64], sds: &[f64], bias: f64) -> Model {
    Model {
        target_label: Label::C,
        feature_ids: (0..weights.len()).map(|i| format!("f{i}")).collect(),
        columns: (0..weights.len())
            .map(|i| ModelColumn {
                name: format!("f{i}"),
                feature: i,
                category: None,
                impute: means[i],
                mean: means[i],
                sd: sds[i],
                weight: weights[i],
            })
            .collect(),
        bias,
        dropped: vec![],
    }
}

fn opt(v: &[f64]) -> Vec<Option<f64>> {
    v.iter().map(|x| Some(*x)).collect()
}

prop_compose! {
    fn instance(max_m: usize)(m in 1..=max_m)(
        w in prop::collection::vec(-2.0..2.0f64, m),
        mu in prop::collection::vec(-1.0..1.0f64, m),
        sd in prop::collection::vec(0.5..2.0f64, m),
        bias in -1.0..1.0f64,
        x in prop::collection::vec(-3.0..3.0f64, m),
        bg in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, m), 1..6),
    ) -> (Model, Vec<f64>, Vec<Vec<f64>>) {
        (model(&w, &mu, &sd, bias), x, bg)
    }
}

proptest! {
    #[test]
    fn exact_matches_permutation_brute_force((m, x, bg) in instance(6), bump in -1.0..1.0f64) {
        // a non-additive function so interactions matter
        let f = |v: &[Option<f64>]| {
            let p = m.predict_unchecked(v);
            p * p + bump * v[0].unwrap() * v[v.len() - 1].unwrap()
        };
        let bgo: Vec<_> = bg.iter().map(|b| opt(b)).collect();
        let a = exact_attribution(&f, &opt(&x), &bgo, DEFAULT_EXACT_LIMIT).unwrap();
        let (base, phi) = oracles::brute_force_shapley(&f, &opt(&x), &bgo);
        prop_assert!((a.base_value - base).abs() < 1e-10);
        for (p, q) in a.phi.iter().zip(&phi) {
            prop_assert!((p - q).abs() < 1e-10, "{p} vs {q}");
        }
    }

    #[test]
    fn logit_space_matches_linear_closed_form((m, x, bg) in instance(10)) {
        let f = |v: &[Option<f64>]| m.logit_unchecked(v);
        let bgo: Vec<_> = bg.iter().map(|b| opt(b)).collect();
        let a = exact_attribution(&f, &opt(&x), &bgo, DEFAULT_EXACT_LIMIT).unwrap();
        let closed = oracles::linear_logit_shapley(&m, &x, &bg);
        for (p, q) in a.phi.iter().zip(&closed) {
            prop_assert!((p - q).abs() < 1e-8);
        }
    }

    #[test]
    fn exact_is_efficient((m, x, bg) in instance(10)) {
        let bgo: Vec<_> = bg.iter().map(|b| opt(b)).collect();
        let set = shap_exact(&m, "r", &opt(&x), &bgo, DEFAULT_EXACT_LIMIT).unwrap();
        prop_assert!(set.efficiency_gap() < 1e-6);
        prop_assert_eq!(set.prediction, m.predict(&opt(&x)).unwrap());
    }

    #[test]
    fn model_path_matches_generic_enumeration((m, x, bg) in instance(10), holes in any::<u16>()) {
        // some missing entries exercise imputation in both paths
        let x: Vec<Option<f64>> = x.iter().enumerate().map(|(i, v)| (holes >> i & 1 == 0).then_some(*v)).collect();
        let bgo: Vec<_> = bg.iter().map(|b| opt(b)).collect();
        let fast = shap_exact(&m, "r", &x, &bgo, DEFAULT_EXACT_LIMIT).unwrap();
        let f = |v: &[Option<f64>]| m.predict_unchecked(v);
        let slow = exact_attribution(&f, &x, &bgo, DEFAULT_EXACT_LIMIT).unwrap();
        prop_assert!((fast.base_value - slow.base_value).abs() < 1e-12);
        for (c, p) in fast.contributions.iter().zip(&slow.phi) {
            prop_assert!((c.phi - p).abs() < 1e-12, "{} vs {p}", c.phi);
        }
    }

    #[test]
    fn sampled_is_efficient_after_redistribution((m, x, bg) in instance(20), seed in any::<u64>()) {
        let bgo: Vec<_> = bg.iter().map(|b| opt(b)).collect();
        let set = shap_sampled(&m, "r", &opt(&x), &bgo, 64, seed).unwrap();
        prop_assert!(set.efficiency_gap() < 1e-9);
        let again = shap_sampled(&m, "r", &opt(&x), &bgo, 64, seed).unwrap();
        prop_assert_eq!(set, again);
    }

    #[test]
    fn dummy_feature_gets_zero((m, mut x, mut bg) in instance(8), c in -2.0..2.0f64) {
        let i = x.len() - 1;
        x[i] = c;
        for b in &mut bg {
            b[i] = c;
        }
        let bgo: Vec<_> = bg.iter().map(|b| opt(b)).collect();
        let set = shap_exact(&m, "r", &opt(&x), &bgo, DEFAULT_EXACT_LIMIT).unwrap();
        prop_assert!(set.contributions[i].phi.abs() < 1e-12);
    }

    #[test]
    fn exchangeable_features_share_credit(
        w in -2.0..2.0f64, other in -2.0..2.0f64, xv in -2.0..2.0f64, x2 in -2.0..2.0f64,
        bg in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 1..5),
    ) {
        let m = model(&[w, w, other], &[0.0, 0.0, 0.3], &[1.0, 1.0, 1.5], 0.2);
        let bgo: Vec<_> = bg.iter().map(|(a, b)| vec![Some(*a), Some(*a), Some(*b)]).collect();
        let set = shap_exact(&m, "r", &[Some(xv), Some(xv), Some(x2)], &bgo, DEFAULT_EXACT_LIMIT).unwrap();
        prop_assert!((set.contributions[0].phi - set.contributions[1].phi).abs() < 1e-12);
    }
}

#[test]
fn sampled_approaches_exact() {
    let m = model(&[1.0, -0.5, 0.8, 0.2], &[0.0; 4], &[1.0; 4], -0.3);
    let x = opt(&[1.5, -1.0, 0.5, 2.0]);
    let bg: Vec<_> = (0..16)
        .map(|i| {
            opt(&[
                (i % 4) as f64 - 1.5,
                (i % 3) as f64 - 1.0,
                (i % 5) as f64 * 0.3,
                -(i as f64) * 0.1,
            ])
        })
        .collect();
    let exact = shap_exact(&m, "r", &x, &bg, DEFAULT_EXACT_LIMIT).unwrap();
    let sampled = shap_sampled(&m, "r", &x, &bg, 20_000, 11).unwrap();
    for (e, s) in exact.contributions.iter().zip(&sampled.contributions) {
        assert!((e.phi - s.phi).abs() < 0.02, "{} vs {}", e.phi, s.phi);
    }
    let ShapMethod::Sampled { residual, .. } = sampled.method else {
        panic!()
    };
    assert!(residual.abs() < 0.05);
}

#[test]
fn explain_switches_to_sampling_above_the_limit() {
    let m = model(&[0.1; 16], &[0.0; 16], &[1.0; 16], 0.0);
    let x = vec![Some(1.0); 16];
    let bg = vec![vec![Some(0.0); 16]; 3];
    let set = explain(&m, "r", &x, &bg, &ExplainConfig::default()).unwrap();
    assert!(matches!(set.method, ShapMethod::Sampled { .. }));
    assert!(set.efficiency_gap() < 1e-9);
    assert!(shap_exact(&m, "r", &x, &bg, 14).is_err());
}

#[test]
fn one_hot_categorical_is_a_single_player() {
    let mut m = model(&[0.5, 0.0], &[0.0, 0.0], &[1.0, 1.0], 0.1);
    // feature 1 is categorical with three codes, one-hot expanded
    m.columns.truncate(1);
    for (c, w) in [0.7, -0.4, 0.2].iter().enumerate() {
        m.columns.push(ModelColumn {
            name: format!("f1={c}"),
            feature: 1,
            category: Some(c),
            impute: 1.0 / 3.0,
            mean: 1.0 / 3.0,
            sd: 0.5,
            weight: *w,
        });
    }
    let x = vec![Some(1.0), Some(2.0)];
    let bg = vec![vec![Some(0.0), Some(0.0)], vec![Some(-1.0), Some(1.0)]];
    let set = shap_exact(&m, "r", &x, &bg, 14).unwrap();
    assert_eq!(set.contributions.len(), 2);
    assert!(set.efficiency_gap() < 1e-12);
}

fn descriptor(id: &str, path: [&str; 3]) -> FeatureDescriptor {
    FeatureDescriptor {
        feature_id: id.into(),
        display_name: id.into(),
        kind: FeatureKind::Static,
        value_type: ValueType::Numeric,
        source_entity: "patients".into(),
        item_id: None,
        aggregation: None,
        window: WindowKind::PreSurgery,
        hierarchy_path: path.iter().map(|s| s.to_string()).collect(),
        categories: vec![],
        lineage: LineageQuery {
            entity: "patients".into(),
            column: Some(id.into()),
            item: None,
            window: WindowKind::PreSurgery,
        },
    }
}

proptest! {
    #[test]
    fn rollup_is_additive_at_every_level(phis in prop::collection::vec(-1.0..1.0f64, 6), base in 0.0..1.0f64) {
        let paths = [
            ["pre-surgery", "demographics", "age"],
            ["pre-surgery", "demographics", "weight"],
            ["pre-surgery", "Lactate", "Mean"],
            ["in-surgery", "Pulse", "Mean"],
            ["in-surgery", "Pulse", "SD"],
            ["in-surgery", "surgery info", "cpb_time"],
        ];
        let descs: Vec<_> = paths.iter().enumerate().map(|(i, p)| descriptor(&format!("f{i}"), *p)).collect();
        let h = build_hierarchy(&descs);
        let contributions: Vec<_> = phis.iter().enumerate().map(|(i, p)| Contribution { feature_id: format!("f{i}"), phi: *p }).collect();
        let r = group_rollup(&h, &contributions).unwrap();
        fn check(n: &HierarchyNode) -> bool {
            if n.children.is_empty() {
                return true;
            }
            let s: f64 = n.children.iter().map(|c| c.group_contribution).sum();
            (s - n.group_contribution).abs() < 1e-12 && n.children.iter().all(check)
        }
        prop_assert!(check(&r));
        let prediction = base + phis.iter().sum::<f64>();
        prop_assert!((r.group_contribution + base - prediction).abs() < 1e-12);
        prop_assert_eq!(r.leaves().len(), 6);
    }
}

#[test]
fn single_child_group_equals_leaf() {
    let descs = vec![descriptor("only", ["pre-surgery", "demographics", "age"])];
    let r = group_rollup(
        &build_hierarchy(&descs),
        &[Contribution {
            feature_id: "only".into(),
            phi: 0.25,
        }],
    )
    .unwrap();
    assert_eq!(r.children[0].group_contribution, 0.25);
    assert_eq!(r.children[0].children[0].group_contribution, 0.25);
}

#[test]
fn sigmoid_of_zero_is_one_half() {
    assert_eq!(sigmoid(0.0), 0.5);
}
