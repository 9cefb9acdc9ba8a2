mod oracles;

use clinexplain::features::{build_matrix, synthesize_descriptors, FeatureContext, FeatureMatrix, FeatureOptions};
use clinexplain::label::labels;
use clinexplain::predictor::*;
use clinexplain::store::SURGERIES;
use clinexplain::synth::{generate_dataset, SynthConfig};
use clinexplain::Label;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn gradient_matches_central_differences(
        n in 1usize..30,
        d in 1usize..6,
        seed in any::<u64>(),
        l2 in 0.0..0.5f64,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let b = rng.random_range(-1.0..1.0);
        let obj = Objective { x: &x, n, d, y: &y, l2 };
        let (loss, gw, gb) = obj.loss_and_gradient(&w, b);
        prop_assert!((loss - obj.loss(&w, b)).abs() < 1e-12);
        let h = 1e-5;
        let rel = |a: f64, fd: f64| (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3);
        for j in 0..d {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += h;
            wm[j] -= h;
            let fd = (obj.loss(&wp, b) - obj.loss(&wm, b)) / (2.0 * h);
            prop_assert!(rel(gw[j], fd), "w{j}: {} vs {fd}", gw[j]);
        }
        let fd = (obj.loss(&w, b + h) - obj.loss(&w, b - h)) / (2.0 * h);
        prop_assert!(rel(gb, fd), "b: {gb} vs {fd}");
    }

    #[test]
    fn auc_equals_all_pairs_count(
        data in prop::collection::vec((0u8..12, any::<bool>()), 0..=200),
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 4.0).collect();
        let y: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        prop_assert_eq!(auc(&scores, &y), oracles::all_pairs_auc(&scores, &y));
    }

    #[test]
    fn prediction_ignores_feature_storage_order(seed in any::<u64>(), d in 1usize..8) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        let rows: Vec<Vec<Option<f64>>> = (0..40)
            .map(|_| (0..d).map(|_| if rng.random_bool(0.1) { None } else { Some(rng.random_range(-3.0..3.0)) }).collect())
            .collect();
        let y: Vec<bool> = rows.iter().map(|r| r[0].unwrap_or(0.0) + rng.random_range(-1.0..1.0) > 0.0).collect();
        let keys: Vec<String> = (0..rows.len()).map(|i| i.to_string()).collect();
        let m = FeatureMatrix::from_rows(ids.clone(), keys.clone(), keys, &rows).unwrap();
        let model = train(&m, &vec![Encoding::Numeric; d], &y, Label::C, &TrainConfig::default()).unwrap();

        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut rng);
        let shuffled_ids: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
        for r in &rows {
            let shuffled: Vec<Option<f64>> = order.iter().map(|&i| r[i]).collect();
            let aligned = model.align(&shuffled_ids, &shuffled);
            prop_assert_eq!(model.predict(&aligned).unwrap(), model.predict(r).unwrap());
        }
    }
}

#[test]
fn constant_scores_give_one_half() {
    let y = [true, false, false, true, false];
    assert_eq!(auc(&[0.3; 5], &y), Some(0.5));
    assert_eq!(auc(&[0.3; 3], &[true; 3]), None);
}

fn synthetic(
    n: usize,
) -> (
    FeatureMatrix,
    Vec<Encoding>,
    clinexplain::store::Dataset,
    Vec<clinexplain::features::FeatureDescriptor>,
) {
    let config = SynthConfig {
        n_patients: n,
        ..SynthConfig::default()
    };
    let (ds, _) = generate_dataset(&config).unwrap();
    let descs = synthesize_descriptors(&ds, &FeatureOptions::default()).unwrap();
    let ctx = FeatureContext::new(&ds, SURGERIES).unwrap();
    let m = build_matrix(&ctx, &descs).unwrap();
    let enc = encodings_for(&m, &descs);
    (m, enc, ds, descs)
}

fn label_vec(ds: &clinexplain::store::Dataset, l: Label) -> Vec<bool> {
    labels(ds, SURGERIES, l)
        .unwrap()
        .into_iter()
        .map(|v| v.unwrap_or(false))
        .collect()
}

#[test]
fn planted_effects_are_recovered_and_separable() {
    let (m, enc, ds, _) = synthetic(1000);
    let config = SynthConfig::default();
    for l in Label::ALL {
        let y = label_vec(&ds, l);
        let model = train(&m, &enc, &y, l, &TrainConfig::default()).unwrap();
        let w = model.feature_weights();
        for e in config.planted_effects.iter().filter(|e| e.label == l) {
            let i = m.column_index(&e.feature).unwrap();
            assert_eq!(w[i].signum(), e.weight.signum(), "{l} {}: {}", e.feature, w[i]);
        }
        let cv = cross_validate(&m, &enc, &y, l, &TrainConfig::default()).unwrap();
        println!("{l}: mean CV AUC {:.3}", cv.mean_auc);
        assert!(cv.mean_auc >= 0.85, "{l}: {}", cv.mean_auc);
    }
}

#[test]
fn permuted_labels_carry_no_signal() {
    let (m, enc, ds, _) = synthetic(500);
    let mut y = label_vec(&ds, Label::C);
    y.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let cv = cross_validate(&m, &enc, &y, Label::C, &TrainConfig::default()).unwrap();
    assert!((cv.mean_auc - 0.5).abs() <= 0.07, "{}", cv.mean_auc);
}

#[test]
fn saved_model_round_trips() {
    let (m, enc, ds, _) = synthetic(60);
    let y = label_vec(&ds, Label::A);
    let model = train(&m, &enc, &y, Label::A, &TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("A.json");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);
    for r in 0..m.n_rows() {
        assert_eq!(back.predict(&m.row(r)).unwrap(), model.predict(&m.row(r)).unwrap());
    }
}

#[test]
fn degenerate_inputs_are_rejected() {
    let (m, enc, _, _) = synthetic(30);
    let all_false = vec![false; m.n_rows()];
    assert!(cross_validate(&m, &enc, &all_false, Label::C, &TrainConfig::default()).is_err());
    assert!(train(&m, &enc, &all_false[1..], Label::C, &TrainConfig::default()).is_err());
    let bad = TrainConfig {
        cv_folds: 1,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}
