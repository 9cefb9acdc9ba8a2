//! Endpoint sweep over the seed-42 dataset compared with committed JSON.
//! Run with `UPDATE_FIXTURES=1` to rewrite the fixtures.

use std::path::PathBuf;

use axum::http::Method;
use serde_json::{json, Value};

use super::{app, call, json_diff, shared};

pub const FLOAT_TOLERANCE: f64 = 1e-9;

fn sweep(everyone: &str) -> Vec<(&'static str, Method, String, Option<Value>)> {
    let g = |name, uri: &str| (name, Method::GET, uri.to_string(), None);
    vec![
        g("patients", "/api/patients"),
        g("descriptors", "/api/descriptors"),
        (
            "cohort_everyone",
            Method::POST,
            "/api/cohort".into(),
            Some(json!({ "predicates": [] })),
        ),
        (
            "cohort_young_septal",
            Method::POST,
            "/api/cohort".into(),
            Some(json!({ "predicates": [
                { "kind": "numeric_range", "entity": "patients", "column": "age", "low": 1, "high": 36 },
                { "kind": "categorical", "entity": "admissions", "column": "diagnosis", "values": ["VSD", "TOF", "ASD"] }
            ] })),
        ),
        g("profile_P00001", "/api/patient/P00001/profile"),
        g("items_P00001", "/api/patient/P00001/items"),
        g("features_P00002_C_top5", "/api/patient/P00002/features?target=C&topk=5"),
        g(
            "features_P00008_A_name",
            "/api/patient/P00008/features?target=A&sort=name&min_abs=0.002",
        ),
        g("distribution_P00001_surgery_time", "/api/patient/P00001/distribution/surgeries.surgery_time"),
        g("distribution_P00001_diagnosis", "/api/patient/P00001/distribution/admissions.diagnosis"),
        g("series_P00003_Pulse", "/api/patient/P00003/series/Pulse"),
        g(
            "series_P00003_Pulse_explained",
            "/api/patient/P00003/series/Pulse?explain_feature=vitalsigns.Pulse.SD.in-surgery,vitalsigns.Pulse.MAX.in-surgery",
        ),
        g("series_P00010_Lactate", "/api/patient/P00010/series/Lactate"),
        (
            "timeline_P00004_4h",
            Method::GET,
            format!("/api/patient/P00004/timeline?interval=4h&cohort={everyone}"),
            None,
        ),
        (
            "timeline_P00004_8h",
            Method::GET,
            format!("/api/patient/P00004/timeline?interval=8h&cohort={everyone}"),
            None,
        ),
        (
            "whatif_P00005_lactate",
            Method::POST,
            "/api/patient/P00005/whatif".into(),
            Some(json!({ "target": "C", "feature_id": "labtests.Lactate.MEAN.pre-surgery", "cohort_id": everyone })),
        ),
        g("error_unknown_patient", "/api/patient/P99999/profile"),
        g("error_unknown_cohort", "/api/patient/P00001/features?cohort=c-ffffffffffffffff"),
        (
            "error_bad_interval",
            Method::GET,
            format!("/api/patient/P00004/timeline?interval=3h&cohort={everyone}"),
            None,
        ),
        g("error_timeline_without_cohort", "/api/patient/P00004/timeline?interval=4h"),
    ]
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Runs the sweep; returns `(name, first difference)` for every mismatch.
pub async fn run_sweep() -> Vec<(String, String)> {
    let app = app();
    let everyone = shared().default_cohort_id().to_string();
    let update = std::env::var("UPDATE_FIXTURES").is_ok_and(|v| v == "1");
    let dir = fixture_dir();
    let mut failures = Vec::new();
    for (name, method, uri, body) in sweep(&everyone) {
        let (status, response) = call(&app, method, &uri, body).await;
        let got = json!({ "status": status.as_u16(), "body": response });
        let path = dir.join(format!("{name}.json"));
        if update {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
            continue;
        }
        let want: Value = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap(),
            Err(e) => {
                failures.push((name.to_string(), format!("missing fixture: {e}")));
                continue;
            }
        };
        if let Some(d) = json_diff(&got, &want, FLOAT_TOLERANCE, "") {
            failures.push((name.to_string(), d));
        }
    }
    failures
}
