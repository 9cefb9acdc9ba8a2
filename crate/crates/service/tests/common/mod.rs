#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use clinexplain::synth::{generate_dataset, GenerationReport, SynthConfig};
use clinexplain_service::{router, AppState, ServiceConfig};

pub mod sweep;

/// Patients in the shared API dataset.
pub const API_PATIENTS: usize = 60;

pub fn build_state(n_patients: usize, seed: u64) -> (AppState, GenerationReport) {
    let (ds, report) = generate_dataset(&SynthConfig {
        n_patients,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    (
        AppState::from_parts(ServiceConfig::default(), ds, BTreeMap::new()).unwrap(),
        report,
    )
}

/// Seed-42 state shared by the tests of one binary.
pub fn shared() -> Arc<AppState> {
    static STATE: OnceLock<Arc<AppState>> = OnceLock::new();
    STATE.get_or_init(|| Arc::new(build_state(API_PATIENTS, 42).0)).clone()
}

pub fn app() -> Router {
    router(shared())
}

pub async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<serde_json::Value>,
) -> (StatusCode, serde_json::Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = if bytes.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| serde_json::Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, json)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, serde_json::Value) {
    call(app, Method::GET, uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: serde_json::Value) -> (StatusCode, serde_json::Value) {
    call(app, Method::POST, uri, Some(body)).await
}

/// Structural equality with numbers compared to `tol` (absolute, or relative
/// above magnitude one). Returns the first differing path.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value, tol: f64, path: &str) -> Option<String> {
    use serde_json::Value as V;
    match (a, b) {
        (V::Number(x), V::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            ((x - y).abs() > tol * x.abs().max(y.abs()).max(1.0)).then(|| format!("{path}: {x} vs {y}"))
        }
        (V::Array(x), V::Array(y)) => {
            if x.len() != y.len() {
                return Some(format!("{path}: length {} vs {}", x.len(), y.len()));
            }
            x.iter()
                .zip(y)
                .enumerate()
                .find_map(|(i, (p, q))| json_diff(p, q, tol, &format!("{path}[{i}]")))
        }
        (V::Object(x), V::Object(y)) => {
            let kx: Vec<_> = x.keys().collect();
            let ky: Vec<_> = y.keys().collect();
            if kx != ky {
                return Some(format!("{path}: keys {kx:?} vs {ky:?}"));
            }
            x.iter()
                .find_map(|(k, v)| json_diff(v, &y[k], tol, &format!("{path}.{k}")))
        }
        _ => (a != b).then(|| format!("{path}: {a} vs {b}")),
    }
}
