//! Python bindings. Results cross the boundary as plain dicts and lists
//! built from the same JSON the HTTP API serves.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde::Serialize;
use serde_json::Value;

use clinexplain::cohort::{CohortSelector, Reference};
use clinexplain::influence::{default_window, influential_segments};
use clinexplain::store::Dataset;
use clinexplain::synth::{generate as synth_generate, generate_dataset, SynthConfig};
use clinexplain::Label;
use clinexplain_service::api::{self, FeaturesQuery, SeriesQuery, TimelineQuery, WhatIfRequest};
use clinexplain_service::state::model_path;
use clinexplain_service::{AppState, ServiceConfig, ServiceError};

create_exception!(clinexplain, ClinexplainError, PyValueError);

fn err(e: impl Into<ServiceError>) -> PyErr {
    let e = e.into();
    ClinexplainError::new_err(format!("{}: {e}", e.status_and_code().1))
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn convert<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &json)
}

/// Python object to a serde type by way of the `json` module.
fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn label(target: &str) -> PyResult<Label> {
    target.parse().map_err(|e: clinexplain::Error| err(e))
}

/// A loaded dataset with its feature matrix, five trained models and the
/// cohorts created so far.
#[pyclass(frozen, module = "clinexplain")]
struct Session {
    state: Arc<AppState>,
}

#[pymethods]
impl Session {
    /// Loads `data_dir`; models found in `model_dir` are reused, the rest
    /// are trained.
    #[new]
    #[pyo3(signature = (data_dir, model_dir=None))]
    fn new(py: Python<'_>, data_dir: PathBuf, model_dir: Option<PathBuf>) -> PyResult<Self> {
        let config = ServiceConfig {
            data_dir,
            model_dir,
            ..ServiceConfig::default()
        };
        let state = py.detach(|| AppState::build(config)).map_err(err)?;
        Ok(Session { state: Arc::new(state) })
    }

    /// Generates a dataset in memory and trains on it.
    #[staticmethod]
    #[pyo3(signature = (n_patients=60, seed=42))]
    fn synthetic(py: Python<'_>, n_patients: usize, seed: u64) -> PyResult<Self> {
        let state = py
            .detach(|| -> Result<AppState, ServiceError> {
                let (ds, _) = generate_dataset(&SynthConfig {
                    n_patients,
                    seed,
                    ..SynthConfig::default()
                })?;
                AppState::from_parts(ServiceConfig::default(), ds, BTreeMap::new())
            })
            .map_err(err)?;
        Ok(Session { state: Arc::new(state) })
    }

    #[getter]
    fn default_cohort(&self) -> String {
        self.state.default_cohort_id().to_string()
    }

    #[getter]
    fn feature_ids(&self) -> Vec<String> {
        self.state.matrix.feature_ids.clone()
    }

    fn descriptors<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        convert(py, &self.state.descriptors)
    }

    /// Every patient with its five risk probabilities and flags.
    fn patients<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        convert(py, &api::list_patients(&self.state).map_err(err)?)
    }

    fn predict(&self, patient: &str, target: &str) -> PyResult<f64> {
        let model = self.state.model(label(target)?).map_err(err)?;
        let row = self.state.patient_row(patient).map_err(err)?;
        model.predict(&self.state.model_input(model, row)).map_err(err)
    }

    /// Creates (or fetches) a cohort from a selector dict such as
    /// `{"predicates": [...]}` and returns its summary.
    fn cohort<'py>(&self, py: Python<'py>, selector: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let selector: CohortSelector = from_py(selector)?;
        let state = self.state.clone();
        let summary = py.detach(move || api::create_cohort(&state, &selector)).map_err(err)?;
        convert(py, &summary)
    }

    /// Reference range of a feature within a cohort's low-risk group.
    #[pyo3(signature = (feature_id, cohort=None))]
    fn reference<'py>(&self, py: Python<'py>, feature_id: &str, cohort: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        self.state.descriptor(feature_id).map_err(err)?;
        let entry = self.state.cohort_by_id(cohort).map_err(err)?;
        convert(py, &entry.feature_reference(feature_id))
    }

    /// Shapley contribution set of one patient and target.
    #[pyo3(signature = (patient, target, cohort=None))]
    fn explain<'py>(
        &self,
        py: Python<'py>,
        patient: &str,
        target: &str,
        cohort: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let target = label(target)?;
        let state = self.state.clone();
        let set = py
            .detach(|| {
                let entry = state.cohort_by_id(cohort)?;
                state.explanation(patient, target, &entry)
            })
            .map_err(err)?;
        convert(py, &*set)
    }

    /// Contributions rolled up over the feature hierarchy.
    #[pyo3(signature = (patient, target="C", cohort=None, sort=None, topk=None, min_abs=None))]
    #[allow(clippy::too_many_arguments)]
    fn features<'py>(
        &self,
        py: Python<'py>,
        patient: &str,
        target: &str,
        cohort: Option<String>,
        sort: Option<String>,
        topk: Option<usize>,
        min_abs: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let q = FeaturesQuery {
            target: Some(target.to_string()),
            cohort,
            sort,
            topk,
            min_abs,
        };
        let state = self.state.clone();
        let view = py.detach(|| api::patient_features(&state, patient, &q)).map_err(err)?;
        convert(py, &view)
    }

    /// Influential segments of one dynamic feature.
    #[pyo3(signature = (patient, feature_id, k=None, cohort=None))]
    fn influence<'py>(
        &self,
        py: Python<'py>,
        patient: &str,
        feature_id: &str,
        k: Option<usize>,
        cohort: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let state = self.state.clone();
        let set = py
            .detach(|| -> Result<_, ServiceError> {
                let d = state.descriptor(feature_id)?;
                if !d.is_dynamic() {
                    return Err(ServiceError::BadRequest(format!(
                        "{feature_id} is not a temporal feature"
                    )));
                }
                let row = state.patient_row(patient)?;
                let window = state.windows(row)?.get(d.window);
                let item = d.item_id.clone().unwrap_or_default();
                let series = state.dataset.get_series(patient, &item, window)?;
                let times: Vec<_> = series.points.iter().map(|p| p.timestamp).collect();
                let k = k.or(state.config.k).unwrap_or_else(|| default_window(&times));
                let entry = state.cohort_by_id(cohort)?;
                let reference = entry.feature_reference(feature_id);
                Ok(influential_segments(&series, d, &reference, k, &state.config.z_grid)?)
            })
            .map_err(err)?;
        convert(py, &set)
    }

    /// Raw records of one item with flags and, on request, explanations.
    #[pyo3(signature = (patient, item, explain_feature=None, cohort=None, k=None))]
    fn series<'py>(
        &self,
        py: Python<'py>,
        patient: &str,
        item: &str,
        explain_feature: Option<String>,
        cohort: Option<String>,
        k: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let q = SeriesQuery {
            cohort,
            explain_feature,
            k,
        };
        let state = self.state.clone();
        let view = py
            .detach(|| api::patient_series(&state, patient, item, &q))
            .map_err(err)?;
        convert(py, &view)
    }

    #[pyo3(signature = (patient, cohort=None))]
    fn profile<'py>(&self, py: Python<'py>, patient: &str, cohort: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        convert(py, &api::patient_profile(&self.state, patient, cohort).map_err(err)?)
    }

    #[pyo3(signature = (patient, cohort=None, interval="4h"))]
    fn timeline<'py>(
        &self,
        py: Python<'py>,
        patient: &str,
        cohort: Option<String>,
        interval: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let q = TimelineQuery {
            interval: Some(interval.to_string()),
            cohort: Some(cohort.unwrap_or_else(|| self.default_cohort())),
        };
        convert(py, &api::patient_timeline(&self.state, patient, &q).map_err(err)?)
    }

    /// Clamps an abnormal feature to its reference range and re-explains.
    #[pyo3(signature = (patient, target, feature_id, cohort=None))]
    fn whatif<'py>(
        &self,
        py: Python<'py>,
        patient: &str,
        target: &str,
        feature_id: &str,
        cohort: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let req = WhatIfRequest {
            target: label(target)?,
            feature_id: feature_id.to_string(),
            cohort_id: cohort,
        };
        let state = self.state.clone();
        let result = py.detach(|| api::patient_whatif(&state, patient, &req)).map_err(err)?;
        convert(py, &result)
    }

    /// Writes the five models as `<label>.json` into `dir`.
    fn save_models(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir).map_err(|e| PyValueError::new_err(e.to_string()))?;
        for (label, model) in &self.state.models {
            model.save(model_path(&dir, *label)).map_err(err)?;
        }
        Ok(())
    }
}

/// Writes a synthetic dataset into `out_dir`; returns the generation report.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=42, n_patients=1000))]
fn generate<'py>(py: Python<'py>, out_dir: PathBuf, seed: u64, n_patients: usize) -> PyResult<Bound<'py, PyAny>> {
    let config = SynthConfig {
        seed,
        n_patients,
        ..SynthConfig::default()
    };
    let report = py.detach(|| synth_generate(&config, &out_dir)).map_err(err)?;
    convert(py, &report)
}

/// Loads a dataset directory and returns its table sizes.
#[pyfunction]
fn table_counts(py: Python<'_>, data_dir: PathBuf) -> PyResult<BTreeMap<String, usize>> {
    let ds = py.detach(|| Dataset::load(&data_dir)).map_err(err)?;
    Ok(ds.tables().iter().map(|t| (t.name().to_string(), t.len())).collect())
}

/// `mean +- 1.96 sd` of `values`; undefined below two values.
#[pyfunction]
fn reference_range<'py>(py: Python<'py>, values: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    convert(py, &Reference::from_values(&values))
}

/// Area under the ROC curve; `None` unless both classes are present.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(clinexplain::predictor::auc(&scores, &labels))
}

#[pymodule]
#[pyo3(name = "clinexplain")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ClinexplainError", m.py().get_type::<ClinexplainError>())?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(table_counts, m)?)?;
    m.add_function(wrap_pyfunction!(reference_range, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    Ok(())
}
