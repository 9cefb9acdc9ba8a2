use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::info;

use clinexplain::cohort::{
    complication_status, feature_reference, record_references, select_cohort, split_risk, Cohort, CohortCache,
    CohortSelector, Reference,
};
use clinexplain::features::{
    build_matrix, synthesize_descriptors, target_windows, FeatureContext, FeatureDescriptor, FeatureMatrix,
    FeatureOptions, TargetWindows,
};
use clinexplain::label::labels;
use clinexplain::predictor::{encodings_for, train, Model, TrainConfig};
use clinexplain::shapley::{explain, ContributionSet};
use clinexplain::store::{Dataset, SURGERIES};
use clinexplain::Label;

use crate::config::ServiceConfig;
use crate::error::ServiceError;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// Everything derived from one cohort selection.
#[derive(Debug)]
pub struct CohortEntry {
    pub cohort: Cohort,
    pub low: Vec<String>,
    pub high: Vec<String>,
    /// Matrix rows of each risk group.
    pub low_rows: Vec<usize>,
    pub high_rows: Vec<usize>,
    /// Numeric features only; categoricals get distributions, not ranges.
    pub feature_refs: HashMap<String, Reference>,
    pub record_refs: BTreeMap<String, Reference>,
    /// Shapley background: low-risk rows, subsampled to the configured cap.
    pub background: Vec<Vec<Option<f64>>>,
}

impl CohortEntry {
    pub fn feature_reference(&self, feature_id: &str) -> Reference {
        self.feature_refs
            .get(feature_id)
            .cloned()
            .unwrap_or(Reference::Undefined { n: 0 })
    }

    pub fn record_reference(&self, item: &str) -> Reference {
        self.record_refs
            .get(item)
            .cloned()
            .unwrap_or(Reference::Undefined { n: 0 })
    }
}

#[derive(Debug)]
pub struct AppState {
    pub config: ServiceConfig,
    pub dataset: Dataset,
    pub descriptors: Vec<FeatureDescriptor>,
    pub matrix: FeatureMatrix,
    pub models: BTreeMap<Label, Model>,
    complicated: HashMap<String, bool>,
    /// First target row of every patient that has one.
    patient_rows: HashMap<String, usize>,
    cohorts: CohortCache<CohortEntry>,
    explanations: CohortCache<ContributionSet>,
    default_cohort: String,
}

/// Descriptors and matrix over the surgeries table.
pub fn featurize(dataset: &Dataset) -> Result<(Vec<FeatureDescriptor>, FeatureMatrix)> {
    let descriptors = synthesize_descriptors(dataset, &FeatureOptions::default())?;
    let ctx = FeatureContext::new(dataset, SURGERIES)?;
    let matrix = build_matrix(&ctx, &descriptors)?;
    Ok((descriptors, matrix))
}

/// Missing labels count as negative.
pub fn label_vector(dataset: &Dataset, label: Label) -> Result<Vec<bool>> {
    Ok(labels(dataset, SURGERIES, label)?
        .into_iter()
        .map(|l| l.unwrap_or(false))
        .collect())
}

pub fn train_model(
    dataset: &Dataset,
    descriptors: &[FeatureDescriptor],
    matrix: &FeatureMatrix,
    label: Label,
    config: &TrainConfig,
) -> Result<Model> {
    let y = label_vector(dataset, label)?;
    Ok(train(matrix, &encodings_for(matrix, descriptors), &y, label, config)?)
}

pub fn model_path(dir: &Path, label: Label) -> std::path::PathBuf {
    dir.join(format!("{label}.json"))
}

impl AppState {
    /// Loads the dataset and models named by `config`, training any model
    /// that has no file.
    pub fn build(config: ServiceConfig) -> Result<AppState> {
        config.validate()?;
        let dataset = Dataset::load(&config.data_dir)?;
        let mut models = BTreeMap::new();
        if let Some(dir) = &config.model_dir {
            for label in Label::ALL {
                let path = model_path(dir, label);
                if path.exists() {
                    models.insert(label, Model::load(&path)?);
                }
            }
        }
        AppState::from_parts(config, dataset, models)
    }

    pub fn from_parts(config: ServiceConfig, dataset: Dataset, mut models: BTreeMap<Label, Model>) -> Result<AppState> {
        config.validate()?;
        let (descriptors, matrix) = featurize(&dataset)?;
        for label in Label::ALL {
            if let Entry::Vacant(slot) = models.entry(label) {
                info!(%label, "training model");
                slot.insert(train_model(&dataset, &descriptors, &matrix, label, &config.train)?);
            }
        }
        let complicated = complication_status(&dataset, SURGERIES)?;
        let mut patient_rows = HashMap::new();
        for (r, p) in matrix.patient_ids.iter().enumerate() {
            patient_rows.entry(p.clone()).or_insert(r);
        }
        let state = AppState {
            config,
            dataset,
            descriptors,
            matrix,
            models,
            complicated,
            patient_rows,
            cohorts: CohortCache::default(),
            explanations: CohortCache::default(),
            default_cohort: CohortSelector::everyone().id(),
        };
        state.cohort(&CohortSelector::everyone())?;
        Ok(state)
    }

    pub fn default_cohort_id(&self) -> &str {
        &self.default_cohort
    }

    pub fn descriptor(&self, feature_id: &str) -> Result<&FeatureDescriptor> {
        self.descriptors
            .iter()
            .find(|d| d.feature_id == feature_id)
            .ok_or_else(|| clinexplain::Error::UnknownFeature(feature_id.to_string()).into())
    }

    pub fn model(&self, label: Label) -> Result<&Model> {
        self.models
            .get(&label)
            .ok_or_else(|| clinexplain::Error::UnknownTarget(label.to_string()).into())
    }

    /// Matrix row of the patient's surgery.
    pub fn patient_row(&self, patient: &str) -> Result<usize> {
        self.patient_rows
            .get(patient)
            .copied()
            .ok_or_else(|| clinexplain::Error::UnknownPatient(patient.to_string()).into())
    }

    pub fn windows(&self, row: usize) -> Result<TargetWindows> {
        Ok(target_windows(&self.dataset, SURGERIES, row)?.1)
    }

    /// Model input for a matrix row.
    pub fn model_input(&self, model: &Model, row: usize) -> Vec<Option<f64>> {
        model.align(&self.matrix.feature_ids, &self.matrix.row(row))
    }

    pub fn is_complicated(&self, patient: &str) -> bool {
        self.complicated.get(patient).copied().unwrap_or(false)
    }

    /// Selects (or fetches) the cohort for `selector`.
    pub fn cohort(&self, selector: &CohortSelector) -> Result<Arc<CohortEntry>> {
        let id = selector.id();
        Ok(self.cohorts.get_or_try_insert(&id, || self.build_cohort(selector))?)
    }

    /// A cohort previously created through [`AppState::cohort`].
    pub fn cohort_by_id(&self, id: Option<&str>) -> Result<Arc<CohortEntry>> {
        let id = id.unwrap_or(&self.default_cohort);
        self.cohorts
            .get(id)
            .ok_or_else(|| ServiceError::UnknownCohort(id.to_string()))
    }

    fn build_cohort(&self, selector: &CohortSelector) -> clinexplain::Result<CohortEntry> {
        let cohort = select_cohort(&self.dataset, selector)?;
        let split = split_risk(&cohort, &self.complicated);
        let rows_of = |ps: &[String]| -> Vec<usize> {
            let mut rows: Vec<usize> = (0..self.matrix.n_rows())
                .filter(|&r| ps.binary_search(&self.matrix.patient_ids[r]).is_ok())
                .collect();
            rows.sort_unstable();
            rows
        };
        let mut low_sorted = split.low.clone();
        low_sorted.sort();
        let mut high_sorted = split.high.clone();
        high_sorted.sort();
        let low_rows = rows_of(&low_sorted);
        let high_rows = rows_of(&high_sorted);
        let mut feature_refs = HashMap::new();
        for d in self.descriptors.iter().filter(|d| !d.is_categorical()) {
            feature_refs.insert(
                d.feature_id.clone(),
                feature_reference(&self.matrix, &low_rows, &d.feature_id)?,
            );
        }
        let record_refs = record_references(&self.dataset, &split.low);

        let mut pool = if low_rows.is_empty() {
            let mut all = cohort.patients.clone();
            all.sort();
            rows_of(&all)
        } else {
            low_rows.clone()
        };
        if pool.len() > self.config.max_background {
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed));
            pool.truncate(self.config.max_background);
            pool.sort_unstable();
        }
        let background = pool.iter().map(|&r| self.matrix.row(r)).collect();
        Ok(CohortEntry {
            cohort,
            low: split.low,
            high: split.high,
            low_rows,
            high_rows,
            feature_refs,
            record_refs,
            background,
        })
    }

    /// Background rows aligned to `model`; errors when the cohort has none.
    pub fn background(&self, entry: &CohortEntry, model: &Model) -> Result<Vec<Vec<Option<f64>>>> {
        if entry.background.is_empty() {
            return Err(ServiceError::BadRequest(format!(
                "cohort {} has no patients to explain against",
                entry.cohort.cohort_id
            )));
        }
        Ok(entry
            .background
            .iter()
            .map(|b| model.align(&self.matrix.feature_ids, b))
            .collect())
    }

    /// Contribution set for (patient, target, cohort), computed once.
    pub fn explanation(&self, patient: &str, target: Label, entry: &CohortEntry) -> Result<Arc<ContributionSet>> {
        let row = self.patient_row(patient)?;
        let key = format!("{patient}|{target}|{}", entry.cohort.cohort_id);
        if let Some(hit) = self.explanations.get(&key) {
            return Ok(hit);
        }
        let model = self.model(target)?;
        let background = self.background(entry, model)?;
        let x = self.model_input(model, row);
        let row_key = self.matrix.row_keys[row].clone();
        let config = self.config.explain();
        Ok(self
            .explanations
            .get_or_try_insert(&key, || explain(model, &row_key, &x, &background, &config))?)
    }

    pub fn cached_explanations(&self) -> usize {
        self.explanations.len()
    }
}
