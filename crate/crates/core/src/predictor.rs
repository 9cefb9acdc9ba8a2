//! L2-regularised logistic regression, one model per complication target.
//!
//! Inputs are imputed with training means, one-hot expanded for categorical
//! features, and standardised. Zero-variance columns are dropped and listed in
//! [`Model::dropped`].

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDescriptor, FeatureMatrix};
use crate::label::Label;

/// Probability at or above which a prediction counts as positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2_strength: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub convergence_tolerance: f64,
    pub seed: u64,
    pub cv_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_strength: 0.02,
            learning_rate: 1.0,
            max_epochs: 2000,
            convergence_tolerance: 1e-6,
            seed: 42,
            cv_folds: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.l2_strength > 0.0
            && self.learning_rate > 0.0
            && self.max_epochs > 0
            && self.convergence_tolerance > 0.0;
        if !positive {
            return Err(Error::InvalidConfig("training parameters must be positive".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidConfig("cv_folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// How a matrix column enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    Numeric,
    /// Category codes `0..n`, one-hot expanded.
    Categorical(usize),
}

/// Encodings for the matrix columns, taken from the matching descriptors.
pub fn encodings_for(matrix: &FeatureMatrix, descriptors: &[FeatureDescriptor]) -> Vec<Encoding> {
    matrix
        .feature_ids
        .iter()
        .map(|id| match descriptors.iter().find(|d| &d.feature_id == id) {
            Some(d) if d.is_categorical() => Encoding::Categorical(d.categories.len()),
            _ => Encoding::Numeric,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelColumn {
    pub name: String,
    /// Index into `Model::feature_ids`.
    pub feature: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<usize>,
    pub impute: f64,
    pub mean: f64,
    pub sd: f64,
    pub weight: f64,
}

impl ModelColumn {
    fn raw(&self, x: &[Option<f64>]) -> f64 {
        match (x[self.feature], self.category) {
            (None, _) => self.impute,
            (Some(v), None) => v,
            (Some(v), Some(c)) => {
                if v == c as f64 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn standardized(&self, x: &[Option<f64>]) -> f64 {
        (self.raw(x) - self.mean) / self.sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub target_label: Label,
    pub feature_ids: Vec<String>,
    pub columns: Vec<ModelColumn>,
    pub bias: f64,
    /// Zero-variance model columns left out of the fit.
    #[serde(default)]
    pub dropped: Vec<String>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Model {
    fn check(&self, x: &[Option<f64>]) -> Result<()> {
        if x.len() != self.feature_ids.len() {
            return Err(Error::InvalidInput(format!(
                "feature vector has {} entries, model expects {}",
                x.len(),
                self.feature_ids.len()
            )));
        }
        Ok(())
    }

    /// Linear score before the sigmoid. Assumes an aligned vector.
    pub fn logit_unchecked(&self, x: &[Option<f64>]) -> f64 {
        self.bias + self.columns.iter().map(|c| c.weight * c.standardized(x)).sum::<f64>()
    }

    pub fn predict_unchecked(&self, x: &[Option<f64>]) -> f64 {
        sigmoid(self.logit_unchecked(x))
    }

    /// Per-feature share of the logit; `bias + sum` equals the logit.
    pub fn feature_terms(&self, x: &[Option<f64>]) -> Vec<f64> {
        let mut terms = vec![0.0; self.feature_ids.len()];
        for c in &self.columns {
            terms[c.feature] += c.weight * c.standardized(x);
        }
        terms
    }

    pub fn logit(&self, x: &[Option<f64>]) -> Result<f64> {
        self.check(x)?;
        Ok(self.logit_unchecked(x))
    }

    /// Risk probability in (0, 1).
    pub fn predict(&self, x: &[Option<f64>]) -> Result<f64> {
        self.check(x)?;
        Ok(self.predict_unchecked(x))
    }

    /// Reorders `x` from `ids` into this model's feature order. Features the
    /// model knows but `ids` lacks are missing.
    pub fn align(&self, ids: &[String], x: &[Option<f64>]) -> Vec<Option<f64>> {
        self.feature_ids
            .iter()
            .map(|f| ids.iter().position(|i| i == f).and_then(|p| x[p]))
            .collect()
    }

    /// Per-feature weight sums (one-hot columns folded back onto their feature).
    pub fn feature_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.feature_ids.len()];
        for c in &self.columns {
            w[c.feature] += c.weight / c.sd;
        }
        w
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean logistic loss plus `l2/2 * |w|^2` over a dense standardised design.
pub struct Objective<'a> {
    pub x: &'a [f64],
    pub n: usize,
    pub d: usize,
    pub y: &'a [bool],
    pub l2: f64,
}

impl Objective<'_> {
    pub fn loss(&self, w: &[f64], b: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n {
            let row = &self.x[i * self.d..(i + 1) * self.d];
            let z = b + dot(row, w);
            total += softplus(z) - if self.y[i] { z } else { 0.0 };
        }
        total / self.n as f64 + 0.5 * self.l2 * dot(w, w)
    }

    /// Loss, weight gradient and bias gradient.
    pub fn loss_and_gradient(&self, w: &[f64], b: f64) -> (f64, Vec<f64>, f64) {
        let mut gw = vec![0.0; self.d];
        let mut gb = 0.0;
        let mut total = 0.0;
        for i in 0..self.n {
            let row = &self.x[i * self.d..(i + 1) * self.d];
            let z = b + dot(row, w);
            let yi = if self.y[i] { 1.0 } else { 0.0 };
            total += softplus(z) - yi * z;
            let r = sigmoid(z) - yi;
            gb += r;
            for (g, xv) in gw.iter_mut().zip(row) {
                *g += r * xv;
            }
        }
        let n = self.n as f64;
        for (g, wv) in gw.iter_mut().zip(w) {
            *g = *g / n + self.l2 * wv;
        }
        (total / n + 0.5 * self.l2 * dot(w, w), gw, gb / n)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Design {
    columns: Vec<ModelColumn>,
    dropped: Vec<String>,
    x: Vec<f64>,
}

fn design(matrix: &FeatureMatrix, encodings: &[Encoding], rows: &[usize]) -> Design {
    let mut candidates = Vec::new();
    for (f, enc) in encodings.iter().enumerate() {
        let id = &matrix.feature_ids[f];
        match enc {
            Encoding::Numeric => candidates.push((id.clone(), f, None)),
            Encoding::Categorical(n) => {
                for c in 0..*n {
                    candidates.push((format!("{id}={c}"), f, Some(c)));
                }
            }
        }
    }
    let mut columns = Vec::new();
    let mut dropped = Vec::new();
    for (name, feature, category) in candidates {
        let raw: Vec<Option<f64>> = rows
            .iter()
            .map(|&r| {
                matrix.get(r, feature).map(|v| match category {
                    None => v,
                    Some(c) => (v == c as f64) as u8 as f64,
                })
            })
            .collect();
        let present: Vec<f64> = raw.iter().flatten().copied().collect();
        let impute = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let filled: Vec<f64> = raw.iter().map(|v| v.unwrap_or(impute)).collect();
        let mean = filled.iter().sum::<f64>() / filled.len().max(1) as f64;
        let var = if filled.len() > 1 {
            filled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (filled.len() - 1) as f64
        } else {
            0.0
        };
        let sd = var.sqrt();
        if sd.is_nan() || sd <= 1e-12 {
            dropped.push(name);
            continue;
        }
        columns.push(ModelColumn {
            name,
            feature,
            category,
            impute,
            mean,
            sd,
            weight: 0.0,
        });
    }
    let d = columns.len();
    let mut x = vec![0.0; rows.len() * d];
    for (i, &r) in rows.iter().enumerate() {
        let xr = matrix.row(r);
        for (j, c) in columns.iter().enumerate() {
            x[i * d + j] = c.standardized(&xr);
        }
    }
    Design { columns, dropped, x }
}

fn fit_rows(
    matrix: &FeatureMatrix,
    encodings: &[Encoding],
    labels: &[bool],
    rows: &[usize],
    target: Label,
    config: &TrainConfig,
) -> Result<Model> {
    if rows.is_empty() || matrix.n_features() == 0 {
        return Err(Error::InvalidInput("empty training matrix".into()));
    }
    let y: Vec<bool> = rows.iter().map(|&r| labels[r]).collect();
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::DegenerateLabels(format!(
            "all {} training labels are identical",
            y.len()
        )));
    }
    let Design {
        mut columns,
        dropped,
        x,
    } = design(matrix, encodings, rows);
    let d = columns.len();
    let obj = Objective {
        x: &x,
        n: rows.len(),
        d,
        y: &y,
        l2: config.l2_strength,
    };

    let mut w = vec![0.0; d];
    let pos = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
    let mut b = (pos / (1.0 - pos)).ln();
    let mut lr = config.learning_rate;
    let (mut loss, mut gw, mut gb) = obj.loss_and_gradient(&w, b);
    for _ in 0..config.max_epochs {
        let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if gmax < config.convergence_tolerance {
            break;
        }
        let gnorm2 = dot(&gw, &gw) + gb * gb;
        // backtracking line search on the step size (Armijo condition)
        loop {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi - lr * gi).collect();
            let b_new = b - lr * gb;
            let cand = obj.loss(&w_new, b_new);
            if cand <= loss - 0.5 * lr * gnorm2 || lr < 1e-12 {
                w = w_new;
                b = b_new;
                break;
            }
            lr *= 0.5;
        }
        (loss, gw, gb) = obj.loss_and_gradient(&w, b);
        lr = (lr * 1.25).min(config.learning_rate * 16.0);
    }

    for (c, wi) in columns.iter_mut().zip(w) {
        c.weight = wi;
    }
    Ok(Model {
        target_label: target,
        feature_ids: matrix.feature_ids.clone(),
        columns,
        bias: b,
        dropped,
    })
}

/// Fits a model on every row of `matrix`.
pub fn train(
    matrix: &FeatureMatrix,
    encodings: &[Encoding],
    labels: &[bool],
    target: Label,
    config: &TrainConfig,
) -> Result<Model> {
    config.validate()?;
    if labels.len() != matrix.n_rows() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} rows",
            labels.len(),
            matrix.n_rows()
        )));
    }
    if encodings.len() != matrix.n_features() {
        return Err(Error::InvalidInput("one encoding per feature is required".into()));
    }
    let rows: Vec<usize> = (0..matrix.n_rows()).collect();
    fit_rows(matrix, encodings, labels, &rows, target, config)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied scores
/// count one half. `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives; tie groups share the doubled mean rank
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, doubled mean = i + j + 2
        let twice_mean = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_mean * pos_in_group;
        i = j + 1;
    }
    let p = n_pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub target: Label,
    pub folds: usize,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
}

/// Stratified fold index for every row; deterministic under `seed`.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.len() < k || neg.len() < k {
        return Err(Error::DegenerateLabels(format!(
            "{} positives and {} negatives cannot fill {k} folds with both classes",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold = vec![0; labels.len()];
    for (i, &r) in pos.iter().enumerate() {
        fold[r] = i % k;
    }
    for (i, &r) in neg.iter().enumerate() {
        fold[r] = i % k;
    }
    Ok(fold)
}

/// Stratified k-fold cross-validated AUC.
pub fn cross_validate(
    matrix: &FeatureMatrix,
    encodings: &[Encoding],
    labels: &[bool],
    target: Label,
    config: &TrainConfig,
) -> Result<CvReport> {
    config.validate()?;
    if labels.len() != matrix.n_rows() {
        return Err(Error::InvalidInput("labels do not align with rows".into()));
    }
    let k = config.cv_folds;
    let fold = stratified_folds(labels, k, config.seed)?;
    let mut fold_aucs = Vec::with_capacity(k);
    for f in 0..k {
        let train_rows: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] != f).collect();
        let test_rows: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] == f).collect();
        let model = fit_rows(matrix, encodings, labels, &train_rows, target, config)?;
        let scores: Vec<f64> = test_rows
            .iter()
            .map(|&r| model.predict_unchecked(&matrix.row(r)))
            .collect();
        let y: Vec<bool> = test_rows.iter().map(|&r| labels[r]).collect();
        let a = auc(&scores, &y).ok_or_else(|| Error::DegenerateLabels(format!("fold {f} lacks a class")))?;
        fold_aucs.push(a);
    }
    let mean_auc = fold_aucs.iter().sum::<f64>() / k as f64;
    Ok(CvReport {
        target,
        folds: k,
        fold_aucs,
        mean_auc,
    })
}
