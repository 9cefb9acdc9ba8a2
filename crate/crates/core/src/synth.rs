//! Deterministic synthetic cardiac-surgery dataset with planted risk effects
//! and planted anomalous vital-sign segments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{synthesize_descriptors, FeatureContext, FeatureOptions};
use crate::influence::default_window;
use crate::label::Label;
use crate::predictor::sigmoid;
use crate::store::{Cell, Dataset, Schema, Timestamp, CHARTEVENTS, LABTESTS, SURGERIES, VITALSIGNS};

pub const LEDGER_FILE: &str = "planted_anomalies.json";

/// 2019-01-01T00:00:00Z
const EPOCH: i64 = 1_546_300_800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub label: Label,
    /// Feature id as produced by feature synthesis.
    pub feature: String,
    /// Logit change per standard deviation of the feature.
    pub weight: f64,
}

impl PlantedEffect {
    fn new(label: Label, feature: &str, weight: f64) -> Self {
        PlantedEffect {
            label,
            feature: feature.to_string(),
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub target_prevalence: BTreeMap<Label, f64>,
    pub planted_effects: Vec<PlantedEffect>,
    /// Share of patients with one planted anomalous vital-sign segment.
    pub anomaly_rate: f64,
    /// Inclusive bounds on points per in-surgery vital-sign series.
    pub series_length_range: (usize, usize),
    /// SD of the Gaussian noise added to every label logit.
    pub logit_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        use Label::*;
        let e = PlantedEffect::new;
        SynthConfig {
            seed: 42,
            n_patients: 1000,
            target_prevalence: Label::ALL.iter().map(|l| (*l, 0.25)).collect(),
            planted_effects: vec![
                e(C, "surgeries.surgery_time", 1.6),
                e(C, "surgeries.cpb_time", 0.8),
                e(C, "vitalsigns.Pulse.MEAN.in-surgery", 1.2),
                e(C, "labtests.Lactate.MEAN.pre-surgery", 1.1),
                e(C, "patients.age", -0.8),
                e(L, "chartevents.RespRate.MEAN.pre-surgery", 1.6),
                e(L, "vitalsigns.SpO2.MIN.in-surgery", -1.6),
                e(L, "patients.weight", -0.9),
                e(A, "vitalsigns.Pulse.SD.in-surgery", 1.7),
                e(A, "labtests.Potassium.MEAN.pre-surgery", -1.7),
                e(A, "surgeries.aortic_clamp_time", 1.1),
                e(I, "labtests.WBC.MEAN.pre-surgery", 1.9),
                e(I, "vitalsigns.Temp.MEAN.in-surgery", 1.5),
                e(I, "surgeries.surgery_time", 0.9),
                e(O, "labtests.Creatinine.MEAN.pre-surgery", 1.8),
                e(O, "chartevents.CVP.MEAN.pre-surgery", 1.5),
            ],
            anomaly_rate: 0.1,
            series_length_range: (60, 240),
            logit_noise: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (label, p) in &self.target_prevalence {
            if !(*p > 0.0 && *p < 1.0) {
                return bad(format!("prevalence of {label} must lie in (0, 1), got {p}"));
            }
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad(format!("anomaly_rate must lie in [0, 1], got {}", self.anomaly_rate));
        }
        let (lo, hi) = self.series_length_range;
        if lo < 12 || lo > hi {
            return bad(format!("series_length_range ({lo}, {hi}) needs 12 <= min <= max"));
        }
        if !(self.logit_noise >= 0.0 && self.logit_noise.is_finite()) {
            return bad(format!(
                "logit_noise must be finite and non-negative, got {}",
                self.logit_noise
            ));
        }
        for e in &self.planted_effects {
            if !e.weight.is_finite() {
                return bad(format!("weight of {} is not finite", e.feature));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SynthConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: SynthConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyDirection {
    Up,
    Down,
}

/// Ground truth for one planted segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedAnomaly {
    pub patient_id: String,
    pub surgery_id: String,
    pub item_id: String,
    /// Inclusive indices into the in-surgery series.
    pub start_index: usize,
    pub end_index: usize,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    pub direction: AnomalyDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub n_patients: usize,
    pub table_counts: BTreeMap<String, usize>,
    pub prevalence: BTreeMap<Label, f64>,
    /// Share of patients with at least one complication.
    pub any_complication: f64,
    pub anomalies: Vec<PlantedAnomaly>,
}

struct ItemSpec {
    name: &'static str,
    unit: &'static str,
    mean: f64,
    /// Between-patient SD of the patient's level.
    between: f64,
    /// Within-patient noise SD.
    within: f64,
}

const fn item(name: &'static str, unit: &'static str, mean: f64, between: f64, within: f64) -> ItemSpec {
    ItemSpec {
        name,
        unit,
        mean,
        between,
        within,
    }
}

const VITALS: [ItemSpec; 4] = [
    item("Pulse", "bpm", 120.0, 12.0, 3.0),
    item("SpO2", "%", 96.0, 1.5, 0.6),
    item("SBP", "mmHg", 85.0, 8.0, 2.5),
    item("Temp", "C", 36.0, 0.5, 0.08),
];

const LABS: [ItemSpec; 6] = [
    item("Lactate", "mmol/L", 1.6, 0.5, 0.3),
    item("Creatinine", "mg/dL", 0.45, 0.12, 0.05),
    item("Hemoglobin", "g/dL", 12.5, 1.5, 0.6),
    item("Potassium", "mmol/L", 4.2, 0.35, 0.2),
    item("Glucose", "mmol/L", 5.6, 0.9, 0.6),
    item("WBC", "10^9/L", 9.0, 2.2, 1.0),
];

const CHARTS: [ItemSpec; 4] = [
    item("RespRate", "/min", 30.0, 5.0, 2.0),
    item("DiastolicBP", "mmHg", 50.0, 6.0, 3.0),
    item("CVP", "cmH2O", 8.0, 2.0, 1.0),
    item("EtCO2", "mmHg", 38.0, 3.0, 1.5),
];

const DIAGNOSES: [&str; 5] = ["ASD", "PDA", "TGA", "TOF", "VSD"];

/// AR(1) coefficient of the vital-sign baseline.
const AR: f64 = 0.9;

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

struct Rows {
    tables: Vec<Vec<Vec<Cell>>>,
    counters: [usize; 3],
}

fn text(s: &str) -> Cell {
    Cell::Text(Arc::from(s))
}

impl Rows {
    fn event(&mut self, table: usize, prefix: &str, ids: [&str; 3], ts: Timestamp, value: f64, unit: &str) {
        let slot = table - 3;
        self.counters[slot] += 1;
        let id = format!("{prefix}{:07}", self.counters[slot]);
        self.tables[table].push(vec![
            text(&id),
            text(ids[0]),
            text(ids[1]),
            text(ids[2]),
            Cell::Time(ts),
            Cell::Num(value),
            text(unit),
        ]);
    }
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).expect("finite sd").sample(rng)
}

fn positive(x: f64, floor: f64) -> f64 {
    if x < floor {
        floor
    } else {
        x
    }
}

/// Generates the dataset in memory.
pub fn generate_dataset(config: &SynthConfig) -> Result<(Dataset, GenerationReport)> {
    config.validate()?;
    let schema = Schema::pic_default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Rows {
        tables: vec![Vec::new(); schema.entities.len()],
        counters: [0; 3],
    };
    let lab_t = schema
        .entities
        .iter()
        .position(|t| t.entity_name == LABTESTS)
        .expect("default schema");
    let chart_t = schema
        .entities
        .iter()
        .position(|t| t.entity_name == CHARTEVENTS)
        .expect("default schema");
    let vital_t = schema
        .entities
        .iter()
        .position(|t| t.entity_name == VITALSIGNS)
        .expect("default schema");
    debug_assert_eq!((lab_t, chart_t, vital_t), (3, 4, 5));
    let mut anomalies = Vec::new();

    for i in 0..config.n_patients {
        let pid = format!("P{:05}", i + 1);
        let aid = format!("A{:05}", i + 1);
        let sid = format!("S{:05}", i + 1);

        let gender = if rng.random_bool(0.55) { "M" } else { "F" };
        let age = round_to(rng.random_range(1.0..180.0), 1);
        let weight = round_to(positive(3.5 + 0.22 * age + normal(&mut rng, 0.0, 1.5), 2.0), 1);
        let height = round_to(positive(52.0 + 0.5 * age + normal(&mut rng, 0.0, 4.0), 40.0), 1);
        rows.tables[0].push(vec![
            text(&pid),
            text(gender),
            Cell::Num(age),
            Cell::Num(weight),
            Cell::Num(height),
        ]);

        let admit = EPOCH + rng.random_range(0..730) * 86_400 + rng.random_range(0..86_400);
        let surgery_start = admit + rng.random_range(24 * 3600..96 * 3600);
        let complexity = match rng.random_range(0..10) {
            0..=3 => "low",
            4..=7 => "medium",
            _ => "high",
        };
        let shift = match complexity {
            "low" => 0.0,
            "medium" => 25.0,
            _ => 50.0,
        };
        let minutes = normal(&mut rng, 160.0 + shift, 45.0).clamp(90.0, 360.0).round();
        let cpb = (minutes * rng.random_range(0.4..0.7)).round();
        let clamp = (cpb * rng.random_range(0.5..0.8)).round();
        let surgery_end = surgery_start + minutes as i64 * 60;
        let discharge = surgery_end + rng.random_range(3..15) * 86_400;
        let diagnosis = DIAGNOSES[rng.random_range(0..DIAGNOSES.len())];
        rows.tables[1].push(vec![
            text(&aid),
            text(&pid),
            Cell::Time(Timestamp(admit)),
            Cell::Time(Timestamp(discharge)),
            text(diagnosis),
        ]);
        let mut surgery = vec![
            text(&sid),
            text(&aid),
            text(&pid),
            Cell::Time(Timestamp(surgery_start)),
            Cell::Time(Timestamp(surgery_end)),
            Cell::Num(minutes),
            Cell::Num(cpb),
            Cell::Num(clamp),
            text(complexity),
        ];
        surgery.extend(std::iter::repeat_n(Cell::Null, Label::ALL.len()));
        rows.tables[2].push(surgery);

        // pre-surgery labs and chart events, plus a few post-surgery labs
        for (table, prefix, specs, (lo, hi)) in [
            (lab_t, "LT", &LABS[..], (1usize, 5usize)),
            (chart_t, "CE", &CHARTS[..], (2, 8)),
        ] {
            for spec in specs {
                let level = normal(&mut rng, spec.mean, spec.between);
                let n_pre = rng.random_range(lo..=hi);
                let mut times: Vec<i64> = (0..n_pre)
                    .map(|_| rng.random_range(admit..surgery_start - 60))
                    .collect();
                times.sort_unstable();
                for t in times {
                    let v = round_to(positive(normal(&mut rng, level, spec.within), 0.01), 2);
                    rows.event(table, prefix, [&pid, &aid, spec.name], Timestamp(t), v, spec.unit);
                }
                if table == lab_t {
                    let n_post = rng.random_range(0..=2);
                    for _ in 0..n_post {
                        let t = rng.random_range(surgery_end + 60..discharge);
                        let v = round_to(positive(normal(&mut rng, level, spec.within), 0.01), 2);
                        rows.event(table, prefix, [&pid, &aid, spec.name], Timestamp(t), v, spec.unit);
                    }
                }
            }
        }

        // in-surgery vitals on an even grid
        let (lo, hi) = config.series_length_range;
        let n = rng.random_range(lo..=hi);
        let span = (surgery_end - surgery_start) as f64;
        let times: Vec<Timestamp> = (0..n)
            .map(|j| Timestamp(surgery_start + (span * j as f64 / (n - 1) as f64).round() as i64))
            .collect();
        let anomaly = if rng.random_bool(config.anomaly_rate) {
            let which = rng.random_range(0..VITALS.len());
            let k = default_window(&times);
            let len = rng.random_range(3 * k..=4 * k).max(9).min(n / 6);
            let margin = n / 10;
            let start = rng.random_range(margin..=n - len - margin);
            let direction = if rng.random_bool(0.5) {
                AnomalyDirection::Up
            } else {
                AnomalyDirection::Down
            };
            Some((which, start, start + len - 1, direction))
        } else {
            None
        };
        for (v_idx, spec) in VITALS.iter().enumerate() {
            let level = normal(&mut rng, spec.mean, spec.between);
            let stationary = spec.within / (1.0 - AR * AR).sqrt();
            let mut a = normal(&mut rng, 0.0, stationary);
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                a = AR * a + normal(&mut rng, 0.0, spec.within);
                values.push(level + a);
            }
            if let Some((which, s, e, dir)) = anomaly {
                if which == v_idx {
                    let sign = if dir == AnomalyDirection::Up { 1.0 } else { -1.0 };
                    for (j, v) in values[s..=e].iter_mut().enumerate() {
                        let spike = if j % 2 == 0 { 4.0 } else { -4.0 };
                        *v += sign * 3.0 * stationary + spike * stationary;
                    }
                    anomalies.push(PlantedAnomaly {
                        patient_id: pid.clone(),
                        surgery_id: sid.clone(),
                        item_id: spec.name.to_string(),
                        start_index: s,
                        end_index: e,
                        start_ts: times[s],
                        end_ts: times[e],
                        direction: dir,
                    });
                }
            }
            for (t, v) in times.iter().zip(values) {
                rows.event(vital_t, "VS", [&pid, &sid, spec.name], *t, round_to(v, 2), spec.unit);
            }
        }
    }

    let draws: Vec<(f64, f64)> = (0..config.n_patients * Label::ALL.len())
        .map(|_| (normal(&mut rng, 0.0, 1.0), rng.random::<f64>()))
        .collect();

    let unlabeled = Dataset::from_rows(schema.clone(), rows.tables.clone())?;
    let mut prevalence = BTreeMap::new();
    if config.n_patients > 0 {
        let ctx = FeatureContext::new(&unlabeled, SURGERIES)?;
        let descriptors = synthesize_descriptors(&unlabeled, &FeatureOptions::default())?;
        let label_col0 = schema
            .table(SURGERIES)
            .and_then(|t| t.column_index(&Label::ALL[0].column()))
            .expect("default schema");
        for (li, label) in Label::ALL.iter().enumerate() {
            let mut logit_part = vec![0.0; config.n_patients];
            for effect in config.planted_effects.iter().filter(|e| e.label == *label) {
                let d = descriptors
                    .iter()
                    .find(|d| d.feature_id == effect.feature)
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!("planted feature {} does not exist", effect.feature))
                    })?;
                let values: Vec<Option<f64>> = (0..config.n_patients)
                    .map(|r| ctx.compute(d, r))
                    .collect::<Result<_>>()?;
                for (acc, z) in logit_part.iter_mut().zip(standardize(&values)) {
                    *acc += effect.weight * z;
                }
            }
            for (r, acc) in logit_part.iter_mut().enumerate() {
                *acc += config.logit_noise * draws[r * Label::ALL.len() + li].0;
            }
            let target = config.target_prevalence.get(label).copied().unwrap_or(0.25);
            let b = calibrate_intercept(&logit_part, target);
            let mut positives = 0usize;
            for (r, acc) in logit_part.iter().enumerate() {
                let y = draws[r * Label::ALL.len() + li].1 < sigmoid(b + acc);
                positives += y as usize;
                rows.tables[2][r][label_col0 + li] = Cell::Num(if y { 1.0 } else { 0.0 });
            }
            prevalence.insert(*label, positives as f64 / config.n_patients as f64);
        }
    }
    let any = rows.tables[2].iter().filter(|r| label_flags(r)).count();
    let dataset = Dataset::from_rows(schema, rows.tables)?;
    let table_counts = dataset
        .tables()
        .iter()
        .map(|t| (t.name().to_string(), t.len()))
        .collect();
    let report = GenerationReport {
        n_patients: config.n_patients,
        table_counts,
        prevalence,
        any_complication: if config.n_patients == 0 {
            0.0
        } else {
            any as f64 / config.n_patients as f64
        },
        anomalies,
    };
    Ok((dataset, report))
}

/// Whether any label cell of a surgery row is positive.
fn label_flags(row: &[Cell]) -> bool {
    row[row.len() - Label::ALL.len()..]
        .iter()
        .any(|c| matches!(c, Cell::Num(v) if *v == 1.0))
}

/// Z-scores with population moments over present values; missing becomes 0.
fn standardize(values: &[Option<f64>]) -> Vec<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![0.0; values.len()];
    }
    let m = present.iter().sum::<f64>() / present.len() as f64;
    let sd = (present.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / present.len() as f64).sqrt();
    values
        .iter()
        .map(|v| match v {
            Some(x) if sd > 0.0 => (x - m) / sd,
            _ => 0.0,
        })
        .collect()
}

/// Intercept `b` with mean `sigmoid(b + s_i)` equal to `target`, by bisection.
fn calibrate_intercept(scores: &[f64], target: f64) -> f64 {
    let mean_p = |b: f64| scores.iter().map(|s| sigmoid(b + s)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates into `dir`: the table CSVs, the schema manifest and the anomaly
/// ledger.
pub fn generate(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<GenerationReport> {
    let dir = dir.as_ref();
    let (dataset, report) = generate_dataset(config)?;
    dataset.write(dir)?;
    let ledger = dir.join(LEDGER_FILE);
    let text = serde_json::to_string_pretty(&report.anomalies)?;
    fs::write(&ledger, text + "\n").map_err(|e| Error::io(&ledger, e))?;
    Ok(report)
}

pub fn load_ledger(dir: impl AsRef<Path>) -> Result<Vec<PlantedAnomaly>> {
    let path = dir.as_ref().join(LEDGER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
