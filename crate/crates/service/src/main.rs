use std::collections::BTreeMap;
use std::io::{IsTerminal, Write};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use clinexplain::features::FeatureOptions;
use clinexplain::influence::{default_window, influential_segments};
use clinexplain::predictor::{cross_validate, encodings_for, Model};
use clinexplain::store::Dataset;
use clinexplain::synth::{generate, SynthConfig};
use clinexplain::Label;
use clinexplain_service::config::{ENV_DATA, ENV_PORT};
use clinexplain_service::state::{featurize, label_vector, model_path, train_model};
use clinexplain_service::{router, AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "clinexplain", version, about = "Explainable postoperative complication risk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its anomaly ledger.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings as JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Load and validate a dataset, optionally exporting the feature matrix.
    Ingest {
        #[arg(long, env = ENV_DATA)]
        data: PathBuf,
        /// CSV path for the matrix; a `.features.json` sidecar is written next to it.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Train the five risk models and write them as JSON.
    Train {
        #[arg(long, env = ENV_DATA)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Also report stratified cross-validated AUC.
        #[arg(long)]
        cv: bool,
    },
    /// Print the contribution set of one patient and target.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patient: String,
        #[arg(long, default_value = "C")]
        target: Label,
    },
    /// Print the influential segments of one temporal feature.
    Influence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        feature: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run the HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = ENV_PORT)]
        port: Option<u16>,
    },
}

#[derive(Args)]
struct Common {
    /// Service configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = ENV_DATA)]
    data: Option<PathBuf>,
    #[arg(long)]
    models: Option<PathBuf>,
}

impl Common {
    fn service_config(&self) -> Result<ServiceConfig> {
        let mut config = match &self.config {
            Some(p) => ServiceConfig::load(p)?,
            None => ServiceConfig::default(),
        }
        .with_env()?;
        if let Some(d) = &self.data {
            config.data_dir = d.clone();
        }
        if let Some(m) = &self.models {
            config.model_dir = Some(m.clone());
        }
        Ok(config)
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match Cli::parse().command {
        Command::Synth {
            out,
            config,
            seed,
            n_patients,
        } => {
            let mut c = match config {
                Some(p) => SynthConfig::load(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(n) = n_patients {
                c.n_patients = n;
            }
            c.validate()?;
            let report = generate(&c, &out).with_context(|| format!("writing {}", out.display()))?;
            print_json(&report)
        }
        Command::Ingest { data, export } => {
            let ds = Dataset::load(&data)?;
            let (descriptors, matrix) = featurize(&ds)?;
            if let Some(csv) = export {
                let sidecar = csv.with_extension("features.json");
                matrix.export(&descriptors, &csv, &sidecar)?;
            }
            let counts: BTreeMap<&str, usize> = ds.tables().iter().map(|t| (t.name(), t.len())).collect();
            print_json(&serde_json::json!({
                "tables": counts,
                "events": ds.events().len(),
                "features": descriptors.len(),
                "rows": matrix.n_rows(),
                "target_entity": FeatureOptions::default().target_entity,
            }))
        }
        Command::Train { data, models, cv } => {
            let ds = Dataset::load(&data)?;
            let (descriptors, matrix) = featurize(&ds)?;
            let config = ServiceConfig::default().train;
            std::fs::create_dir_all(&models).with_context(|| format!("creating {}", models.display()))?;
            let mut summary = BTreeMap::new();
            for label in Label::ALL {
                let model = train_model(&ds, &descriptors, &matrix, label, &config)?;
                let path = model_path(&models, label);
                model.save(&path)?;
                Model::load(&path)?;
                let mut entry = serde_json::json!({ "path": path, "columns": model.columns.len() });
                if cv {
                    let y = label_vector(&ds, label)?;
                    let report = cross_validate(&matrix, &encodings_for(&matrix, &descriptors), &y, label, &config)?;
                    entry["cv_mean_auc"] = serde_json::json!(report.mean_auc);
                }
                summary.insert(label, entry);
            }
            print_json(&summary)
        }
        Command::Explain {
            common,
            patient,
            target,
        } => {
            let state = AppState::build(common.service_config()?)?;
            let entry = state.cohort_by_id(None)?;
            let set = state.explanation(&patient, target, &entry)?;
            print_json(&*set)
        }
        Command::Influence {
            common,
            patient,
            feature,
            k,
        } => {
            let state = AppState::build(common.service_config()?)?;
            let d = state.descriptor(&feature)?.clone();
            if !d.is_dynamic() {
                bail!("{feature} is not a temporal feature");
            }
            let row = state.patient_row(&patient)?;
            let window = state.windows(row)?.get(d.window);
            let item = d.item_id.clone().unwrap_or_default();
            let series = state.dataset.get_series(&patient, &item, window)?;
            let times: Vec<_> = series.points.iter().map(|p| p.timestamp).collect();
            let k = k.or(state.config.k).unwrap_or_else(|| default_window(&times));
            let entry = state.cohort_by_id(None)?;
            let set = influential_segments(&series, &d, &entry.feature_reference(&feature), k, &state.config.z_grid)?;
            print_json(&set)
        }
        Command::Serve { common, port } => {
            let mut config = common.service_config()?;
            if let Some(p) = port {
                config.port = p;
            }
            let port = config.port;
            let state = Arc::new(AppState::build(config)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
                tracing::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok(())
            })
        }
    }
}
