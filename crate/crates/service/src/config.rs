use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use clinexplain::influence::default_z_grid;
use clinexplain::predictor::TrainConfig;
use clinexplain::shapley::ExplainConfig;

use crate::error::ServiceError;

pub const ENV_PORT: &str = "CLINEXPLAIN_PORT";
pub const ENV_DATA: &str = "CLINEXPLAIN_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Directory of `<label>.json` models. Labels without a file are trained
    /// at startup.
    pub model_dir: Option<PathBuf>,
    pub port: u16,
    pub z_grid: Vec<f64>,
    /// Occlusion window length; `None` picks it from the sampling interval.
    pub k: Option<usize>,
    pub exact_limit: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Cap on low-risk rows used as the Shapley background.
    pub max_background: usize,
    pub train: TrainConfig,
    /// Built UI assets served under `/` when present.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let explain = ExplainConfig::default();
        ServiceConfig {
            data_dir: PathBuf::from("data"),
            model_dir: None,
            port: 8080,
            z_grid: default_z_grid(),
            k: None,
            exact_limit: explain.exact_limit,
            n_samples: explain.n_samples,
            seed: explain.seed,
            max_background: 64,
            train: TrainConfig::default(),
            static_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let config: ServiceConfig =
            serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Applies `CLINEXPLAIN_PORT` and `CLINEXPLAIN_DATA` when set.
    pub fn with_env(mut self) -> Result<Self, ServiceError> {
        if let Ok(p) = std::env::var(ENV_PORT) {
            self.port = p
                .parse()
                .map_err(|_| ServiceError::Config(format!("{ENV_PORT}={p} is not a port")))?;
        }
        if let Ok(d) = std::env::var(ENV_DATA) {
            self.data_dir = PathBuf::from(d);
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.z_grid.is_empty() || self.z_grid.iter().any(|z| !z.is_finite()) {
            return Err(ServiceError::Config(
                "z_grid must be a non-empty list of finite numbers".into(),
            ));
        }
        if self.k == Some(0) {
            return Err(ServiceError::Config("k must be positive".into()));
        }
        if self.n_samples == 0 || self.max_background == 0 {
            return Err(ServiceError::Config(
                "n_samples and max_background must be positive".into(),
            ));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn explain(&self) -> ExplainConfig {
        ExplainConfig {
            exact_limit: self.exact_limit,
            n_samples: self.n_samples,
            seed: self.seed,
        }
    }
}
