//! HTTP API and command-line plumbing over the `clinexplain` core: one
//! immutable dataset, its feature matrix and five risk models, with cohort
//! and explanation caches.

pub mod api;
pub mod config;
pub mod error;
pub mod state;

pub use api::router;
pub use config::ServiceConfig;
pub use error::{ErrorBody, ServiceError};
pub use state::AppState;
