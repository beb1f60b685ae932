//! Pipeline orchestration, evaluation reports and the authoring-session
//! service behind the `clauserec` command.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod pipeline;
pub mod service;
pub mod session;

pub use config::PipelineConfig;
pub use error::{AppError, AppResult};
pub use pipeline::{Pipeline, Status};
