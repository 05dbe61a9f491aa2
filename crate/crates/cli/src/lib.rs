//! Command-line pipeline and `/v1` HTTP service over the oncotwin core.

pub mod api;
pub mod cli;
pub mod jobs;
mod table;
mod views;

pub use api::{router, ApiError, AppState};
pub use cli::{run, Cli};
