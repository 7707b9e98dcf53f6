//! Gateway service and command-line tools around `sentinel-core`.

pub mod api;
pub mod cli;
pub mod gateway;
pub mod server;

pub use api::{ApiError, ApiRequest, ApiResponse, Operation};
pub use gateway::{AgentTemplate, Gateway};
