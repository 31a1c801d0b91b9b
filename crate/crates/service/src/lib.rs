//! HTTP API, configuration and command-line front end over `ask_core`.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod state;

pub use config::{Config, ConfigArgs};
pub use state::{AppState, SharedState};
