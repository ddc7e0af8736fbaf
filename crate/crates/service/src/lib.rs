//! Command line pipeline and HTTP service for loosely timed keyframe
//! in-betweening.

pub mod cli;
pub mod config;
pub mod error;
pub mod jobs;
pub mod pipeline;
pub mod server;

pub use config::RunConfig;
pub use error::{Error, Result};
