//! Interpretable graphics capsules: unsupervised part discovery for images of
//! a single object category.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gdm;
pub mod losses;
pub mod nets;
pub mod render;
pub mod train;
pub mod types;

pub use config::{Config, ConfigError, PoseSource};
pub use error::{Error, Result};
