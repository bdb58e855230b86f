//! Files, corpora, experiment campaigns and the `sdc-forge` CLI on top of
//! [`sdc_forge_core`].

pub mod campaign;
pub mod compare;
pub mod config;
pub mod corpus;
pub mod csv_io;
pub mod error;
pub mod run;

pub use config::{RunConfig, RunMode};
pub use error::{ConfigError, ForgeError};
