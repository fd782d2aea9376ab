//! Command implementations behind the `cgru` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_rescore, cmd_score, cmd_train, cmd_translate, TranslateOptions};
pub use config::RunConfig;
