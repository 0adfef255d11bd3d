//! Command-line front end, configuration and file formats for the
//! `dgrlab-core` pipeline.

pub mod cli;
pub mod config;
pub mod exec;
pub mod io;
pub mod manifest;
